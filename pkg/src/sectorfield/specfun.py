"""Verified special-function kernel.

Gamma / digamma wrappers with explicit pole handling, real-branch Lambert W,
the parabolic cylinder function D_p and its half-line moments

    zeroth(p) = int_0^inf D_p(z)^2 dz
    first(p)  = int_0^inf z D_p(z)^2 dz

in closed form (digamma / gamma-ratio expressions) with a deterministic
adaptive-quadrature fallback near the poles of the closed forms, and the
solver for the power-exponential equation  x^d exp(-a x) = c.

Everything here is a pure function of its arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import mpmath
import numpy as np
import scipy.special as _sp
from scipy.integrate import quad as _quad

from .errors import ConvergenceError, DomainError, PoleError

_SQRT_PI = math.sqrt(math.pi)
_SQRT_2 = math.sqrt(2.0)
_INV_E = math.exp(-1.0)

#: closed-form gamma/digamma arguments must keep this distance from a
#: non-positive integer, else we fall back to quadrature
POLE_DISTANCE = 1e-6

# cancellation factor above which the Kummer series is re-run in mpmath
_ESCALATE_AT = 3e2
# fixed series/asymptotic crossover for D_p evaluation
_ASYMPT_Z = 6.0


def _near_nonpositive_int(x: float, dist: float = POLE_DISTANCE) -> bool:
    if x > dist:
        return False
    return abs(x - round(x)) <= dist


def gamma(x: float) -> float:
    """Gamma function with an explicit pole check.

    Relative error <= 1e-12 over |x| <= 30 (delegates to the C library
    implementation, which is good to a few ulp there).
    """
    if _near_nonpositive_int(x, 1e-12):
        raise PoleError(f"gamma pole at x = {x}")
    try:
        return math.gamma(x)
    except (ValueError, OverflowError) as exc:  # pragma: no cover - guarded above
        raise PoleError(f"gamma undefined at x = {x}") from exc


def digamma(x: float) -> float:
    """Digamma Psi(x) = Gamma'(x)/Gamma(x); PoleError at non-positive integers."""
    if _near_nonpositive_int(x, 1e-12):
        raise PoleError(f"digamma pole at x = {x}")
    return float(_sp.psi(x))


def lambert_w(branch: int, x: float) -> float:
    """Real Lambert W on branch 0 or -1, Halley-polished.

    Returns w with w*exp(w) = x to |residual| <= 1e-12.
    Branch 0 needs x >= -1/e; branch -1 needs -1/e <= x < 0.
    """
    if branch not in (0, -1):
        raise DomainError(f"unsupported branch {branch}")
    if x < -_INV_E - 1e-14:
        raise DomainError(f"x = {x} below -1/e")
    if branch == -1 and x >= 0.0:
        raise DomainError(f"branch -1 needs x < 0, got {x}")
    if abs(x + _INV_E) <= 1e-14:
        return -1.0
    if x == 0.0:
        return 0.0

    w = float(np.real(_sp.lambertw(x, k=branch)))
    # Halley iteration; one or two steps suffice from scipy's estimate
    for _ in range(6):
        ew = math.exp(w)
        f = w * ew - x
        if abs(f) <= 1e-13 * max(1.0, abs(x)):
            break
        wp1 = w + 1.0
        w -= f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
    if abs(w * math.exp(w) - x) > 1e-12 * max(1.0, abs(x)):
        raise ConvergenceError(f"lambert_w failed to polish at x = {x}")
    return w


# ---------------------------------------------------------------------------
# parabolic cylinder function
# ---------------------------------------------------------------------------

def _kummer(a: float, b: float, w: float) -> tuple[float, float]:
    """Kummer M(a,b,w) by series; returns (value, largest |term|)."""
    term = 1.0
    total = 1.0
    tmax = 1.0
    for n in range(1, 1200):
        term *= (a + n - 1.0) / (b + n - 1.0) * w / n
        total += term
        at = abs(term)
        if at > tmax:
            tmax = at
        if at < 1e-18 * max(1.0, abs(total)):
            return total, tmax
    raise ConvergenceError("Kummer series did not converge")


def _pcf_d_series(p: float, z: float) -> tuple[float, float]:
    """D_p(z) from the two-Kummer-series representation.

    Returns (value, cancellation factor): the factor estimates how many
    leading digits were lost to cancellation between the two series.
    """
    w = 0.5 * z * z
    m1, t1 = _kummer(-0.5 * p, 0.5, w)
    m2, t2 = _kummer(0.5 * (1.0 - p), 1.5, w)
    g1 = float(_sp.rgamma(0.5 * (1.0 - p)))
    g2 = float(_sp.rgamma(-0.5 * p))
    a = m1 * g1
    b = _SQRT_2 * z * m2 * g2
    bracket = a - b
    scale = max(abs(a), abs(b), t1 * abs(g1), _SQRT_2 * abs(z) * t2 * abs(g2))
    cancel = scale / max(abs(bracket), 1e-300)
    value = 2.0 ** (0.5 * p) * _SQRT_PI * math.exp(-0.25 * z * z) * bracket
    return value, cancel


def _pcf_d_asymptotic(p: float, z: float) -> tuple[float, float]:
    """Large-z expansion D_p(z) ~ z^p e^{-z^2/4} sum_k (-1)^k (p)_{2k}... .

    Returns (value, relative truncation estimate). Valid for z > 0 only;
    the sum is truncated at its smallest term.
    """
    zz = z * z
    term = 1.0
    total = 1.0
    k = 0
    prev = abs(term)
    trunc = prev
    while k < 200:
        k += 1
        num = (p - (2 * k - 2)) * (p - (2 * k - 1))
        term *= -num / (2.0 * k * zz)
        at = abs(term)
        if at >= prev:            # asymptotic tail started to diverge
            trunc = prev
            break
        total += term
        prev = at
        trunc = at
        if at < 1e-16 * abs(total):
            break
    rel = trunc / max(abs(total), 1e-300)
    value = math.exp(-0.25 * zz + p * math.log(z)) * total
    return value, rel


def _pcf_d_mp(p: float, z: float, dps: int) -> float:
    with mpmath.workdps(dps):
        return float(mpmath.pcfd(mpmath.mpf(p), mpmath.mpf(z)))


def pcf_d(p: float, z: float, tol: float = 1e-12) -> float:
    """Parabolic cylinder function D_p(z).

    Power series for small |z|, asymptotic expansion beyond the fixed
    crossover z >= 6, with an accuracy self-check: the asymptotic branch
    is only trusted when its truncation estimate beats `tol`, and the
    series escalates to multi-precision when float64 cancellation would
    lose the target accuracy.
    """
    if not (math.isfinite(p) and math.isfinite(z)):
        raise DomainError("pcf_d requires finite p, z")
    if z >= _ASYMPT_Z:
        value, rel = _pcf_d_asymptotic(p, z)
        if rel < 0.1 * tol:
            return value
    value, cancel = _pcf_d_series(p, z)
    if math.isfinite(value) and cancel <= max(_ESCALATE_AT, 0.05 * tol / 2.2e-16):
        return value
    if not math.isfinite(cancel):
        cancel = 1e40
    extra = int(math.log10(cancel)) + 12
    try:
        return _pcf_d_mp(p, z, 16 + extra)
    except Exception as exc:  # pragma: no cover - mpmath is robust here
        raise ConvergenceError(f"pcf_d failed at p={p}, z={z}") from exc


@dataclass(frozen=True)
class PcfMoment:
    """Half-line moments of D_p^2: zeroth = int D_p^2, first = int z D_p^2."""

    p: float
    zeroth: float
    first: float

    def __post_init__(self):
        if not (math.isfinite(self.zeroth) and math.isfinite(self.first)):
            raise PoleError(f"non-finite moment at p = {self.p}")
        if self.zeroth <= 0.0 or self.first <= 0.0:
            raise PoleError(f"non-positive moment at p = {self.p}")


def _moment_pole_args(p: float) -> list[float]:
    # every gamma/digamma argument appearing in the closed forms
    return [
        -p, 0.5 * (1.0 - p), -0.5 * p,
        -0.5 * (p + 1.0), -p - 1.0, 0.5 * (2.0 - p), -0.5 * (p - 1.0), 1.0 - p,
    ]


def pcf_moments(p: float) -> PcfMoment:
    """Closed-form moments of D_p^2 over [0, inf).

    zeroth = sqrt(pi)/2^{3/2} * (Psi((1-p)/2) - Psi(-p/2)) / Gamma(-p)
    first  = the two-term gamma-ratio expression (see pcf_moments_quadrature
    for the defining integrals). Raises PoleError whenever any gamma/digamma
    argument is within POLE_DISTANCE of a non-positive integer; callers then
    use the quadrature fallback.
    """
    if not math.isfinite(p):
        raise DomainError("pcf_moments requires finite p")
    if any(_near_nonpositive_int(a) for a in _moment_pole_args(p)):
        raise PoleError(f"closed-form moment factor singular at p = {p}")
    if abs(p) > 30.0:
        # float64 gamma products overflow; evaluate the same closed forms
        # in multi-precision (the float() conversion may still overflow,
        # which the PcfMoment invariant turns into a PoleError)
        with mpmath.workdps(40):
            mp = mpmath.mpf(p)
            zeroth = (mpmath.sqrt(mpmath.pi) / 2 ** mpmath.mpf(1.5)
                      * (mpmath.digamma((1 - mp) / 2) - mpmath.digamma(-mp / 2))
                      / mpmath.gamma(-mp))
            t1 = ((mpmath.gamma(-(mp + 1) / 2) * mpmath.gamma((1 - mp) / 2)
                   - mpmath.gamma(-mp / 2) ** 2)
                  / (2 ** (mp + 2) * mpmath.gamma(-mp - 1) * mpmath.gamma(-mp)))
            t2 = (mp * (mpmath.gamma(-mp / 2) * mpmath.gamma((2 - mp) / 2)
                        - mpmath.gamma(-(mp - 1) / 2) ** 2)
                  / (2 ** (mp + 1) * mpmath.gamma(-mp) * mpmath.gamma(1 - mp)))
            return PcfMoment(p=p, zeroth=float(zeroth), first=float(t1 + t2))
    zeroth = (_SQRT_PI / 2.0 ** 1.5
              * (digamma(0.5 * (1.0 - p)) - digamma(-0.5 * p)) / gamma(-p))
    t1 = ((gamma(-0.5 * (p + 1.0)) * gamma(0.5 * (1.0 - p)) - gamma(-0.5 * p) ** 2)
          / (2.0 ** (p + 2.0) * gamma(-p - 1.0) * gamma(-p)))
    t2 = (p * (gamma(-0.5 * p) * gamma(0.5 * (2.0 - p)) - gamma(-0.5 * (p - 1.0)) ** 2)
          / (2.0 ** (p + 1.0) * gamma(-p) * gamma(1.0 - p)))
    return PcfMoment(p=p, zeroth=zeroth, first=t1 + t2)


def pcf_moments_quadrature(p: float) -> PcfMoment:
    """Moments by deterministic adaptive quadrature of D_p^2 (pole-safe)."""
    if p > 150.0:
        raise ConvergenceError(f"order p = {p} too large for quadrature")
    # e^{-z^2/2} tail: beyond this cutoff the integrand is < 1e-30
    cut = 14.0 + 2.0 * math.sqrt(max(p, 0.0) + 1.0)
    z0, e0 = _quad(lambda z: pcf_d(p, z, tol=1e-10) ** 2, 0.0, cut, limit=200,
                   epsabs=0.0, epsrel=1e-10)
    f0, e1 = _quad(lambda z: z * pcf_d(p, z, tol=1e-10) ** 2, 0.0, cut,
                   limit=200, epsabs=0.0, epsrel=1e-10)
    if e0 > 1e-8 * max(abs(z0), 0.1) or e1 > 1e-8 * max(abs(f0), 0.1):
        raise ConvergenceError(f"moment quadrature inaccurate at p = {p}")
    return PcfMoment(p=p, zeroth=z0, first=f0)


def pcf_moments_auto(p: float) -> PcfMoment:
    """Closed forms when non-singular, else the quadrature fallback."""
    try:
        return pcf_moments(p)
    except PoleError:
        return pcf_moments_quadrature(p)


def solve_power_exp(d: float, a: float, c: float) -> float:
    """Branch-0 root of x^d exp(-a x) = c  (d > 0, c > 0, a >= 0).

    x = c^{1/d} exp(-W_0(-(a/d) c^{1/d})); requires (a/d) c^{1/d} <= 1/e.
    The returned root is the smaller (branch-0) one; the residual
    |x^d e^{-ax} - c| is polished to <= 1e-10 c.
    """
    if d <= 0.0 or c <= 0.0 or a < 0.0:
        raise DomainError("solve_power_exp needs d > 0, c > 0, a >= 0")
    x0 = c ** (1.0 / d)
    if a == 0.0:
        return x0
    arg = -(a / d) * x0
    if arg < -_INV_E - 1e-14:
        raise DomainError(
            f"no branch-0 solution: (a/d) c^(1/d) = {-arg} exceeds 1/e")
    x = x0 * math.exp(-lambert_w(0, max(arg, -_INV_E)))
    # Newton polish on g(x) = d ln x - a x - ln c (monotone left of d/a)
    lc = math.log(c)
    for _ in range(4):
        g = d * math.log(x) - a * x - lc
        gp = d / x - a
        if abs(gp) < 1e-300:
            break
        x -= g / gp
    if abs(x ** d * math.exp(-a * x) - c) > 1e-10 * c:
        raise ConvergenceError(f"solve_power_exp residual too large (d={d}, a={a}, c={c})")
    return x
