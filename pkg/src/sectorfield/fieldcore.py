"""Collective state of the sector economy.

Solves the self-consistent capital equation

    K_x * psi2_x * |f_x| = C * sigma_khat2 * GammaHat(p_x + 1/2)

jointly with the firm-count calibration of the Lagrange multiplier D,
the attractivity bound M = max_x A_x, and the investor normalization C.
Per-sector quantities follow the parametric forms: Cobb-Douglas dividends
r = alpha * B(x) * K^(alpha-1) with productivity B(x) taken equal to the
long-run landscape R(x), an arctan-bounded price response, mobility
g = grad(R) * A_mob * K^alpha, and firm mobility weight H(K) = K^eta.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.integrate import quad as _quad

from . import specfun
from .errors import (NoSolutionError, NonConvergenceError, RegimeError,
                     SingularError)
from .scenario import Scenario, grid_gradient, grid_laplacian, landscape_derivatives

#: sectors with |f| below this floor are reported singular, not solved
F_FLOOR = 1e-9
#: working cap on the parabolic cylinder order during iteration; a sector
#: pinned at the cap at convergence is reported singular (f -> 0 limit)
P_CAP = 119.5
#: per-sweep multiplicative trust region on the capital update
TRUST_FACTOR = 10.0

_HALF_GAUSS = math.sqrt(math.pi / 2.0)


_POLE_BAND = 4e-6


def _moments_large_p(p: float) -> tuple[float, float]:
    """Calibrated large-order asymptotics (relative error < 1e-4)."""
    zeroth = (1.0 + 0.128 / p) * math.sqrt(2.0 * math.pi) \
        * math.gamma(p + 1.0) / 2.0
    first = (4.0 / math.sqrt(2.0 * math.pi) - 0.198 / p) \
        * math.gamma(p + 1.5)
    return zeroth, first


@lru_cache(maxsize=8192)
def _moments_exact(p: float) -> tuple[float, float]:
    if p > 30.0:
        return _moments_large_p(p)
    m = specfun.pcf_moments_auto(p)
    return m.zeroth, m.first


@lru_cache(maxsize=8192)
def _moments(p: float) -> tuple[float, float]:
    """Working moments of D_p^2 for the solver.

    Closed forms up to p = 30, bridging the representation poles at
    integer orders by linear interpolation across a 4e-6 band (the
    moments themselves are smooth there; interpolation error ~1e-11).
    Beyond p = 30 the calibrated large-order asymptotics apply.
    """
    if p > 30.0:
        return _moments_large_p(p)
    nearest = round(p)
    if nearest >= -1 and abs(p - nearest) < _POLE_BAND:
        lo = _moments_exact(nearest - 2.0 * _POLE_BAND)
        hi = _moments_exact(nearest + 2.0 * _POLE_BAND)
        t = (p - (nearest - 2.0 * _POLE_BAND)) / (4.0 * _POLE_BAND)
        return (lo[0] + t * (hi[0] - lo[0]), lo[1] + t * (hi[1] - lo[1]))
    m = specfun.pcf_moments_auto(p)
    return m.zeroth, m.first


def _heaviside(f: float) -> float:
    if f > 0.0:
        return 1.0
    if f < 0.0:
        return 0.0
    return 0.5


@dataclass(frozen=True)
class FieldSolution:
    """Converged collective state (immutable)."""

    scenario: Scenario
    k_x: np.ndarray           # average capital per firm and sector
    psi2: np.ndarray          # firm density per unit sector length
    nhat: np.ndarray          # investor count per sector (sums to n_investors)
    f_x: np.ndarray           # short-term return
    fprime_x: np.ndarray      # sector-gradient of f
    g_x: np.ndarray           # investor mobility
    grad_g_x: np.ndarray
    a_x: np.ndarray           # attractivity
    p_x: np.ndarray           # relative attractivity (order of D_p)
    lagrange_d: float
    big_m: float
    c_norm: float
    p_bar: float
    x0_index: int             # sector defining p_bar (weakest damping)
    kalpha_mean: float
    r_mean: float
    deserted: np.ndarray      # bool mask, psi2 clamped to zero
    singular: np.ndarray      # bool mask, |f| below F_FLOOR
    residual: float
    iterations: int
    branch_id: int = 0
    branches: tuple = field(default=(), compare=False, repr=False)

    @property
    def active(self) -> np.ndarray:
        return ~(self.deserted | self.singular)


# ---------------------------------------------------------------------------
# parametric building blocks
# ---------------------------------------------------------------------------

def dividend_productivity(scenario: Scenario) -> np.ndarray:
    """Cobb-Douglas productivity per sector; tied to the return landscape."""
    return scenario.r


def weighted_means(scenario: Scenario, k_x, psi2) -> tuple[float, float]:
    """Density-weighted averages <K^alpha>, <R> over populated sectors."""
    k_x = np.asarray(k_x, dtype=float)
    psi2 = np.asarray(psi2, dtype=float)
    w = np.where(psi2 > 0.0, psi2, 0.0)
    total = w.sum()
    if total <= 0.0:
        raise NoSolutionError("no populated sector to average over")
    ka = float(np.sum(w * np.power(np.maximum(k_x, 0.0), scenario.params.alpha)) / total)
    rm = float(np.sum(w * scenario.r) / total)
    return ka, rm


def relative_return(scenario: Scenario, k, x_index, kalpha_mean, r_mean):
    return (np.maximum(k, 0.0) ** scenario.params.alpha
            * scenario.r[x_index] / (kalpha_mean * r_mean))


def short_term_return(scenario: Scenario, k, x_index, *, kalpha_mean,
                      r_mean, psi2_x):
    """f = (1/eps) * (alpha B K^(alpha-1) - gamma psi2 + b arctan(u - 1)).

    u is the relative return K^alpha R / (<K^alpha><R>); the arctan keeps
    the price term bounded. The 1/eps prefactor is absorbed here once and
    for all.
    """
    prm = scenario.params
    b_x = dividend_productivity(scenario)[x_index]
    k = np.maximum(k, 1e-300)
    u = relative_return(scenario, k, x_index, kalpha_mean, r_mean)
    dividend = prm.alpha * b_x * k ** (prm.alpha - 1.0)
    price = prm.b * np.arctan(u - 1.0)
    return (dividend - prm.gamma * psi2_x + price) / prm.epsilon


def mobility(scenario: Scenario, k, x_index, *, kalpha_mean, r_mean,
             grad_r=None, lap_r=None):
    """(g, grad g) = (grad R, lap R) * A_mob * K^alpha.

    A_mob = (1 + b/<R>) / <K^alpha> so that mobility vanishes at extrema of
    the landscape and scales with the sector's capital.
    """
    if grad_r is None or lap_r is None:
        grad_r, lap_r = landscape_derivatives(scenario)
    prm = scenario.params
    a_mob = (1.0 + prm.b / r_mean) / kalpha_mean
    ka = np.maximum(k, 0.0) ** prm.alpha
    return grad_r[x_index] * a_mob * ka, lap_r[x_index] * a_mob * ka


def density_gap(scenario: Scenario, k_x) -> np.ndarray:
    """w(x) = 0.5 ((grad R)^2 + sigma_x2 lap R / K^eta) K^(2 eta) (1 - eta).

    This is the bracket subtracted from the Lagrange multiplier in the firm
    density; H(K) = K^eta makes H'K/H = eta exactly.
    """
    prm = scenario.params
    grad_r, lap_r = landscape_derivatives(scenario)
    k = np.maximum(np.asarray(k_x, dtype=float), 0.0)
    k_eta = k ** prm.eta
    return 0.5 * (1.0 - prm.eta) * (grad_r ** 2 * k_eta ** 2
                                    + prm.sigma_x2 * lap_r * k_eta)


def firm_density(scenario: Scenario, k_x, lagrange_d: float) -> np.ndarray:
    """psi2 = max(0, (D - w) / (2 tau)); zero-clamped sectors are deserted."""
    w = density_gap(scenario, k_x)
    return np.maximum(0.0, (lagrange_d - w) / (2.0 * scenario.params.tau))


def calibrate_lagrange(scenario: Scenario, k_x) -> tuple[float, np.ndarray]:
    """Monotone bisection for D so that spacing * sum(psi2) = n_firms.

    The firm count is nondecreasing and piecewise linear in D, so the
    bracket is certified before bisecting.
    """
    prm = scenario.params
    h = scenario.grid.spacing
    w = density_gap(scenario, k_x)
    if np.any(~np.isfinite(w)):
        raise NoSolutionError("non-finite density gap; mis-specified scenario")

    def count(d):
        return h * float(np.sum(np.maximum(0.0, d - w))) / (2.0 * prm.tau)

    lo = float(np.min(w))
    hi = float(np.max(w)) + 2.0 * prm.tau * prm.n_firms / h + 1.0
    if not count(hi) >= prm.n_firms >= count(lo):
        raise NoSolutionError("cannot bracket the firm-count calibration")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if count(mid) < prm.n_firms:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(hi)):
            break
    d = 0.5 * (lo + hi)
    if abs(count(d) - prm.n_firms) > 1e-8 * prm.n_firms:
        raise NoSolutionError("firm-count calibration did not converge")
    return d, (d - w) <= 0.0


def f_correction(scenario: Scenario, k, x_index, *, f, g, grad_g, df_dk,
                 nhat_density, psi2_x):
    """Back-reaction term F: d/dK of (g^2/(2 sigma_xhat2) + grad g / 2 + f)
    times the investor/firm density ratio (reduced form)."""
    prm = scenario.params
    k = max(float(k), 1e-300)
    if psi2_x <= 0.0:
        return 0.0
    dk_part = (prm.alpha * g * g / (k * prm.sigma_xhat2)
               + 0.5 * prm.alpha * grad_g / k + df_dk)
    return dk_part * nhat_density / psi2_x


def attractivity(scenario: Scenario, k, x_index, f, g, grad_g,
                 f_corr: float = 0.0):
    """A = g^2/sigma_xhat2 + f + |f|/2 + grad g - sigma_khat2 F^2/(2 f^2)."""
    prm = scenario.params
    a = g * g / prm.sigma_xhat2 + f + 0.5 * abs(f) + grad_g
    if prm.include_F_correction and f_corr != 0.0:
        a -= prm.sigma_khat2 * f_corr ** 2 / (2.0 * f * f)
    return a


def relative_attractivity(scenario: Scenario, sol: FieldSolution, x_index: int):
    """p = (M - A_x) / |f_x|; zero at the argmax of A."""
    f = sol.f_x[x_index]
    if abs(f) < F_FLOOR:
        raise SingularError(f"|f| below floor at sector {x_index}")
    return (sol.big_m - sol.a_x[x_index]) / abs(f)


def _damping_exponent(scenario: Scenario, p, f_abs, fprime):
    prm = scenario.params
    return (prm.sigma_x2 * prm.sigma_khat2 * (p + 0.5) ** 2 * fprime ** 2
            / (96.0 * f_abs ** 3))


def gamma_hat(scenario: Scenario, p: float, f_abs: float, fprime: float) -> float:
    """GammaHat(p + 1/2): damping factor times the first moment of D_p^2.

    The closed-form moment is used when no gamma factor is singular;
    otherwise the quadrature fallback kicks in. With fprime = 0 and p = 0
    this is exactly 1 (half-Gaussian first moment).
    """
    damping = math.exp(-_damping_exponent(scenario, p, f_abs, fprime))
    return damping * _moments(float(p))[1]


def log_gamma_hat_slope(scenario: Scenario, p: float, f_abs: float,
                        fprime: float) -> float:
    """k(p) = d ln GammaHat / dp.

    Central difference on the moment (pole-safe through the quadrature
    fallback) plus the analytic damping derivative; for very large p the
    asymptotic sqrt((p - 1/2)/2) shape is implied by the moment itself.
    """
    dp = 1e-5 * max(1.0, abs(p))
    m_hi = _moments(float(p + dp))[1]
    m_lo = _moments(float(p - dp))[1]
    slope = (math.log(m_hi) - math.log(m_lo)) / (2.0 * dp)
    prm = scenario.params
    slope -= (prm.sigma_x2 * prm.sigma_khat2 * (p + 0.5) * fprime ** 2
              / (48.0 * f_abs ** 3))
    return slope


def normalize_c(scenario: Scenario, p, f_abs, fprime, active) -> float:
    """C from spacing * sum_x C * damping * zeroth(p) * sqrt(s2/|f|) = n_inv."""
    h = scenario.grid.spacing
    prm = scenario.params
    total = 0.0
    for x in np.flatnonzero(active):
        damping = math.exp(-_damping_exponent(scenario, p[x], f_abs[x], fprime[x]))
        zeroth = _moments(float(p[x]))[0]
        total += damping * zeroth * math.sqrt(prm.sigma_khat2 / f_abs[x])
    total *= h
    if not total > 0.0 or not math.isfinite(total):
        raise NoSolutionError("investor normalization integral vanished")
    return prm.n_investors / total


def investor_counts(scenario: Scenario, c_norm, p, f_abs, fprime, active):
    h = scenario.grid.spacing
    prm = scenario.params
    nhat = np.zeros_like(np.asarray(p, dtype=float))
    for x in np.flatnonzero(active):
        damping = math.exp(-_damping_exponent(scenario, p[x], f_abs[x], fprime[x]))
        zeroth = _moments(float(p[x]))[0]
        nhat[x] = c_norm * damping * zeroth * math.sqrt(prm.sigma_khat2 / f_abs[x]) * h
    return nhat


def closed_form_c(scenario: Scenario, sol: FieldSolution) -> float:
    """Diagnostic closed form for C (reduced-volume factor taken as V).

    Cross-check only; the numeric normalization above is authoritative.
    """
    prm = scenario.params
    p_bar = sol.p_bar
    x0 = sol.x0_index
    f0 = abs(sol.f_x[x0])
    f_avg = float(np.mean(np.abs(sol.f_x[sol.active])))
    damp = math.exp(-prm.sigma_x2 * prm.sigma_khat2
                    * ((p_bar + 0.5) * sol.fprime_x[x0] / sol.f_x[x0]) ** 2
                    / (96.0 * f0))
    num = damp * prm.n_investors * specfun.gamma(-p_bar)
    den = (math.sqrt(prm.sigma_khat2 / f_avg) * scenario.grid.volume
           * (specfun.digamma(-(p_bar - 1.0) / 2.0) - specfun.digamma(-p_bar / 2.0)))
    return num / den


def investor_density(sol: FieldSolution, khat: float, x_index: int) -> float:
    """Density of investors holding capital khat at the given sector."""
    scenario = sol.scenario
    prm = scenario.params
    f = sol.f_x[x_index]
    f_abs = abs(f)
    if f_abs < F_FLOOR or not sol.active[x_index]:
        return 0.0
    shift = 0.0
    if prm.include_F_correction:
        shift = prm.sigma_khat2 * _solution_f_corr(sol, x_index) / (f * f)
    damping = math.exp(-prm.sigma_x2 * khat ** 4 * sol.fprime_x[x_index] ** 2
                       / (96.0 * prm.sigma_khat2 * f_abs))
    z = math.sqrt(f_abs / prm.sigma_khat2) * (khat + shift)
    return sol.c_norm * damping * specfun.pcf_d(sol.p_x[x_index], z) ** 2


def _solution_f_corr(sol: FieldSolution, x_index: int) -> float:
    scenario = sol.scenario
    dfk = df_dk(scenario, sol.k_x[x_index], x_index,
                kalpha_mean=sol.kalpha_mean, r_mean=sol.r_mean)
    h = scenario.grid.spacing
    return f_correction(
        scenario, sol.k_x[x_index], x_index, f=sol.f_x[x_index],
        g=sol.g_x[x_index], grad_g=sol.grad_g_x[x_index], df_dk=dfk,
        nhat_density=sol.nhat[x_index] / h, psi2_x=sol.psi2[x_index])


def invested_capital(sol: FieldSolution, x_index: int) -> float:
    """int khat * density(khat, x) dkhat by adaptive quadrature."""
    prm = sol.scenario.params
    f_abs = abs(sol.f_x[x_index])
    if f_abs < F_FLOOR or not sol.active[x_index]:
        return 0.0
    scale = math.sqrt(prm.sigma_khat2 / f_abs)
    cut = scale * (14.0 + 2.0 * math.sqrt(max(sol.p_x[x_index], 0.0) + 1.0))
    val, _ = _quad(lambda u: u * investor_density(sol, u, x_index), 0.0, cut,
                   limit=300)
    return val


# derivatives with respect to the sector's own capital -----------------------

def df_dk(scenario: Scenario, k, x_index, *, kalpha_mean, r_mean):
    """Analytic d f / d K, including the firm-density chain through psi2."""
    prm = scenario.params
    b_x = dividend_productivity(scenario)[x_index]
    k = max(float(k), 1e-300)
    u = relative_return(scenario, k, x_index, kalpha_mean, r_mean)
    ddiv = prm.alpha * (prm.alpha - 1.0) * b_x * k ** (prm.alpha - 2.0)
    dprice = prm.b * (prm.alpha * u / k) / (1.0 + (u - 1.0) ** 2)
    return (ddiv - prm.gamma * dpsi2_dk(scenario, k, x_index) + dprice) / prm.epsilon


def dpsi2_dk(scenario: Scenario, k, x_index):
    prm = scenario.params
    grad_r, lap_r = landscape_derivatives(scenario)
    k = max(float(k), 1e-300)
    k_eta = k ** prm.eta
    dw = 0.5 * (1.0 - prm.eta) * (2.0 * prm.eta * grad_r[x_index] ** 2 * k_eta ** 2 / k
                                  + prm.eta * prm.sigma_x2 * lap_r[x_index] * k_eta / k)
    return -dw / (2.0 * prm.tau)


@dataclass(frozen=True)
class CapitalDerivatives:
    """d/dK of the pieces of the capital equation at one sector."""

    df: float          # d f / d K
    dpsi2: float       # d psi2 / d K
    dgg: float         # d (g^2/sigma_xhat2 + grad g) / d K
    dp: float          # d p / d K
    kp: float          # k(p) = d ln GammaHat / dp
    c1: float          # damping exponent C1(p, x)


def capital_derivatives(scenario: Scenario, sol: FieldSolution,
                        x_index: int) -> CapitalDerivatives:
    prm = scenario.params
    k = sol.k_x[x_index]
    f = sol.f_x[x_index]
    f_abs = abs(f)
    if f_abs < F_FLOOR:
        raise SingularError(f"|f| below floor at sector {x_index}")
    dfk = df_dk(scenario, k, x_index, kalpha_mean=sol.kalpha_mean,
                r_mean=sol.r_mean)
    dps = dpsi2_dk(scenario, k, x_index)
    g = sol.g_x[x_index]
    gg = sol.grad_g_x[x_index]
    kk = max(float(k), 1e-300)
    dgg = 2.0 * g * (prm.alpha * g / kk) / prm.sigma_xhat2 + prm.alpha * gg / kk
    p = sol.p_x[x_index]
    # p = (M - A)/|f| with M held fixed under a single-sector variation
    da = dgg + dfk * (1.0 + 0.5 * math.copysign(1.0, f))
    dp = -da / f_abs - p * math.copysign(1.0, f) * dfk / f_abs
    kp = log_gamma_hat_slope(scenario, p, f_abs, sol.fprime_x[x_index])
    c1 = _damping_exponent(scenario, p, f_abs, sol.fprime_x[x_index])
    return CapitalDerivatives(df=dfk, dpsi2=dps, dgg=dgg, dp=dp, kp=kp, c1=c1)


def capital_map_multiplier(scenario: Scenario, sol: FieldSolution,
                           x_index: int) -> float:
    """K * d/dK of ln(RHS/(psi2 |f|)) -- the fixed-point map multiplier.

    The stability denominator is 1 minus this quantity.
    """
    d = capital_derivatives(scenario, sol, x_index)
    f = sol.f_x[x_index]
    f_abs = abs(f)
    psi2 = sol.psi2[x_index]
    if psi2 <= 0.0:
        raise SingularError(f"deserted sector {x_index}")
    dabs = math.copysign(1.0, f) * d.df
    slope = (d.kp * d.dp + (3.0 * d.c1 - 1.0) * dabs / f_abs - d.dpsi2 / psi2)
    return float(sol.k_x[x_index] * slope)


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

def _sweep_fields(scenario, k, psi2, f_offset=None):
    """Per-sector f, f', g, grad g and the weighted means for one iterate."""
    grad_r, lap_r = landscape_derivatives(scenario)
    idx = np.arange(scenario.grid.n_sectors)
    ka_mean, r_mean = weighted_means(scenario, k, psi2)
    f = np.asarray(short_term_return(scenario, k, idx, kalpha_mean=ka_mean,
                                     r_mean=r_mean, psi2_x=psi2), dtype=float)
    if f_offset is not None:
        f = f + f_offset
    fprime = grid_gradient(scenario.grid, f)
    g, gg = mobility(scenario, k, idx, kalpha_mean=ka_mean, r_mean=r_mean,
                     grad_r=grad_r, lap_r=lap_r)
    return f, fprime, np.asarray(g), np.asarray(gg), ka_mean, r_mean


def _assemble(scenario, k, psi2, nhat, f, fprime, g, gg, a, p, d_lag, big_m,
              c_norm, p_bar, x0, ka_mean, r_mean, deserted, singular,
              residual, iterations, branch_id=0):
    return FieldSolution(
        scenario=scenario, k_x=k.copy(), psi2=psi2.copy(), nhat=nhat.copy(),
        f_x=f.copy(), fprime_x=fprime.copy(), g_x=g.copy(), grad_g_x=gg.copy(),
        a_x=a.copy(), p_x=p.copy(), lagrange_d=d_lag, big_m=big_m,
        c_norm=c_norm, p_bar=p_bar, x0_index=x0, kalpha_mean=ka_mean,
        r_mean=r_mean, deserted=deserted.copy(), singular=singular.copy(),
        residual=residual, iterations=iterations, branch_id=branch_id)


#: working clamp below which ln(p + 1/2) and the moments degenerate
P_MIN = -0.45


def _density_gap_scalar(scenario, x, kappa):
    prm = scenario.params
    grad_r, lap_r = landscape_derivatives(scenario)
    k_eta = max(kappa, 0.0) ** prm.eta
    return 0.5 * (1.0 - prm.eta) * (grad_r[x] ** 2 * k_eta ** 2
                                    + prm.sigma_x2 * lap_r[x] * k_eta)


def _local_phi(scenario, x, kappa, *, big_m, d_lag, c_norm, ka_mean, r_mean,
               fprime_x, f_off, a_off):
    """log LHS - log RHS of the capital equation at one sector.

    All global couplings (M, D, C, averages, the sector-gradient of f)
    are frozen; only the sector's own capital varies.
    """
    prm = scenario.params
    w = _density_gap_scalar(scenario, x, kappa)
    psi2 = (d_lag - w) / (2.0 * prm.tau)
    if psi2 <= 0.0:
        return -math.inf, psi2, 0.0, 0.0
    f = float(short_term_return(scenario, kappa, x, kalpha_mean=ka_mean,
                                r_mean=r_mean, psi2_x=psi2)) + f_off
    f_abs = max(abs(f), F_FLOOR)
    grad_r, lap_r = landscape_derivatives(scenario)
    a_mob = (1.0 + prm.b / r_mean) / ka_mean
    ka = max(kappa, 0.0) ** prm.alpha
    g = grad_r[x] * a_mob * ka
    gg = lap_r[x] * a_mob * ka
    a = attractivity(scenario, kappa, x, f, g, gg) + a_off
    p = min(max((big_m - a) / f_abs, P_MIN), P_CAP)
    log_gh = (math.log(_moments(float(p))[1])
              - _damping_exponent(scenario, p, f_abs, fprime_x))
    phi = (math.log(kappa * psi2 * f_abs)
           - math.log(c_norm * prm.sigma_khat2) - log_gh)
    return phi, psi2, f, p


def _refine_root(scenario, x, left, right, f_left, frozen, iters=52):
    for _ in range(iters):
        mid = 0.5 * (left + right)
        fm = _local_phi(scenario, x, math.exp(mid), **frozen)[0]
        if f_left * fm <= 0.0:
            right = mid
        else:
            left = mid
            f_left = fm
        if right - left < 1e-14:
            break
    return 0.5 * (left + right)


def _scan_root(scenario, x, k_guess, frozen):
    lo, hi = math.log(k_guess) - 7.0, math.log(k_guess) + 7.0
    grid = np.linspace(lo, hi, 43)
    vals = [_local_phi(scenario, x, math.exp(lk), **frozen)[0] for lk in grid]
    roots = []
    for i in range(len(grid) - 1):
        a, b = vals[i], vals[i + 1]
        if not (math.isfinite(a) and math.isfinite(b)):
            continue
        if a == 0.0:
            roots.append(grid[i])
        elif a * b < 0.0:
            roots.append(_refine_root(scenario, x, grid[i], grid[i + 1], a,
                                      frozen))
    if not roots:
        return None
    lk = math.log(k_guess)
    return math.exp(min(roots, key=lambda r: abs(r - lk)))


def _local_capital_root(scenario, x, k_guess, **frozen):
    """Per-sector root of the capital equation at frozen globals.

    phi falls to -inf at both ends (marginal dividends at K -> 0, firm
    desertion at large K), so there are zero, one, or two roots; the root
    nearest the current iterate keeps the branch identity of the seed.
    A secant walk from the current iterate handles the common case; the
    full log-grid scan is the fallback.
    """
    lk = math.log(k_guess)
    step = 0.25
    f0 = _local_phi(scenario, x, math.exp(lk), **frozen)[0]
    f1 = _local_phi(scenario, x, math.exp(lk + step), **frozen)[0]
    if math.isfinite(f0) and math.isfinite(f1):
        if f0 * f1 <= 0.0:
            return math.exp(_refine_root(scenario, x, lk, lk + step, f0, frozen))
        a, fa, b, fb = lk, f0, lk + step, f1
        for _ in range(24):
            if fb == fa:
                break
            c = b - fb * (b - a) / (fb - fa)
            if abs(c - lk) > 6.5:
                break
            fc = _local_phi(scenario, x, math.exp(c), **frozen)[0]
            if not math.isfinite(fc):
                break
            if fc * fb <= 0.0:
                return math.exp(_refine_root(scenario, x, min(b, c), max(b, c),
                                             fb if b < c else fc, frozen))
            a, fa, b, fb = b, fb, c, fc
            if abs(fc) < 1e-13:
                return math.exp(c)
    return _scan_root(scenario, x, k_guess, frozen)


def _iterate(scenario: Scenario, k0, *, damping, max_iter, tol_k,
             tol_residual, branch_id=0, f_offset=None,
             attractivity_offset=None):
    prm = scenario.params
    n = scenario.grid.n_sectors
    k = np.maximum(np.asarray(k0, dtype=float).copy(), 1e-12)
    d_lag, deserted = calibrate_lagrange(scenario, k)
    psi2 = firm_density(scenario, k, d_lag)
    singular = np.zeros(n, dtype=bool)
    residual = math.inf
    last_mask = deserted.copy()
    f_off_arr = np.zeros(n) if f_offset is None else np.asarray(f_offset, float)
    a_off_arr = (np.zeros(n) if attractivity_offset is None
                 else np.asarray(attractivity_offset, float))

    for iteration in range(1, max_iter + 1):
        f, fprime, g, gg, ka_mean, r_mean = _sweep_fields(scenario, k, psi2,
                                                          f_offset)
        singular = np.abs(f) < F_FLOOR
        f_abs = np.maximum(np.abs(f), F_FLOOR)

        fc = np.zeros(n)
        if prm.include_F_correction:
            h = scenario.grid.spacing
            for x in range(n):
                if psi2[x] > 0.0 and abs(f[x]) >= F_FLOOR:
                    dfk = df_dk(scenario, k[x], x, kalpha_mean=ka_mean,
                                r_mean=r_mean)
                    # density ratio from the previous iterate's counts
                    nd = getattr(_iterate, "_nhat_cache", np.zeros(n))[x] / h
                    fc[x] = f_correction(scenario, k[x], x, f=f[x], g=g[x],
                                         grad_g=gg[x], df_dk=dfk,
                                         nhat_density=nd, psi2_x=psi2[x])
        a = np.array([attractivity(scenario, k[x], x, f[x], g[x], gg[x], fc[x])
                      for x in range(n)])
        if attractivity_offset is not None:
            a = a + attractivity_offset

        d_lag, deserted = calibrate_lagrange(scenario, k)
        psi2 = firm_density(scenario, k, d_lag)
        active = ~(deserted | singular)
        if not np.any(active):
            raise NonConvergenceError("all sectors deserted or singular",
                                      residual=residual)
        big_m = float(np.max(a[active]))
        p = np.zeros(n)
        p[active] = np.minimum((big_m - a[active]) / f_abs[active], P_CAP)
        singular |= active & (p >= P_CAP)
        active = ~(deserted | singular)
        if not np.any(active):
            raise NonConvergenceError("all sectors deserted or singular",
                                      residual=residual)

        expo = _damping_exponent(scenario, p, f_abs, fprime)
        x0 = int(np.flatnonzero(active)[np.argmin(expo[active])])
        p_bar = float(p[x0])

        c_norm = normalize_c(scenario, p, f_abs, fprime, active)
        nhat = investor_counts(scenario, c_norm, p, f_abs, fprime, active)
        _iterate._nhat_cache = nhat

        # residual of the capital equation at the current iterate
        gh = np.zeros(n)
        for x in np.flatnonzero(active):
            gh[x] = gamma_hat(scenario, p[x], f_abs[x], fprime[x])
        rhs = c_norm * prm.sigma_khat2 * gh[active]
        lhs = k[active] * psi2[active] * f_abs[active]
        residual = float(np.max(np.abs(lhs - rhs) / rhs))

        # per-sector root of the capital equation at frozen globals
        target = np.zeros(n)
        for x in np.flatnonzero(active):
            frozen = dict(big_m=big_m, d_lag=d_lag, c_norm=c_norm,
                          ka_mean=ka_mean, r_mean=r_mean,
                          fprime_x=fprime[x], f_off=f_off_arr[x],
                          a_off=a_off_arr[x])
            root = _local_capital_root(scenario, x, k[x], **frozen)
            if root is None:
                raw = (c_norm * prm.sigma_khat2 * gh[x]
                       / (psi2[x] * f_abs[x]))
                root = min(max(raw, k[x] / TRUST_FACTOR), k[x] * TRUST_FACTOR)
            target[x] = root

        delta = float(np.max(np.abs(target[active] - k[active])
                             / np.maximum(k[active], 1e-30)))
        mask_stable = bool(np.array_equal(deserted, last_mask))
        last_mask = deserted.copy()

        k_new = k + damping * (target - k)
        k_new[deserted] = (1.0 - damping) * k[deserted]
        if delta < tol_k and residual < tol_residual and mask_stable:
            return _assemble(scenario, k, psi2, nhat, f, fprime, g, gg, a, p,
                             d_lag, big_m, c_norm, p_bar, x0, ka_mean, r_mean,
                             deserted, singular, residual, iteration,
                             branch_id)
        k = np.maximum(k_new, 0.0)

    raise NonConvergenceError(
        f"no fixed point after {max_iter} sweeps (residual {residual:.3e})",
        residual=residual)


def solve_collective_state(scenario: Scenario, *, damping: float = 0.5,
                           max_iter: int = 800, tol_k: float = 1e-10,
                           tol_residual: float = 1e-8,
                           multi_start: bool = True,
                           seeds=None, f_offset=None,
                           attractivity_offset=None) -> FieldSolution:
    """Damped fixed-point solution of the capital equation.

    Seeds are the uniform state plus the closed-form case approximations;
    converged branches are de-duplicated by relative distance 1e-4. The
    first converged branch (in seed order) is returned, with the others
    attached as .branches. The optional per-sector offsets shift f or the
    attractivity and exist for sensitivity cross-checks.
    """
    n = scenario.grid.n_sectors
    seed_list: list[tuple[str, np.ndarray]] = []
    if seeds is not None:
        for i, s in enumerate(np.atleast_2d(np.asarray(seeds, dtype=float))):
            seed_list.append((f"user{i}", s))
    else:
        seed_list.append(("uniform", np.ones(n)))
        if multi_start:
            try:
                ctx = case_context(scenario)
                for case in ("case1", "case3", "case4", "case2_grad"):
                    try:
                        seed_list.append((case, closed_form_case(scenario, case,
                                                                 context=ctx)))
                    except (RegimeError, NoSolutionError, SingularError,
                            ValueError, OverflowError):
                        continue
            except (NonConvergenceError, NoSolutionError):
                pass

    branches: list[FieldSolution] = []
    failures: list[NonConvergenceError] = []
    for branch_id, (_, seed) in enumerate(seed_list):
        try:
            sol = _iterate(scenario, seed, damping=damping, max_iter=max_iter,
                           tol_k=tol_k, tol_residual=tol_residual,
                           branch_id=branch_id, f_offset=f_offset,
                           attractivity_offset=attractivity_offset)
        except NonConvergenceError as exc:
            failures.append(exc)
            continue
        duplicate = False
        for known in branches:
            scale = max(float(np.max(known.k_x)), 1e-30)
            if float(np.max(np.abs(known.k_x - sol.k_x))) / scale < 1e-4:
                duplicate = True
                break
        if not duplicate:
            branches.append(sol)
    if not branches:
        best = min((f.residual for f in failures), default=math.inf)
        raise NonConvergenceError(
            f"no seed converged (best residual {best:.3e})", residual=best)
    primary = branches[0]
    return replace(primary, branches=tuple(branches))


# ---------------------------------------------------------------------------
# closed-form case approximations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseContext:
    """Global quantities feeding the closed-form case formulas."""

    c_norm: float
    d_psi: float          # Lagrange multiplier divided by 2 tau (flat density)
    big_m: float
    p_bar: float
    kalpha_mean: float
    r_mean: float
    f_x: np.ndarray
    fprime_x: np.ndarray
    psi2: np.ndarray

    @classmethod
    def from_solution(cls, scenario, sol: FieldSolution) -> "CaseContext":
        return cls(c_norm=sol.c_norm,
                   d_psi=sol.lagrange_d / (2.0 * scenario.params.tau),
                   big_m=sol.big_m, p_bar=sol.p_bar,
                   kalpha_mean=sol.kalpha_mean, r_mean=sol.r_mean,
                   f_x=sol.f_x, fprime_x=sol.fprime_x, psi2=sol.psi2)


def case_context(scenario: Scenario, presweeps: int = 12) -> CaseContext:
    """Bootstrap context from a few damped sweeps off the uniform seed."""
    try:
        sol = _iterate(scenario, np.ones(scenario.grid.n_sectors),
                       damping=0.5, max_iter=presweeps, tol_k=math.inf,
                       tol_residual=math.inf)
    except NonConvergenceError as exc:
        raise NonConvergenceError("context bootstrap failed") from exc
    return CaseContext.from_solution(scenario, sol)


def _case_b1(scenario):
    return scenario.params.alpha * dividend_productivity(scenario) / scenario.params.epsilon


def closed_form_case(scenario: Scenario, case: str,
                     context: CaseContext | None = None) -> np.ndarray:
    """Per-sector closed-form approximation of the capital equation.

    case1      high capital, firm density ~ flat, price term saturated
    case2_grad very high capital on landscape slopes
    case2_max  very high capital at a landscape maximum (unstable)
    case3      low capital, dividend-dominated returns
    case4      intermediate capital via the Lambert-W reduction
    """
    if context is None:
        context = case_context(scenario)
    prm = scenario.params
    grad_r, lap_r = landscape_derivatives(scenario)
    r = scenario.r
    n = scenario.grid.n_sectors
    c_norm = context.c_norm
    d_psi = context.d_psi
    s2 = prm.sigma_khat2

    if case == "case1":
        # f saturates at f_inf = (b pi/2 - gamma D)/eps; dividends vanish
        f_inf = (prm.b * math.pi / 2.0 - prm.gamma * d_psi) / prm.epsilon
        if f_inf <= 0.0:
            raise RegimeError("case1 needs b*pi/2 > gamma*D")
        d_coef = prm.b * context.kalpha_mean * context.r_mean / prm.epsilon
        p1 = context.big_m / f_inf - 1.5
        if p1 < 0.0:
            raise RegimeError("case1 regime puts p below zero")
        gh1 = _moments(float(p1))[1]
        k1 = log_gamma_hat_slope(scenario, p1, f_inf, 0.0)
        ka = (c_norm * s2 * gh1 / (d_psi * f_inf)
              + d_coef / (f_inf * r)
              + k1 * (context.big_m * d_coef / (f_inf ** 2 * r) + lap_r / r))
        if np.any(ka <= 0.0):
            raise RegimeError("case1 produced non-positive capital")
        return ka ** (1.0 / prm.alpha)

    if case == "case2_grad":
        f_inf = prm.b * math.pi / (2.0 * prm.epsilon)
        ell = 0.5 * (1.0 - prm.eta) * grad_r ** 2 / (2.0 * prm.tau)
        if np.any(ell <= 0.0):
            raise RegimeError("case2_grad needs a nonzero landscape gradient")
        k_lead = (d_psi / ell) ** (1.0 / (2.0 * prm.eta))
        p2 = max(context.big_m / f_inf - 1.5, 0.0)
        gh2 = _moments(float(p2))[1]
        ka2 = (d_psi - c_norm * s2 * gh2 / (k_lead * f_inf)) / ell
        if np.any(ka2 <= 0.0):
            raise RegimeError("case2_grad correction overshoots")
        return ka2 ** (1.0 / (2.0 * prm.eta))

    if case == "case2_max":
        at_max = (np.abs(grad_r) < 1e-8) & (lap_r < 0.0)
        if not np.any(at_max):
            raise RegimeError("case2_max needs a landscape maximum")
        f_inf = prm.b * math.pi / (2.0 * prm.epsilon)
        p2 = max(context.big_m / f_inf - 1.5, 0.0)
        gh2 = _moments(float(p2))[1]
        coef = 0.5 * (1.0 - prm.eta) * prm.sigma_x2 * np.abs(lap_r) / (2.0 * prm.tau)
        out = np.full(n, np.nan)
        out[at_max] = (c_norm * s2 * gh2
                       / (coef[at_max] * f_inf)) ** (1.0 / (1.0 + prm.eta))
        return out

    if case == "case3":
        b1 = _case_b1(scenario)
        k0 = (c_norm * s2 / (d_psi * b1)) ** (1.0 / prm.alpha)
        f0 = b1 * k0 ** (prm.alpha - 1.0)
        if np.any(f0 <= 0.0):
            raise RegimeError("case3 needs positive dividend returns")
        ka_mean = float(np.mean(k0 ** prm.alpha))
        r_mean = float(np.mean(r))
        idx = np.arange(n)
        g0, gg0 = mobility(scenario, k0, idx, kalpha_mean=ka_mean,
                           r_mean=r_mean, grad_r=grad_r, lap_r=lap_r)
        a0 = g0 * g0 / prm.sigma_xhat2 + 1.5 * f0 + gg0
        m0 = float(np.max(a0))
        p3 = (m0 - a0) / f0
        gh = np.array([_moments(float(pv))[1] for pv in p3])
        return (c_norm * s2 * gh / (d_psi * b1)) ** (1.0 / prm.alpha)

    if case == "case4":
        b2 = (prm.b * r / (context.kalpha_mean * context.r_mean)
              + prm.gamma) / prm.epsilon
        b2p = grid_gradient(scenario.grid, b2)
        if np.any(np.abs(b2p) < 1e-12):
            raise RegimeError("case4 needs a varying price landscape (B2' != 0)")
        log_term = math.log(context.p_bar + 0.5) - 1.0
        if log_term <= 0.0:
            raise RegimeError("case4 needs ln(p_bar + 1/2) > 1")
        # constant absorbed into C: calibrate the asymptotic moment at p_bar
        asym = (math.sqrt(context.p_bar + 0.5)
                * math.exp((context.p_bar + 0.5) * log_term))
        c_eff = c_norm * _moments(float(context.p_bar))[1] / asym
        d_exp = (2.0 + prm.alpha) / (2.0 * prm.alpha)
        out = np.empty(n)
        for x in range(n):
            a_coef = (24.0 * abs(b2[x]) ** 3 * log_term ** 2
                      / (prm.sigma_x2 * s2 * b2p[x] ** 2))
            c_rhs = (8.0 * c_eff / d_psi
                     * math.sqrt(3.0 * s2 * abs(b2[x]) * log_term
                                 / (prm.sigma_x2 * b2p[x] ** 2)))
            try:
                out[x] = specfun.solve_power_exp(d_exp, a_coef, c_rhs)
            except specfun.DomainError as exc:
                raise RegimeError(f"case4 outside the branch-0 domain: {exc}")
        return out ** (1.0 / prm.alpha)

    raise ValueError(f"unknown case {case!r}")


def case4_residual(scenario: Scenario, k_x, context: CaseContext) -> np.ndarray:
    """Residual of the Lambert-W reduction K^(1+a/2) e^{-a K^alpha} = c."""
    prm = scenario.params
    r = scenario.r
    b2 = (prm.b * r / (context.kalpha_mean * context.r_mean)
          + prm.gamma) / prm.epsilon
    b2p = grid_gradient(scenario.grid, b2)
    log_term = math.log(context.p_bar + 0.5) - 1.0
    asym = (math.sqrt(context.p_bar + 0.5)
            * math.exp((context.p_bar + 0.5) * log_term))
    c_eff = context.c_norm * _moments(float(context.p_bar))[1] / asym
    a_coef = (24.0 * np.abs(b2) ** 3 * log_term ** 2
              / (prm.sigma_x2 * prm.sigma_khat2 * b2p ** 2))
    c_rhs = (8.0 * c_eff / context.d_psi
             * np.sqrt(3.0 * prm.sigma_khat2 * np.abs(b2) * log_term
                       / (prm.sigma_x2 * b2p ** 2)))
    k = np.asarray(k_x, dtype=float)
    lhs = k ** (1.0 + 0.5 * prm.alpha) * np.exp(-a_coef * k ** prm.alpha)
    return np.abs(lhs - c_rhs) / c_rhs


#: 2 - ln 2 - EulerGamma, the curvature constant of the peak expansion
PEAK_EXPANSION_B = 2.0 - math.log(2.0) - float(np.euler_gamma)


def expansion_at_peak(scenario: Scenario, sol: FieldSolution):
    """First/second-order prediction of K_x - K_peak near the argmax of A.

    The first-order bracket carries the damping-gradient term and the
    log-slopes of f and psi2 (the relative-attractivity slope vanishes at
    the peak by construction). The quadratic term combines the curvature
    of p, weighted by the constant 2 - ln 2 - EulerGamma (the p-slope of
    ln GammaHat at p = 0), with the log-curvatures of f and psi2 so that
    the prediction is the exact second-order Taylor of the solution branch.
    Returns (delta_predicted, delta_actual, x_peak).
    """
    active = sol.active
    x_m = int(np.flatnonzero(active)[np.argmax(sol.a_x[active])])
    grid = scenario.grid
    n = grid.n_sectors
    x = grid.nodes()
    h = grid.spacing
    dx = x - x[x_m]
    if grid.boundary == "periodic":
        length = grid.volume
        dx = (dx + 0.5 * length) % length - 0.5 * length

    # log-mismatch of the capital equation at displaced sectors with the
    # peak's capital and the solution's global couplings held frozen
    k_m = sol.k_x[x_m]

    def phi_at(idx):
        idx = idx % n if grid.boundary == "periodic" else min(max(idx, 0), n - 1)
        frozen = dict(big_m=sol.big_m, d_lag=sol.lagrange_d,
                      c_norm=sol.c_norm, ka_mean=sol.kalpha_mean,
                      r_mean=sol.r_mean, fprime_x=sol.fprime_x[idx],
                      f_off=0.0, a_off=0.0)
        return _local_phi(scenario, idx, k_m, **frozen)[0]

    phi_m = phi_at(x_m)
    phi_plus = phi_at(x_m + 1)
    phi_minus = phi_at(x_m - 1)
    slope = (phi_plus - phi_minus) / (2.0 * h)
    curvature = (phi_plus - 2.0 * phi_m + phi_minus) / (h * h)

    denom = 1.0 - capital_map_multiplier(scenario, sol, x_m)
    delta = -k_m * (slope * dx + 0.5 * curvature * dx * dx) / denom
    actual = sol.k_x - sol.k_x[x_m]
    return delta, actual, x_m


# ---------------------------------------------------------------------------
# conservation check and export
# ---------------------------------------------------------------------------

def capital_conservation(sol: FieldSolution) -> tuple[float, float]:
    """Both sides of the invested-vs-physical capital identity."""
    h = sol.scenario.grid.spacing
    lhs = h * float(np.sum(sol.k_x * sol.psi2))
    rhs = h * sum(invested_capital(sol, x)
                  for x in np.flatnonzero(sol.active))
    return lhs, rhs


def solution_csv_text(sol: FieldSolution) -> str:
    buf = io.StringIO()
    buf.write("x,k_x,psi2,nhat,f,g,grad_g,p,deserted\n")
    x = sol.scenario.grid.nodes()
    for i in range(sol.scenario.grid.n_sectors):
        row = [x[i], sol.k_x[i], sol.psi2[i], sol.nhat[i], sol.f_x[i],
               sol.g_x[i], sol.grad_g_x[i], sol.p_x[i]]
        buf.write(",".join(format(v, ".17g") for v in row))
        buf.write(f",{int(sol.deserted[i])}\n")
    return buf.getvalue()


def solution_sidecar(sol: FieldSolution) -> dict:
    return {
        "lagrange_d": sol.lagrange_d,
        "big_m": sol.big_m,
        "c_norm": sol.c_norm,
        "residual": sol.residual,
        "iterations": sol.iterations,
        "branch_id": sol.branch_id,
        "n_branches": max(len(sol.branches), 1),
        "p_bar": sol.p_bar,
    }


def write_solution(sol: FieldSolution, directory) -> None:
    import pathlib

    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "solution.csv").write_text(solution_csv_text(sol))
    (directory / "solution.json").write_text(
        json.dumps(solution_sidecar(sol), indent=2, sort_keys=True) + "\n")
