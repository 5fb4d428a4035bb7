"""Macro-time dynamics of capital and expected returns.

Linearizing the capital equation in macro time gives per-sector
coefficients (k, l, m, n); closing the system with a diffusion-style
expectation response and the oscillatory ansatz exp(i Omega theta + i G x)
yields the dispersion relation Omega(G). With the ansatz used here,
Im Omega > 0 means the oscillation decays back to the steady state.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np

from . import fieldcore
from .errors import SingularError
from .fieldcore import F_FLOOR, FieldSolution
from .scenario import ExpectationParams, Scenario, landscape_derivatives

#: (D - psi2)/psi2 above this marks the very-high-capital regime
RHO_LARGE = 10.0
#: K at or below this marks the low-capital regime
K_SMALL = 1.0

REGIME_LABELS = ("k_small", "k_large_stable", "k_large_unstable", "intermediate")


@dataclass(frozen=True)
class DynCoefficients:
    k: float
    l: float
    m: float
    n: float
    c1: float
    c2: float
    c3: float
    rho: float        # (D - psi2)/psi2
    f1: float         # price response value at the solution


def dyn_coefficients(scenario: Scenario, sol: FieldSolution,
                     x_index: int) -> DynCoefficients:
    """Coefficients of the linearized macro-time capital equation."""
    prm = scenario.params
    f = sol.f_x[x_index]
    f_abs = abs(f)
    if f_abs < F_FLOOR:
        raise SingularError(f"|f| below floor at sector {x_index}")
    p = sol.p_x[x_index]
    c1 = (prm.sigma_x2 * prm.sigma_khat2 * (p + 0.5) ** 2
          * sol.fprime_x[x_index] ** 2 / (96.0 * f_abs ** 3))
    c2 = math.log(p + 0.5) - 2.0 * c1 / (p + 0.5)
    c3 = 1.0 - c1 + (p + 1.5) * c2
    d_psi = sol.lagrange_d / (2.0 * prm.tau)
    psi2 = sol.psi2[x_index]
    if psi2 <= 0.0:
        raise SingularError(f"deserted sector {x_index}")
    rho = (d_psi - psi2) / psi2
    g = sol.g_x[x_index]
    gg = sol.grad_g_x[x_index]
    u = (max(sol.k_x[x_index], 1e-300) ** prm.alpha * scenario.r[x_index]
         / (sol.kalpha_mean * sol.r_mean))
    f1 = prm.b * math.atan(u - 1.0)
    k = (1.0 - prm.eta * (1.0 - prm.gamma * c3 / f_abs) * rho
         + (prm.alpha * (2.0 * g * g / prm.sigma_xhat2 + gg) * c2
            - (1.0 - prm.alpha) * c3) / f_abs)
    l = prm.varsigma * f1 * c3 / f
    m = (1.0 - prm.gamma * c3 / f) * rho - g * g * c2 / prm.sigma_xhat2
    n = gg * c2 / f_abs
    return DynCoefficients(k=k, l=l, m=m, n=n, c1=c1, c2=c2, c3=c3,
                           rho=rho, f1=f1)


def frequency_from_coeffs(k, l, m, K, R, grad_r, a0, c, g_wave) -> complex:
    """Omega(G) from the first-order truncated 2x2 system.

    The truncation keeps the time-derivative response c and the level
    response a0 of expectations; m couples through the landscape slope.
    """
    lc = l * c / R
    if grad_r != 0.0:
        mc = 2.0 * m * c / grad_r
        ma = 2.0 * m * a0 / grad_r
    else:
        # flat landscape: the m-channel only exists with a slope
        if abs(m) > 1e-12:
            raise SingularError("m != 0 needs a nonzero landscape slope")
        mc = 0.0
        ma = 0.0
    den = lc * lc + (mc * g_wave) ** 2
    if den < 1e-14:
        raise SingularError("dispersion denominator below 1e-14")
    base = k / K + a0 * l / R
    re = (lc * ma * g_wave - mc * g_wave * base) / den
    im = (lc * base + mc * ma * g_wave ** 2) / den
    return complex(re, im)


def dispersion_residual_from_coeffs(k, l, m, K, R, grad_r, a0, c, g_wave,
                                    omega) -> float:
    """|det| of the truncated system at (Omega, G); zero on the branch."""
    if grad_r != 0.0:
        mterm = 2.0 * m / grad_r * g_wave
    else:
        mterm = 0.0
    det = k / K + (l / R - 1j * mterm) * (a0 + 1j * c * omega)
    return abs(det)


def damping_from_coeffs(k, l, m, K, R, grad_r, a0, c, g_wave) -> bool:
    """Damping criterion: lc/R (k/K + a0 l/R) + 4 m^2 c a0 G^2/(grad R)^2 > 0."""
    lhs = (l * c / R) * (k / K + a0 * l / R)
    if grad_r != 0.0:
        lhs += 4.0 * m * m * c * a0 * g_wave ** 2 / grad_r ** 2
    return bool(lhs > 0.0)


def _sector_args(scenario: Scenario, sol: FieldSolution, x_index: int,
                 expectations: ExpectationParams):
    co = dyn_coefficients(scenario, sol, x_index)
    grad_r, _ = landscape_derivatives(scenario)
    return co, (co.k, co.l, co.m, sol.k_x[x_index], scenario.r[x_index],
                grad_r[x_index], expectations.a0, expectations.c_t)


def frequency(scenario: Scenario, sol: FieldSolution, x_index: int,
              g_wave: float, expectations: ExpectationParams | None = None) -> complex:
    if expectations is None:
        expectations = scenario.expectations
    _, args = _sector_args(scenario, sol, x_index, expectations)
    return frequency_from_coeffs(*args, g_wave)


def damping_condition(sol: FieldSolution, x_index: int, g_wave: float,
                      expectations: ExpectationParams | None = None) -> bool:
    scenario = sol.scenario
    if expectations is None:
        expectations = scenario.expectations
    _, args = _sector_args(scenario, sol, x_index, expectations)
    return damping_from_coeffs(*args, g_wave)


def default_g_range(n: int = 32) -> np.ndarray:
    """Log-spaced wavenumbers over [1e-3, 1e2] per unit sector length."""
    return np.logspace(-3.0, 2.0, n)


def intermediate_g2_threshold(scenario: Scenario, sol: FieldSolution,
                              x_index: int, co: DynCoefficients,
                              expectations: ExpectationParams) -> float:
    """G^2 separating damped from undamped verdicts in the intermediate regime."""
    prm = scenario.params
    grad_r, _ = landscape_derivatives(scenario)
    gr = grad_r[x_index]
    r = scenario.r[x_index]
    psi2 = sol.psi2[x_index]
    d_psi = sol.lagrange_d / (2.0 * prm.tau)
    a0 = expectations.a0
    gap = d_psi - psi2
    if a0 == 0.0 or gap == 0.0 or co.f1 == 0.0:
        return math.nan
    delta_nok = a0 / r - (1.0 - prm.alpha) / (prm.varsigma * co.f1)
    return (co.l ** 2 * gr ** 2 / (4.0 * a0 * r)
            * (prm.varsigma * gr * co.f1 * psi2 / (prm.gamma * gap)) ** 2
            * abs(delta_nok))


def regime_label(scenario: Scenario, sol: FieldSolution, x_index: int,
                 co: DynCoefficients) -> str:
    if sol.k_x[x_index] <= K_SMALL:
        return "k_small"
    if co.rho >= RHO_LARGE:
        return "k_large_unstable" if co.k > 0.0 else "k_large_stable"
    return "intermediate"


def regime_damped(scenario: Scenario, sol: FieldSolution, x_index: int,
                  co: DynCoefficients, label: str, g_wave: float,
                  expectations: ExpectationParams) -> bool:
    """The per-regime particularized stability inequality."""
    prm = scenario.params
    c = expectations.c_t
    a0 = expectations.a0
    r = scenario.r[x_index]
    if label == "k_small":
        return bool(c * co.l * co.k / (r * sol.k_x[x_index]) > 0.0)
    if label in ("k_large_stable", "k_large_unstable"):
        return bool(c > 0.0)
    delta = (a0 / r - (1.0 - prm.alpha)
             / (prm.varsigma * sol.k_x[x_index] * co.f1)
             if co.f1 != 0.0 else math.inf)
    g2 = g_wave * g_wave
    g2_th = intermediate_g2_threshold(scenario, sol, x_index, co, expectations)
    if c > 0.0:
        if delta > 0.0:
            return True
        return bool(not math.isnan(g2_th) and g2 > g2_th)
    if c < 0.0:
        return bool(delta < 0.0 and not math.isnan(g2_th) and g2 < g2_th)
    return False


@dataclass(frozen=True)
class DynamicsReport:
    g_wave: np.ndarray                 # analyzed wavenumbers
    omega: np.ndarray                  # complex, (n_sectors, n_g)
    damped: np.ndarray                 # bool, (n_sectors, n_g), criterion sign
    regime_verdict: np.ndarray         # bool, (n_sectors, n_g), per-regime rule
    regime: tuple                      # per-sector label
    coeffs: tuple                      # per-sector DynCoefficients (or None)
    g2_threshold: np.ndarray           # per-sector, nan outside intermediate


def regime_analysis(scenario: Scenario, sol: FieldSolution,
                    expectations: ExpectationParams | None = None,
                    g_range=None) -> DynamicsReport:
    if expectations is None:
        expectations = scenario.expectations
    g_range = default_g_range() if g_range is None else np.asarray(g_range, float)
    n = scenario.grid.n_sectors
    omega = np.full((n, g_range.size), np.nan, dtype=complex)
    damped = np.zeros((n, g_range.size), dtype=bool)
    verdicts = np.zeros((n, g_range.size), dtype=bool)
    labels = []
    coeff_list = []
    g2_th = np.full(n, np.nan)
    grad_r, _ = landscape_derivatives(scenario)
    for x in range(n):
        if not sol.active[x]:
            labels.append("inactive")
            coeff_list.append(None)
            continue
        co = dyn_coefficients(scenario, sol, x)
        label = regime_label(scenario, sol, x, co)
        labels.append(label)
        coeff_list.append(co)
        if label == "intermediate":
            g2_th[x] = intermediate_g2_threshold(scenario, sol, x, co,
                                                 expectations)
        args = (co.k, co.l, co.m, sol.k_x[x], scenario.r[x], grad_r[x],
                expectations.a0, expectations.c_t)
        for j, g in enumerate(g_range):
            try:
                omega[x, j] = frequency_from_coeffs(*args, g)
            except SingularError:
                omega[x, j] = complex(math.nan, math.nan)
            damped[x, j] = damping_from_coeffs(*args, g)
            verdicts[x, j] = regime_damped(scenario, sol, x, co, label, g,
                                           expectations)
    return DynamicsReport(g_wave=g_range, omega=omega, damped=damped,
                          regime_verdict=verdicts, regime=tuple(labels),
                          coeffs=tuple(coeff_list), g2_threshold=g2_th)


def report_csv_text(scenario: Scenario, report: DynamicsReport) -> str:
    buf = io.StringIO()
    buf.write("x,G,re_omega,im_omega,damped,regime\n")
    nodes = scenario.grid.nodes()
    for i in range(scenario.grid.n_sectors):
        for j, g in enumerate(report.g_wave):
            w = report.omega[i, j]
            buf.write(",".join([
                format(nodes[i], ".17g"), format(g, ".17g"),
                format(w.real, ".17g"), format(w.imag, ".17g"),
                str(int(report.damped[i, j])), report.regime[i]]) + "\n")
    return buf.getvalue()


def report_summary(scenario: Scenario, report: DynamicsReport) -> dict:
    per_sector = []
    for i in range(scenario.grid.n_sectors):
        entry = {"sector": i, "regime": report.regime[i]}
        if math.isfinite(report.g2_threshold[i]):
            entry["g2_threshold"] = report.g2_threshold[i]
        per_sector.append(entry)
    return {"g_min": float(report.g_wave.min()),
            "g_max": float(report.g_wave.max()),
            "sectors": per_sector}


def report_summary_text(scenario: Scenario, report: DynamicsReport) -> str:
    return json.dumps(report_summary(scenario, report), indent=2,
                      sort_keys=True) + "\n"
