"""Local stability of each sector's capital equilibrium.

The capital equation is the fixed point of the explicit map

    dK(t+1) = B_x * dK(t) + (source) * dY(t)

whose multiplier B_x is the capital derivative of the log of the
right-hand side over the left-hand side. The stability denominator is
D_x = 1 - B_x: positive D means the sector's average is an equilibrium,
negative D a threshold. Sensitivities dK/dY follow by implicit
differentiation with the same denominator.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from . import fieldcore
from .errors import DomainError, SingularError
from .fieldcore import FieldSolution, capital_derivatives, capital_map_multiplier
from .scenario import Scenario

PATTERN_LABELS = ("pattern1", "pattern2", "pattern3_stable",
                  "pattern3_unstable", "deserted")

#: quantile thresholds and term-dominance ratio of the pattern taxonomy
LOW_QUANTILE = 0.2
HIGH_QUANTILE = 0.8
DOMINANCE_RATIO = 2.0


def map_multiplier(scenario: Scenario, sol: FieldSolution, x_index: int) -> float:
    """B_x, the one-step multiplier of the explicit capital map."""
    return capital_map_multiplier(scenario, sol, x_index)


def local_denominator(scenario: Scenario, sol: FieldSolution,
                      x_index: int) -> float:
    """Stability denominator D_x = 1 - B_x; positive means stable."""
    if not sol.active[x_index]:
        raise SingularError(f"sector {x_index} is deserted or singular")
    return 1.0 - map_multiplier(scenario, sol, x_index)


@dataclass(frozen=True)
class MapCheck:
    converges: bool
    ratio: float          # |deviation after 200 steps| / |initial deviation|
    deep: bool            # ratio below 1e-3 (fast contraction)
    multiplier: float


def iterate_map_check(scenario: Scenario, sol: FieldSolution, x_index: int,
                      perturbation: float, steps: int = 200) -> MapCheck:
    """Iterate the explicit capital map from a small perturbation.

    Converges when the deviation shrinks over the run; the `deep` flag
    marks decay below 1e-3 of the initial deviation.
    """
    k = sol.k_x[x_index]
    if abs(perturbation) > 0.01 * k:
        raise DomainError("perturbation must stay within 1% of K_x")
    b = map_multiplier(scenario, sol, x_index)
    dev = perturbation
    for _ in range(steps):
        dev = b * dev
        if not math.isfinite(dev):
            break
    ratio = abs(dev) / max(abs(perturbation), 1e-300)
    return MapCheck(converges=bool(ratio < 1.0), ratio=float(ratio),
                    deep=bool(ratio < 1e-3), multiplier=float(b))


SENSITIVITY_PARAMS = ("relative_return_Y", "short_term_f_param")


def sensitivity(scenario: Scenario, sol: FieldSolution, x_index: int,
                param: str) -> float:
    """Closed-form dK/dY for the two canonical parameter directions.

    relative_return_Y  shifts the sector's attractivity bracket by dY
                       (only p responds, dp/dY = -1/|f|), so stable
                       sectors lose capital when their surroundings gain
                       appeal: dK/dY = -K k(p) / (|f| D).
    short_term_f_param shifts f additively; both the 1/|f| prefactor and
                       p respond.
    """
    if param not in SENSITIVITY_PARAMS:
        raise DomainError(f"unknown sensitivity parameter {param!r}")
    if not sol.active[x_index]:
        raise SingularError(f"sector {x_index} is deserted or singular")
    d = capital_derivatives(scenario, sol, x_index)
    f = sol.f_x[x_index]
    f_abs = abs(f)
    k = sol.k_x[x_index]
    den = local_denominator(scenario, sol, x_index)
    if abs(den) < 1e-12:
        raise SingularError(f"stability denominator vanishes at {x_index}")
    if param == "relative_return_Y":
        direct = -d.kp / f_abs
    else:
        # an additive shift of f moves |f|, the attractivity (through the
        # f + |f|/2 bracket) and hence p; for f < 0 the step term flips
        sgn = math.copysign(1.0, f)
        p = sol.p_x[x_index]
        dp_dy = -sgn * (p + sgn + 0.5) / f_abs
        direct = d.kp * dp_dy + (3.0 * d.c1 - 1.0) * sgn / f_abs
    return float(k * direct / den)


@dataclass(frozen=True)
class StabilityReport:
    stab_denom: np.ndarray
    b_crit: np.ndarray
    pattern: tuple
    sensitivities: dict | None = None


def _term_split(scenario: Scenario, sol: FieldSolution):
    """Dividend vs price/expectation contributions to f, per sector."""
    prm = scenario.params
    b_x = fieldcore.dividend_productivity(scenario)
    k = np.maximum(sol.k_x, 1e-300)
    dividend = prm.alpha * b_x * k ** (prm.alpha - 1.0) / prm.epsilon
    u = (k ** prm.alpha * scenario.r / (sol.kalpha_mean * sol.r_mean))
    price = prm.b * np.arctan(u - 1.0) / prm.epsilon
    return dividend, price


def classify(scenario: Scenario, sol: FieldSolution,
             sensitivity_params: tuple = ()) -> StabilityReport:
    """Three-pattern taxonomy with the stability sub-label for pattern 3.

    pattern1: low capital and dividend-dominated returns; pattern3: high
    capital with the price/expectation term dominating (split stable vs
    unstable by the sign of the denominator; a negative denominator always
    lands in pattern3_unstable); pattern2 otherwise.
    """
    n = scenario.grid.n_sectors
    denom = np.full(n, np.nan)
    bcrit = np.full(n, np.nan)
    labels = []
    active = sol.active
    if np.any(active):
        k_act = sol.k_x[active]
        low = float(np.quantile(k_act, LOW_QUANTILE))
        high = float(np.quantile(k_act, HIGH_QUANTILE))
    else:
        low = high = 0.0
    dividend, price = _term_split(scenario, sol)
    for x in range(n):
        if not active[x]:
            labels.append("deserted")
            continue
        bcrit[x] = map_multiplier(scenario, sol, x)
        denom[x] = 1.0 - bcrit[x]
        k = sol.k_x[x]
        div_dominates = dividend[x] >= DOMINANCE_RATIO * abs(price[x])
        exp_dominates = abs(price[x]) >= DOMINANCE_RATIO * dividend[x]
        if denom[x] < 0.0:
            labels.append("pattern3_unstable")
        elif k >= high and exp_dominates:
            labels.append("pattern3_stable")
        elif k <= low and div_dominates:
            labels.append("pattern1")
        else:
            labels.append("pattern2")

    sens = None
    if sensitivity_params:
        sens = {}
        for param in sensitivity_params:
            col = np.full(n, np.nan)
            for x in range(n):
                if active[x] and abs(denom[x]) > 1e-12:
                    col[x] = sensitivity(scenario, sol, x, param)
            sens[param] = col
    return StabilityReport(stab_denom=denom, b_crit=bcrit,
                           pattern=tuple(labels), sensitivities=sens)


def report_csv_text(scenario: Scenario, report: StabilityReport) -> str:
    buf = io.StringIO()
    cols = ["x", "stab_denom", "b_crit", "pattern"]
    sens = report.sensitivities or {}
    cols.extend(f"dk_d{name}" for name in sens)
    buf.write(",".join(cols) + "\n")
    x = scenario.grid.nodes()
    for i in range(scenario.grid.n_sectors):
        row = [format(x[i], ".17g"), format(report.stab_denom[i], ".17g"),
               format(report.b_crit[i], ".17g"), report.pattern[i]]
        row.extend(format(col[i], ".17g") for col in sens.values())
        buf.write(",".join(row) + "\n")
    return buf.getvalue()
