"""Direct simulation of the micro-equations for finite firm/investor counts.

One synchronous step: (1) every investor splits its capital over the firms
of its own grid cell with weights F2(R) = R^zeta (an investor stranded in a
firm-free cell reaches into the nearest populated cell so that the
allocation identity stays exact); (2) firm capital is set to the allocated
sum; (3) investor wealth follows the portfolio return of its cell, scaled
by 1/epsilon, plus capital noise; (4) positions drift along the return
gradient and diffuse.

Capital noise variance is 2*sigma_khat2*dt: with mean-reversion rate |f|
this makes the stationary spread of investor capital match the collective
state's half-Gaussian scale sqrt(sigma_khat2/|f|).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace

import numpy as np

from . import fieldcore
from .fieldcore import FieldSolution
from .scenario import Scenario, landscape_derivatives


@dataclass(frozen=True)
class AgentPopulation:
    firm_x: np.ndarray
    firm_k: np.ndarray
    inv_x: np.ndarray
    inv_k: np.ndarray
    rng_seed: int
    step_count: int = 0
    shortfall: float = 0.0      # cumulative wealth clipped at the zero floor

    def __post_init__(self):
        for name in ("firm_x", "firm_k", "inv_x", "inv_k"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=float))


def cell_index(grid, x) -> np.ndarray:
    """Grid cell of each position (wrapped or clipped per boundary rule)."""
    raw = np.floor((np.asarray(x, dtype=float) - grid.x_min) / grid.spacing)
    idx = raw.astype(int)
    if grid.boundary == "periodic":
        return np.mod(idx, grid.n_sectors)
    return np.clip(idx, 0, grid.n_sectors - 1)


def _wrap_positions(grid, x):
    if grid.boundary == "periodic":
        return grid.x_min + np.mod(x - grid.x_min, grid.volume)
    lo, hi = grid.x_min, grid.x_max
    span = hi - lo
    y = np.mod(x - lo, 2.0 * span)
    return lo + np.where(y > span, 2.0 * span - y, y)


def init_population(scenario: Scenario, seed: int,
                    solution: FieldSolution | None = None) -> AgentPopulation:
    """Uniform positions; capitals at the field solution when supplied."""
    prm = scenario.params
    grid = scenario.grid
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0]))
    firm_x = rng.uniform(grid.x_min, grid.x_max, prm.n_firms)
    inv_x = rng.uniform(grid.x_min, grid.x_max, prm.n_investors)
    if solution is not None:
        k_cells = np.maximum(solution.k_x, 0.0)
        firm_k = k_cells[cell_index(grid, firm_x)]
        inv_k = (k_cells * prm.n_firms / prm.n_investors)[cell_index(grid, inv_x)]
    else:
        firm_k = np.ones(prm.n_firms)
        inv_k = np.ones(prm.n_investors)
    return AgentPopulation(firm_x=firm_x, firm_k=firm_k, inv_x=inv_x,
                           inv_k=inv_k, rng_seed=int(seed))


def _nearest_populated(grid, cells_with_firms: np.ndarray, cell: np.ndarray):
    """Map each cell to the nearest firm-occupied cell (ties go left)."""
    n = grid.n_sectors
    occupied = np.flatnonzero(cells_with_firms)
    dist = np.abs(cell[:, None] - occupied[None, :])
    if grid.boundary == "periodic":
        dist = np.minimum(dist, n - dist)
    return occupied[np.argmin(dist, axis=1)]


def allocate(pop: AgentPopulation, scenario: Scenario):
    """Allocation weights and resulting firm capital (exactly conserving).

    Returns (firm_k_new, per-investor target cell, per-cell F2 sums).
    """
    prm = scenario.params
    grid = scenario.grid
    fcell = cell_index(grid, pop.firm_x)
    icell = cell_index(grid, pop.inv_x)
    f2 = scenario.r[fcell] ** prm.f2_exponent
    s_cell = np.bincount(fcell, weights=f2, minlength=grid.n_sectors)
    has_firm = s_cell > 0.0
    target = icell.copy()
    stranded = ~has_firm[icell]
    if np.any(stranded):
        target[stranded] = _nearest_populated(grid, has_firm, icell[stranded])
    inv_mass = np.bincount(target, weights=pop.inv_k, minlength=grid.n_sectors)
    firm_k_new = f2 / s_cell[fcell] * inv_mass[fcell]
    return firm_k_new, target, s_cell


def firm_returns(pop: AgentPopulation, scenario: Scenario, firm_k: np.ndarray):
    """Per-firm short-term return r_i and price term F1_i."""
    prm = scenario.params
    grid = scenario.grid
    fcell = cell_index(grid, pop.firm_x)
    b_x = fieldcore.dividend_productivity(scenario)[fcell]
    k = np.maximum(firm_k, 1e-12)
    dividend = prm.alpha * b_x * k ** (prm.alpha - 1.0)
    cell_capital = np.bincount(fcell, weights=firm_k, minlength=grid.n_sectors)
    competition = prm.gamma * (cell_capital[fcell] - firm_k) / k
    ka_mean = float(np.mean(k ** prm.alpha))
    r_mean = float(np.mean(scenario.r[fcell]))
    u = k ** prm.alpha * scenario.r[fcell] / (ka_mean * r_mean)
    price = prm.b * np.arctan(u - 1.0)
    return dividend - competition, price, u, ka_mean, r_mean


def step(pop: AgentPopulation, scenario: Scenario, dt: float, *,
         include_noise: bool = True) -> AgentPopulation:
    """One synchronous update of the whole population."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    prm = scenario.params
    grid = scenario.grid
    rng = np.random.default_rng(
        np.random.SeedSequence([pop.rng_seed, pop.step_count + 1]))

    # (1)-(2) allocation and the capital identity
    firm_k, target, s_cell = allocate(pop, scenario)
    fcell = cell_index(grid, pop.firm_x)

    # (3) investor wealth from the cell portfolio return
    r_i, f1_i, u_i, ka_mean, r_mean = firm_returns(pop, scenario, firm_k)
    f2 = scenario.r[fcell] ** prm.f2_exponent
    weighted = np.bincount(fcell, weights=f2 * (r_i + f1_i),
                           minlength=grid.n_sectors)
    portfolio = np.zeros(grid.n_sectors)
    np.divide(weighted, s_cell, out=portfolio, where=s_cell > 0.0)
    inv_k = pop.inv_k * (1.0 + dt / prm.epsilon * portfolio[target])
    if include_noise:
        inv_k = inv_k + rng.normal(
            0.0, math.sqrt(2.0 * prm.sigma_khat2 * dt), inv_k.size)
    shortfall = float(np.sum(np.minimum(inv_k, 0.0)))
    inv_k = np.maximum(inv_k, 0.0)

    # (4) positions: gradient drift plus diffusion
    grad_r, _ = landscape_derivatives(scenario)
    firm_drift = grad_r[fcell] * np.maximum(firm_k, 0.0) ** prm.eta
    n_in_cell = np.bincount(fcell, minlength=grid.n_sectors)
    ka = np.maximum(firm_k, 1e-12) ** prm.alpha
    drift_f0 = prm.a_f0 * ka * grad_r[fcell] / (1.0 + (ka * scenario.r[fcell]) ** 2)
    drift_f1 = (prm.nu * prm.b * ka * grad_r[fcell] / (ka_mean * r_mean)
                / (1.0 + (u_i - 1.0) ** 2))
    cell_drift = np.bincount(fcell, weights=drift_f0 + drift_f1,
                             minlength=grid.n_sectors)
    inv_drift_cell = np.zeros(grid.n_sectors)
    np.divide(cell_drift, n_in_cell, out=inv_drift_cell, where=n_in_cell > 0)
    icell = cell_index(grid, pop.inv_x)
    inv_drift = inv_drift_cell[icell]

    firm_x = pop.firm_x + dt * firm_drift
    inv_x = pop.inv_x + dt * inv_drift
    if include_noise:
        firm_x = firm_x + rng.normal(0.0, math.sqrt(prm.sigma_x2 * dt),
                                     firm_x.size)
        inv_x = inv_x + rng.normal(0.0, math.sqrt(prm.sigma_xhat2 * dt),
                                   inv_x.size)
    firm_x = _wrap_positions(grid, firm_x)
    inv_x = _wrap_positions(grid, inv_x)

    return replace(pop, firm_x=firm_x, firm_k=firm_k, inv_x=inv_x,
                   inv_k=inv_k, step_count=pop.step_count + 1,
                   shortfall=pop.shortfall - shortfall)


def sector_statistics(pop: AgentPopulation, scenario: Scenario):
    """(firm count, mean firm capital) per sector for the current state."""
    grid = scenario.grid
    fcell = cell_index(grid, pop.firm_x)
    counts = np.bincount(fcell, minlength=grid.n_sectors).astype(float)
    capital = np.bincount(fcell, weights=pop.firm_k, minlength=grid.n_sectors)
    mean_k = np.divide(capital, counts, out=np.zeros_like(capital),
                       where=counts > 0)
    return counts, mean_k


@dataclass(frozen=True)
class ComparisonReport:
    counts_mean: np.ndarray
    counts_se: np.ndarray
    k_mean: np.ndarray
    k_se: np.ndarray
    field_counts: np.ndarray
    field_k: np.ndarray
    count_deviation: np.ndarray      # relative, vs the field solution
    k_deviation: np.ndarray
    seeds: tuple
    steps: int
    burn_in: int


def run_single_seed(scenario: Scenario, solution: FieldSolution | None, *,
                    steps: int, burn_in: int, seed: int, dt: float,
                    sample_every: int = 1,
                    trajectory: io.TextIOBase | None = None):
    """Time-averaged per-sector (counts, mean capital) for one seed."""
    n = scenario.grid.n_sectors
    nodes = scenario.grid.nodes()
    pop = init_population(scenario, seed, solution)
    acc_counts = np.zeros(n)
    acc_k = np.zeros(n)
    n_samples = 0
    for t in range(steps):
        pop = step(pop, scenario, dt)
        if t >= burn_in and (t - burn_in) % sample_every == 0:
            counts, mean_k = sector_statistics(pop, scenario)
            acc_counts += counts
            acc_k += mean_k
            n_samples += 1
            if trajectory is not None:
                for x in range(n):
                    trajectory.write(
                        f"{t * dt:.17g},{nodes[x]:.17g},"
                        f"{counts[x]:.17g},{mean_k[x]:.17g}\n")
    return acc_counts / n_samples, acc_k / n_samples


def run_and_compare(scenario: Scenario, solution: FieldSolution, *,
                    steps: int, burn_in: int, seeds, dt: float = 0.05,
                    sample_every: int = 1, threads: int = 1,
                    trajectory: io.TextIOBase | None = None) -> ComparisonReport:
    """Time-and-seed averaged sector statistics vs the field solution.

    Independent seeds may run in a bounded worker pool; results are
    collected in seed order so the report is deterministic.
    """
    if steps <= burn_in:
        raise ValueError("steps must exceed burn_in")
    seeds = tuple(int(s) for s in np.atleast_1d(seeds))
    grid = scenario.grid
    n = grid.n_sectors
    per_seed_counts = np.zeros((len(seeds), n))
    per_seed_k = np.zeros((len(seeds), n))

    def one(seed, sink):
        return run_single_seed(scenario, solution, steps=steps,
                               burn_in=burn_in, seed=seed, dt=dt,
                               sample_every=sample_every, trajectory=sink)

    if threads > 1 and len(seeds) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(one, seed, None) for seed in seeds]
            results = [f.result() for f in futures]
        if trajectory is not None:    # re-run first seed for the trace
            one(seeds[0], trajectory)
    else:
        results = [one(seed, trajectory if si == 0 else None)
                   for si, seed in enumerate(seeds)]
    for si, (counts, mean_k) in enumerate(results):
        per_seed_counts[si] = counts
        per_seed_k[si] = mean_k

    counts_mean = per_seed_counts.mean(axis=0)
    k_mean = per_seed_k.mean(axis=0)
    n_seeds = max(len(seeds), 1)
    counts_se = per_seed_counts.std(axis=0, ddof=1) / math.sqrt(n_seeds) \
        if n_seeds > 1 else np.zeros(n)
    k_se = per_seed_k.std(axis=0, ddof=1) / math.sqrt(n_seeds) \
        if n_seeds > 1 else np.zeros(n)
    field_counts = solution.psi2 * grid.spacing
    field_k = solution.k_x
    count_dev = np.abs(counts_mean - field_counts) / np.maximum(field_counts, 1e-300)
    k_dev = np.abs(k_mean - field_k) / np.maximum(field_k, 1e-300)
    return ComparisonReport(
        counts_mean=counts_mean, counts_se=counts_se, k_mean=k_mean,
        k_se=k_se, field_counts=field_counts, field_k=field_k,
        count_deviation=count_dev, k_deviation=k_dev, seeds=seeds,
        steps=steps, burn_in=burn_in)


def comparison_csv_text(scenario: Scenario, report: ComparisonReport) -> str:
    buf = io.StringIO()
    buf.write("x,abm_count,abm_count_se,abm_mean_k,abm_mean_k_se,"
              "field_count,field_k,count_dev,k_dev\n")
    nodes = scenario.grid.nodes()
    for i in range(scenario.grid.n_sectors):
        row = [nodes[i], report.counts_mean[i], report.counts_se[i],
               report.k_mean[i], report.k_se[i], report.field_counts[i],
               report.field_k[i], report.count_deviation[i],
               report.k_deviation[i]]
        buf.write(",".join(format(v, ".17g") for v in row) + "\n")
    return buf.getvalue()
