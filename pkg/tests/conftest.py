import numpy as np
import pytest

from sectorfield.scenario import (ExpectationParams, ReturnLandscape,
                                  Scenario, SectorGrid, StructuralParams)

DEFAULT_PARAMS = dict(
    alpha=0.5, b=0.4, gamma=0.05, epsilon=0.2, tau=0.1, nu=0.3, a_f0=0.5,
    varsigma=1.0, eta=0.5, sigma_x2=1e-4, sigma_k2=0.5, sigma_xhat2=0.5,
    sigma_khat2=0.5, n_firms=100, n_investors=400)

DEFAULT_EXPECTATIONS = dict(
    a0=0.5, b_x2=0.0, c_t=-0.5, d_t2=0.0, f_x2=0.0, h_t2=0.0, u_xt=0.0,
    v_xt=0.0)


def make_params(**overrides) -> StructuralParams:
    cfg = dict(DEFAULT_PARAMS)
    cfg.update(overrides)
    return StructuralParams(**cfg)


def make_expectations(**overrides) -> ExpectationParams:
    cfg = dict(DEFAULT_EXPECTATIONS)
    cfg.update(overrides)
    return ExpectationParams(**cfg)


def make_scenario(n=8, r=1.0, boundary="periodic", x_min=0.0, x_max=None,
                  analytic=None, expectations=None, **param_overrides) -> Scenario:
    """Unit-spacing grid by default (x_max = n)."""
    if x_max is None:
        x_max = x_min + n
    grid = SectorGrid(n_sectors=n, x_min=x_min, x_max=x_max, boundary=boundary)
    if analytic is not None:
        from sectorfield.scenario import evaluate_analytic

        r_values = evaluate_analytic(analytic["kind"], analytic, grid,
                                     grid.nodes(), order=0)
        landscape = ReturnLandscape(r_values=r_values, analytic=analytic)
    else:
        r_values = np.full(n, float(r)) if np.isscalar(r) else np.asarray(r, float)
        landscape = ReturnLandscape(r_values=r_values)
    return Scenario(grid=grid, landscape=landscape,
                    params=make_params(**param_overrides),
                    expectations=make_expectations(**(expectations or {})))


@pytest.fixture(scope="session")
def uniform_scenario():
    return make_scenario(n=8)


@pytest.fixture(scope="session")
def uniform_solution(uniform_scenario):
    from sectorfield.fieldcore import solve_collective_state

    return solve_collective_state(uniform_scenario)


@pytest.fixture(scope="session")
def bump_scenario():
    # price-term-dominant zone: f > 0 with d f / d K > 0 at the fixed point
    return make_scenario(
        n=16, analytic={"kind": "gaussian-bump", "center": 8.0,
                        "height": 0.3, "width": 2.5, "baseline": 1.0},
        b=0.8, gamma=0.01, n_investors=260)


@pytest.fixture(scope="session")
def bump_solution(bump_scenario):
    from sectorfield.fieldcore import solve_collective_state

    return solve_collective_state(bump_scenario)
