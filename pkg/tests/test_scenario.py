import math

import numpy as np
import pytest

from sectorfield.errors import ParseError, ValidationError
from sectorfield.scenario import (Scenario, SectorGrid, grid_gradient,
                                  grid_laplacian, landscape_derivatives,
                                  load_scenario, parse_scenario_text,
                                  save_scenario, scenario_text)

from conftest import make_scenario

FLAT_TEXT = """
# flat scenario, 64 sectors
[grid]
n_sectors = 64
x_min = 0.0
x_max = 64.0
boundary = periodic

[params]
alpha = 0.5
b = 0.4
gamma = 0.05
epsilon = 0.2
tau = 0.1
nu = 0.3
a_f0 = 0.5
varsigma = 1.0
eta = 0.5
sigma_x2 = 1e-4
sigma_k2 = 0.5
sigma_xhat2 = 0.5
sigma_khat2 = 0.5
n_firms = 100
n_investors = 400
f2_exponent = 1.0
include_F_correction = false

[expectations]
a0 = 0.5
b_x2 = 0.0
c_t = -0.5
d_t2 = 0.0
f_x2 = 0.0
h_t2 = 0.0
u_xt = 0.0
v_xt = 0.0

[landscape]
r_values = 1.0
"""


class TestLoad:
    def test_flat_uniform_landscape(self, tmp_path):
        path = tmp_path / "flat.sfs"
        path.write_text(FLAT_TEXT)
        sc = load_scenario(path)
        assert sc.grid.n_sectors == 64
        assert np.all(sc.r == 1.0)

    def test_alpha_out_of_range(self):
        bad = FLAT_TEXT.replace("alpha = 0.5", "alpha = 1.4")
        with pytest.raises(ValidationError) as err:
            parse_scenario_text(bad)
        assert err.value.field == "alpha"

    def test_gaussian_bump_matches_closed_form(self):
        text = FLAT_TEXT.replace(
            "r_values = 1.0",
            "analytic = gaussian-bump\ncenter = 0.5\nheight = 2.0\nwidth = 0.1")
        text = text.replace("x_max = 64.0", "x_max = 1.0")
        sc = parse_scenario_text(text)
        x = sc.grid.nodes()
        dx = (x - 0.5 + 0.5) % 1.0 - 0.5
        expected = 1.0 + 2.0 * np.exp(-0.5 * (dx / 0.1) ** 2)
        assert np.max(np.abs(sc.r - expected)) < 1e-12

    def test_missing_key(self):
        with pytest.raises(ParseError):
            parse_scenario_text(FLAT_TEXT.replace("tau = 0.1\n", ""))

    def test_malformed_line(self):
        with pytest.raises(ParseError) as err:
            parse_scenario_text(FLAT_TEXT.replace("tau = 0.1", "tau 0.1"))
        assert err.value.line is not None

    def test_negative_returns_rejected(self):
        with pytest.raises(ValidationError):
            parse_scenario_text(FLAT_TEXT.replace("r_values = 1.0",
                                                  "r_values = 1.0, -1.0"))

    def test_roundtrip_identity(self, tmp_path):
        sc = make_scenario(n=12, analytic={"kind": "gaussian-bump",
                                           "center": 6.0, "height": 0.4,
                                           "width": 1.5, "baseline": 1.0})
        path = tmp_path / "roundtrip.sfs"
        save_scenario(sc, path)
        back = load_scenario(path)
        assert back.grid == sc.grid
        assert back.params == sc.params
        assert back.expectations == sc.expectations
        assert np.array_equal(back.r, sc.r)
        assert scenario_text(back) == scenario_text(sc)


class TestDerivatives:
    def test_constant_landscape(self):
        sc = make_scenario(n=16, r=2.5)
        grad, lap = landscape_derivatives(sc)
        assert np.all(grad == 0.0)
        assert np.all(lap == 0.0)

    def test_cosine_laplacian_second_order(self):
        # numeric lap of cos(2 pi x) is -(2 pi)^2 R to O(h^2)
        errors = []
        for n in (32, 64):
            grid = SectorGrid(n_sectors=n, x_min=0.0, x_max=1.0)
            x = grid.nodes()
            r = np.cos(2.0 * math.pi * x)
            lap = grid_laplacian(grid, r)
            errors.append(np.max(np.abs(lap + (2.0 * math.pi) ** 2 * r)))
        assert errors[0] / errors[1] == pytest.approx(4.0, rel=0.15)

    def test_gradient_halving_spacing(self):
        errors = []
        for n in (32, 64):
            grid = SectorGrid(n_sectors=n, x_min=0.0, x_max=1.0)
            x = grid.nodes()
            r = np.sin(2.0 * math.pi * x)
            grad = grid_gradient(grid, r)
            errors.append(np.max(np.abs(grad - 2.0 * math.pi
                                        * np.cos(2.0 * math.pi * x))))
        assert errors[0] / errors[1] == pytest.approx(4.0, rel=0.15)

    def test_bump_extremum(self):
        sc = make_scenario(n=17, x_max=17.0,
                           analytic={"kind": "gaussian-bump", "center": 8.5,
                                     "height": 1.0, "width": 2.0,
                                     "baseline": 1.0})
        grad, lap = landscape_derivatives(sc)
        peak = np.argmax(sc.r)
        assert grad[peak] == pytest.approx(0.0, abs=1e-12)
        assert lap[peak] < 0.0

    def test_analytic_vs_finite_difference(self):
        analytic = {"kind": "gaussian-bump", "center": 32.0, "height": 0.5,
                    "width": 6.0, "baseline": 1.0}
        sc = make_scenario(n=64, analytic=analytic)
        grad_a, lap_a = landscape_derivatives(sc)
        grad_fd = grid_gradient(sc.grid, sc.r)
        lap_fd = grid_laplacian(sc.grid, sc.r)
        assert np.max(np.abs(grad_a - grad_fd)) < 5e-3
        assert np.max(np.abs(lap_a - lap_fd)) < 5e-3

    def test_reflecting_boundary_zero_gradient_at_edges(self):
        grid = SectorGrid(n_sectors=8, x_min=0.0, x_max=8.0,
                          boundary="reflecting")
        v = np.arange(8.0) ** 2
        grad = grid_gradient(grid, v)
        assert grad[0] == pytest.approx((v[1] - v[1]) / 2.0)


class TestGridValidation:
    def test_too_few_sectors(self):
        with pytest.raises(ValidationError):
            SectorGrid(n_sectors=2, x_min=0.0, x_max=1.0)

    def test_bad_boundary(self):
        with pytest.raises(ValidationError):
            SectorGrid(n_sectors=8, x_min=0.0, x_max=1.0, boundary="open")

    def test_volume(self):
        grid = SectorGrid(n_sectors=10, x_min=-1.0, x_max=3.0)
        assert grid.volume == pytest.approx(4.0)
        assert grid.spacing == pytest.approx(0.4)
