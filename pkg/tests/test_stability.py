import math
import unittest.mock as mock

import numpy as np
import pytest

from sectorfield import fieldcore, stability
from sectorfield.errors import DomainError, SingularError
from sectorfield.fieldcore import FieldSolution, solve_collective_state
from sectorfield.stability import (classify, iterate_map_check,
                                   local_denominator, map_multiplier,
                                   sensitivity)

from conftest import make_scenario


def random_scenario(rng, n=32):
    """Smooth random landscape in the deep negative-return regime."""
    xg = np.arange(n) + 0.5
    modes = rng.integers(1, 4, size=2)
    amps = rng.uniform(0.05, 0.12, size=2)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=2)
    r = 1.0 + sum(a * np.cos(2.0 * np.pi * m * xg / n + ph)
                  for a, m, ph in zip(amps, modes, phases))
    return make_scenario(n=n, x_max=float(n), r=r,
                         gamma=float(rng.uniform(0.08, 0.15)),
                         b=float(rng.uniform(0.2, 0.5)),
                         n_firms=400, n_investors=1600)


class TestLocalDenominator:
    def test_flat_stub_gives_one(self, uniform_scenario, uniform_solution):
        # all capital derivatives zero -> multiplier 0 -> denominator 1
        stub = fieldcore.CapitalDerivatives(df=0.0, dpsi2=0.0, dgg=0.0,
                                            dp=0.0, kp=0.7, c1=0.0)
        with mock.patch.object(fieldcore, "capital_derivatives",
                               return_value=stub):
            assert local_denominator(uniform_scenario, uniform_solution, 0) \
                == pytest.approx(1.0)

    def test_uniform_constant_array(self, uniform_scenario, uniform_solution):
        vals = [local_denominator(uniform_scenario, uniform_solution, x)
                for x in range(8)]
        assert np.allclose(vals, vals[0], rtol=1e-9)

    def test_against_residual_map_derivative(self, bump_scenario,
                                             bump_solution):
        # independent oracle: finite difference of the log residual map
        sol = bump_solution
        for x in (2, 7, 12):
            k0 = sol.k_x[x]
            dk = 1e-6 * k0
            frozen = dict(big_m=sol.big_m, d_lag=sol.lagrange_d,
                          c_norm=sol.c_norm, ka_mean=sol.kalpha_mean,
                          r_mean=sol.r_mean, fprime_x=sol.fprime_x[x],
                          f_off=0.0, a_off=0.0)
            lo = fieldcore._local_phi(bump_scenario, x, k0 - dk, **frozen)[0]
            hi = fieldcore._local_phi(bump_scenario, x, k0 + dk, **frozen)[0]
            d_oracle = k0 * (hi - lo) / (2.0 * dk)
            assert local_denominator(bump_scenario, sol, x) == pytest.approx(
                d_oracle, rel=1e-5)

    def test_deserted_is_singular(self, uniform_scenario, uniform_solution):
        import dataclasses

        masked = dataclasses.replace(
            uniform_solution, deserted=np.array([True] + [False] * 7))
        with pytest.raises(SingularError):
            local_denominator(uniform_scenario, masked, 0)


class TestIterateMapCheck:
    def test_stable_sector_converges(self, bump_scenario, bump_solution):
        for x in range(16):
            den = local_denominator(bump_scenario, bump_solution, x)
            chk = iterate_map_check(bump_scenario, bump_solution, x,
                                    0.005 * bump_solution.k_x[x])
            assert chk.converges == (den > 0.0) or abs(chk.multiplier) >= 1.0

    def test_marginal_multiplier_geometric_decay(self, uniform_scenario,
                                                 uniform_solution):
        with mock.patch.object(stability, "map_multiplier",
                               return_value=0.999):
            chk = iterate_map_check(uniform_scenario, uniform_solution, 0,
                                    0.005 * uniform_solution.k_x[0])
        assert chk.converges
        assert not chk.deep                     # converges, but slowly
        assert chk.ratio == pytest.approx(0.999 ** 200, rel=1e-9)

    def test_divergent_multiplier(self, uniform_scenario, uniform_solution):
        with mock.patch.object(stability, "map_multiplier",
                               return_value=1.02):
            chk = iterate_map_check(uniform_scenario, uniform_solution, 0,
                                    0.005 * uniform_solution.k_x[0])
        assert not chk.converges

    def test_perturbation_bound(self, uniform_scenario, uniform_solution):
        with pytest.raises(DomainError):
            iterate_map_check(uniform_scenario, uniform_solution, 0,
                              0.5 * uniform_solution.k_x[0])


class TestSensitivity:
    def test_stable_sector_negative_return_sensitivity(self, bump_scenario,
                                                       bump_solution):
        # raising the surroundings' appeal drains a stable sector
        for x in (2, 6, 10):
            den = local_denominator(bump_scenario, bump_solution, x)
            if den <= 0.0:
                continue
            assert sensitivity(bump_scenario, bump_solution, x,
                               "relative_return_Y") < 0.0

    def test_unstable_sector_flips_sign(self, uniform_scenario,
                                        uniform_solution):
        stub = fieldcore.CapitalDerivatives(df=0.0, dpsi2=0.0, dgg=0.0,
                                            dp=0.0, kp=0.7, c1=0.0)
        with mock.patch.object(fieldcore, "capital_derivatives",
                               return_value=stub), \
             mock.patch.object(stability, "local_denominator",
                               side_effect=[1.0, -1.0]):
            plus = sensitivity(uniform_scenario, uniform_solution, 0,
                               "relative_return_Y")
            minus = sensitivity(uniform_scenario, uniform_solution, 0,
                                "relative_return_Y")
        assert plus < 0.0 < minus

    def test_against_perturb_and_resolve(self):
        rng = np.random.default_rng(5)
        sc = random_scenario(rng)
        sol = solve_collective_state(sc, multi_start=False)
        n = sc.grid.n_sectors
        for x, param, make_offset in [
                (5, "relative_return_Y", "attractivity_offset"),
                (20, "short_term_f_param", "f_offset")]:
            den = local_denominator(sc, sol, x)
            assert abs(den) > 0.1
            closed = sensitivity(sc, sol, x, param)
            dy = 1e-5
            off = np.zeros(n)
            off[x] = dy
            plus = solve_collective_state(sc, seeds=sol.k_x,
                                          multi_start=False,
                                          **{make_offset: off})
            off[x] = -dy
            minus = solve_collective_state(sc, seeds=sol.k_x,
                                           multi_start=False,
                                           **{make_offset: off})
            oracle = (plus.k_x[x] - minus.k_x[x]) / (2.0 * dy)
            assert closed == pytest.approx(oracle, rel=0.05)

    def test_unknown_parameter(self, uniform_scenario, uniform_solution):
        with pytest.raises(DomainError):
            sensitivity(uniform_scenario, uniform_solution, 0, "nonsense")


def _synthetic_solution(scenario, k_x, f_x, deserted=None):
    n = scenario.grid.n_sectors
    k_x = np.asarray(k_x, float)
    f_x = np.asarray(f_x, float)
    deserted = (np.zeros(n, bool) if deserted is None
                else np.asarray(deserted, bool))
    psi2 = np.where(deserted, 0.0, scenario.params.n_firms
                    / scenario.grid.volume)
    ka = float(np.mean(k_x[~deserted] ** scenario.params.alpha))
    rm = float(np.mean(scenario.r[~deserted]))
    zeros = np.zeros(n)
    a_x = f_x + 0.5 * np.abs(f_x)
    big_m = float(np.max(a_x[~deserted]))
    p_x = np.where(deserted, 0.0, (big_m - a_x) / np.abs(f_x))
    return FieldSolution(
        scenario=scenario, k_x=k_x, psi2=psi2, nhat=zeros + 1.0, f_x=f_x,
        fprime_x=zeros, g_x=zeros, grad_g_x=zeros, a_x=a_x, p_x=p_x,
        lagrange_d=2.0 * scenario.params.tau * psi2.max(), big_m=big_m,
        c_norm=1.0, p_bar=0.0, x0_index=0, kalpha_mean=ka, r_mean=rm,
        deserted=deserted, singular=np.zeros(n, bool), residual=0.0,
        iterations=1)


class TestClassify:
    def test_uniform_single_label(self, uniform_scenario, uniform_solution):
        report = classify(uniform_scenario, uniform_solution)
        assert len(set(report.pattern)) == 1
        assert report.pattern[0] in stability.PATTERN_LABELS

    def test_three_regime_layout(self):
        # synthetic state: low capital with dominant dividends, a midfield,
        # and high capital with a dominant price term
        n = 9
        sc = make_scenario(n=n, r=1.0, alpha=0.3, b=2.0)
        k_x = np.array([0.02, 0.02, 0.02, 1.0, 1.0, 1.0, 40.0, 40.0, 40.0])
        f_x = np.full(n, 1.0)
        sol = _synthetic_solution(sc, k_x, f_x)
        report = classify(sc, sol)
        labels = set(report.pattern)
        dividend, price = stability._term_split(sc, sol)
        assert np.all(dividend[:3] >= 2.0 * np.abs(price[:3]))
        assert np.all(np.abs(price[6:]) >= 2.0 * dividend[6:])
        assert report.pattern[0] == "pattern1"
        assert report.pattern[4] == "pattern2"
        assert report.pattern[6] in ("pattern3_stable", "pattern3_unstable")
        assert {"pattern1", "pattern2"}.issubset(labels)

    def test_deserted_label(self, uniform_scenario):
        n = 8
        deserted = np.zeros(n, bool)
        deserted[3] = True
        sol = _synthetic_solution(uniform_scenario, np.ones(n),
                                  np.full(n, -1.0), deserted)
        report = classify(uniform_scenario, sol)
        assert report.pattern[3] == "deserted"

    def test_negative_denominator_forces_unstable(self, uniform_scenario,
                                                  uniform_solution):
        with mock.patch.object(stability, "map_multiplier",
                               return_value=1.5):
            report = classify(uniform_scenario, uniform_solution)
        assert set(report.pattern) == {"pattern3_unstable"}
        assert np.all(report.stab_denom < 0.0)

    def test_permutation_invariance(self, bump_scenario, bump_solution):
        report = classify(bump_scenario, bump_solution)
        # labels depend only on per-sector values: the mirrored solution
        # of the symmetric bump carries mirrored labels
        assert report.pattern == tuple(reversed(report.pattern))

    def test_sensitivity_columns(self, bump_scenario, bump_solution):
        report = classify(bump_scenario, bump_solution,
                          sensitivity_params=("relative_return_Y",))
        col = report.sensitivities["relative_return_Y"]
        assert np.isfinite(col[bump_solution.active]).all()

    def test_csv_export(self, bump_scenario, bump_solution):
        report = classify(bump_scenario, bump_solution)
        text = stability.report_csv_text(bump_scenario, report)
        lines = text.strip().splitlines()
        assert lines[0] == "x,stab_denom,b_crit,pattern"
        assert len(lines) == 17


class TestCriterionEquivalence:
    def test_verdict_matches_sign_test_on_random_scenarios(self):
        rng = np.random.default_rng(17)
        agree = total = 0
        for _ in range(3):
            sc = random_scenario(rng)
            sol = solve_collective_state(sc, multi_start=False)
            for x in range(sc.grid.n_sectors):
                if not sol.active[x]:
                    continue
                den = local_denominator(sc, sol, x)
                chk = iterate_map_check(sc, sol, x, 0.005 * sol.k_x[x])
                total += 1
                agree += (chk.converges == (den > 0.0))
        assert total > 0
        assert agree == total
