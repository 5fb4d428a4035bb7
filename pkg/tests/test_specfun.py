import math

import mpmath
import numpy as np
import pytest
import scipy.special as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from sectorfield import specfun
from sectorfield.errors import DomainError, PoleError

EULER_GAMMA = 0.5772156649015329


class TestGamma:
    def test_sqrt_pi(self):
        assert specfun.gamma(0.5) == pytest.approx(math.sqrt(math.pi), rel=1e-12)

    def test_factorial(self):
        assert specfun.gamma(5.0) == pytest.approx(24.0, rel=1e-12)

    def test_negative_argument_vs_high_precision(self):
        # reflection-formula territory; oracle is 50-digit arithmetic
        with mpmath.workdps(50):
            expected = float(mpmath.gamma("-0.3"))
        assert specfun.gamma(-0.3) == pytest.approx(expected, rel=1e-12)

    def test_pole(self):
        with pytest.raises(PoleError):
            specfun.gamma(0.0)
        with pytest.raises(PoleError):
            specfun.gamma(-3.0)

    def test_relative_error_sweep(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            x = rng.uniform(-30.0, 30.0)
            if abs(x - round(x)) < 1e-3:
                continue
            with mpmath.workdps(50):
                expected = float(mpmath.gamma(x))
            assert specfun.gamma(x) == pytest.approx(expected, rel=1e-12)


class TestDigamma:
    def test_euler_gamma(self):
        assert specfun.digamma(1.0) == pytest.approx(-EULER_GAMMA, rel=1e-10)

    def test_half(self):
        expected = -EULER_GAMMA - 2.0 * math.log(2.0)
        assert specfun.digamma(0.5) == pytest.approx(expected, rel=1e-10)

    def test_finite_difference_of_log_gamma(self):
        h = 1e-6
        oracle = (math.lgamma(3.7 + h) - math.lgamma(3.7 - h)) / (2.0 * h)
        assert specfun.digamma(3.7) == pytest.approx(oracle, rel=1e-8)

    def test_pole(self):
        with pytest.raises(PoleError):
            specfun.digamma(-2.0)


def _bisect_lambert(x, lo, hi):
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid * math.exp(mid) < x:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestLambertW:
    def test_zero(self):
        assert specfun.lambert_w(0, 0.0) == 0.0

    def test_unit(self):
        assert specfun.lambert_w(0, math.e) == pytest.approx(1.0, abs=1e-14)

    def test_negative_vs_bisection(self):
        oracle = _bisect_lambert(-0.3, -1.0, 0.0)
        assert specfun.lambert_w(0, -0.3) == pytest.approx(oracle, abs=1e-12)

    def test_branch_minus_one(self):
        w = specfun.lambert_w(-1, -0.2)
        assert w < -1.0
        assert w * math.exp(w) == pytest.approx(-0.2, abs=1e-12)

    def test_domain(self):
        with pytest.raises(DomainError):
            specfun.lambert_w(0, -1.0)
        with pytest.raises(DomainError):
            specfun.lambert_w(-1, 0.5)

    @given(st.floats(min_value=-math.exp(-1.0) + 1e-9, max_value=50.0))
    @settings(max_examples=80, deadline=None)
    def test_residual_branch0(self, x):
        w = specfun.lambert_w(0, x)
        assert abs(w * math.exp(w) - x) <= 1e-12 * max(1.0, abs(x))


class TestPcfD:
    def test_order_zero(self):
        assert specfun.pcf_d(0.0, 2.0) == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_order_one(self):
        assert specfun.pcf_d(1.0, 1.0) == pytest.approx(math.exp(-0.25), abs=1e-12)

    def test_against_integral_representation(self):
        # D_p(z) = e^{-z^2/4}/Gamma(-p) * int_0^inf t^{-p-1} e^{-t^2/2 - z t} dt
        p, z = -0.5, 1.3
        integral, _ = quad(lambda t: t ** (-p - 1.0)
                           * math.exp(-0.5 * t * t - z * t), 0.0, np.inf)
        oracle = math.exp(-0.25 * z * z) / math.gamma(-p) * integral
        assert specfun.pcf_d(p, z) == pytest.approx(oracle, rel=1e-10)

    def test_recurrence_200_random(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            p = rng.uniform(-3.0, 3.0)
            z = rng.uniform(0.0, 6.0)
            res = (specfun.pcf_d(p + 1.0, z) - z * specfun.pcf_d(p, z)
                   + p * specfun.pcf_d(p - 1.0, z))
            scale = max(1.0, abs(specfun.pcf_d(p, z)))
            assert abs(res) / scale < 1e-9

    def test_large_z_asymptotic_branch(self):
        p, z = 1.7, 20.0
        with mpmath.workdps(40):
            expected = float(mpmath.pcfd(p, z))
        assert specfun.pcf_d(p, z) == pytest.approx(expected, rel=1e-12)


def _moment_quadrature_oracle(p):
    """Independent oracle built on scipy's pbdv, not on specfun.pcf_d."""
    zeroth, _ = quad(lambda z: sp.pbdv(p, z)[0] ** 2, 0.0, np.inf, limit=250)
    first, _ = quad(lambda z: z * sp.pbdv(p, z)[0] ** 2, 0.0, np.inf, limit=250)
    return zeroth, first


class TestPcfMoments:
    def test_gaussian_half_integral_via_fallback(self):
        # p = 0 sits on a Gamma pole; the auto path must use quadrature
        with pytest.raises(PoleError):
            specfun.pcf_moments(0.0)
        m = specfun.pcf_moments_auto(0.0)
        assert m.zeroth == pytest.approx(math.sqrt(math.pi / 2.0), rel=1e-9)
        assert m.first == pytest.approx(1.0, rel=1e-9)

    @pytest.mark.parametrize("p", [-0.5, -1.7])
    def test_against_quadrature(self, p):
        zeroth, first = _moment_quadrature_oracle(p)
        m = specfun.pcf_moments(p)
        assert m.zeroth == pytest.approx(zeroth, rel=1e-8)
        assert m.first == pytest.approx(first, rel=1e-8)

    def test_fifty_random_non_pole_orders(self):
        rng = np.random.default_rng(23)
        checked = 0
        while checked < 50:
            p = rng.uniform(-3.0, 1.0)
            try:
                m = specfun.pcf_moments(p)
            except PoleError:
                continue
            zeroth, first = _moment_quadrature_oracle(p)
            assert m.zeroth == pytest.approx(zeroth, rel=1e-8)
            assert m.first == pytest.approx(first, rel=1e-8)
            checked += 1

    def test_positive_order_regime_uses_quadrature_consistently(self):
        # positive non-integer orders: closed forms still match quadrature
        m = specfun.pcf_moments(2.3)
        zeroth, first = _moment_quadrature_oracle(2.3)
        assert m.zeroth == pytest.approx(zeroth, rel=1e-8)
        assert m.first == pytest.approx(first, rel=1e-8)

    def test_moments_positive(self):
        for p in (-2.9, -1.2, 0.4, 1.6):
            m = specfun.pcf_moments_auto(p)
            assert m.zeroth > 0.0 and m.first > 0.0


def _bisect_power_exp(d, a, c, lo, hi):
    def g(x):
        return d * math.log(x) - a * x - math.log(c)

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestSolvePowerExp:
    def test_degenerate_rate(self):
        assert specfun.solve_power_exp(1.0, 0.0, 5.0) == pytest.approx(5.0)

    def test_exact_branch_point_identity(self):
        # W0(-e^{-1/2}/2) = -1/2 exactly, so x = 1
        x = specfun.solve_power_exp(2.0, 1.0, math.exp(-1.0))
        assert x == pytest.approx(1.0, abs=1e-10)

    def test_against_bisection(self):
        d, a, c = 2.5, 0.7, 0.2
        oracle = _bisect_power_exp(d, a, c, 1e-12, d / a)
        x = specfun.solve_power_exp(d, a, c)
        assert x == pytest.approx(oracle, rel=1e-9)
        assert x <= d / a + 1e-12   # branch-0 root is the smaller one

    def test_fifty_random_instances(self):
        rng = np.random.default_rng(31)
        done = 0
        while done < 50:
            d = rng.uniform(0.3, 4.0)
            a = rng.uniform(0.0, 2.0)
            c = rng.uniform(0.01, 3.0)
            if a > 0 and (a / d) * c ** (1.0 / d) > math.exp(-1.0):
                continue
            x = specfun.solve_power_exp(d, a, c)
            assert abs(x ** d * math.exp(-a * x) - c) <= 1e-10 * c
            done += 1

    def test_domain_error(self):
        with pytest.raises(DomainError):
            specfun.solve_power_exp(1.0, 5.0, 10.0)
