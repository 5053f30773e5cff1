import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddcosim.physics import (PhysicalModels, bernoulli, bernoulli_prime,
                             equilibrium_density, mobility,
                             mobility_field_derivative, recombination)


def rel_id_err(lhs, rhs):
    scale = max(abs(lhs), abs(rhs), 1.0)
    return abs(lhs - rhs) / scale


class TestBernoulli:
    def test_limit_value_at_zero(self):
        assert bernoulli(0.0) == 1.0

    def test_closed_form_at_one(self):
        assert abs(bernoulli(1.0) - 1.0 / (math.e - 1.0)) < 1e-14

    @pytest.mark.parametrize("x", [1e-12, 1e-3, 1.0, 50.0, 700.0])
    def test_reflection_identity(self, x):
        lhs = bernoulli(-x) - bernoulli(x)
        assert abs(lhs - x) <= 1e-12 * max(1.0, x)

    def test_no_overflow_up_to_700(self):
        x = np.linspace(-700, 700, 20001)
        b = bernoulli(x)
        assert np.all(np.isfinite(b))
        assert np.all(b > 0.0)

    def test_branch_crossover_consistency(self):
        # Taylor and expm1 branches agree at the switch point
        for x in (1e-4 * (1 - 1e-9), 1e-4 * (1 + 1e-9), -1e-4 * (1 + 1e-9)):
            direct = x / math.expm1(x)
            assert abs(bernoulli(x) - direct) <= 1e-13

    def test_exponential_identity_bulk(self):
        rng = np.random.default_rng(123)
        x = rng.uniform(-700.0, 700.0, size=10 ** 6)
        bp = bernoulli(x)
        bm = bernoulli(-x)
        assert np.all(bp > 0.0)
        # B(x) e^x = B(-x); compare in log space to dodge the e^700 range
        lhs = np.log(bp) + x
        rhs = np.log(bm)
        assert np.max(np.abs(lhs - rhs)) < 1e-12 * np.maximum(1.0, np.abs(rhs)).max()

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-700, 700, allow_nan=False))
    def test_positivity_property(self, x):
        assert bernoulli(x) > 0.0

    def test_derivative_matches_finite_difference(self):
        xs = np.array([-500.0, -5.0, -0.3, -1e-5, 1e-5, 0.2, 3.0, 30.0, 300.0])
        h = 1e-6
        fd = (bernoulli(xs + h) - bernoulli(xs - h)) / (2 * h)
        got = bernoulli_prime(xs)
        assert np.allclose(got, fd, rtol=1e-6, atol=1e-9)


class TestModels:
    def test_thermal_voltage_derived(self):
        m = PhysicalModels(temperature=300.0)
        assert abs(m.v_t - 0.0258520) < 1e-6
        assert abs(m.with_temperature(600.0).v_t - 2 * m.v_t) < 1e-12

    def test_intrinsic_density_silicon_range(self):
        ni = PhysicalModels().n_intrinsic
        assert 8e9 < ni < 1.3e10

    def test_parameters_must_be_positive(self):
        with pytest.raises(ValueError):
            PhysicalModels(temperature=-1.0)
        with pytest.raises(ValueError):
            PhysicalModels(tau_n=0.0)


class TestMobility:
    def test_low_doping_lattice_value(self):
        mu_n, mu_p = mobility(PhysicalModels(), 1e12, 0.0)
        assert abs(mu_n - 1414.0) < 15.0  # ~lattice electron mobility
        assert abs(mu_p - 470.5) < 5.0

    def test_velocity_saturation_asymptote(self):
        m = PhysicalModels()
        mu_n, _ = mobility(m, 1e12, 1e7)
        assert abs(mu_n * 1e7 - m.v_sat_n) <= 0.01 * m.v_sat_n

    def test_heavy_doping_below_100(self):
        mu_n, _ = mobility(PhysicalModels(), 1e20, 0.0)
        assert mu_n < 100.0

    def test_monotone_in_doping_and_field(self):
        m = PhysicalModels()
        dop = np.logspace(12, 20, 30)
        mu = np.array([mobility(m, d, 0.0)[0] for d in dop])
        assert np.all(np.diff(mu) < 0.0)
        fields = np.logspace(1, 7, 30)
        mu_f = np.array([mobility(m, 1e15, f)[0] for f in fields])
        assert np.all(np.diff(mu_f) < 0.0)

    def test_field_derivative_matches_fd(self):
        m = PhysicalModels()
        # smooth at zero field: derivative vanishes there
        dn0, dp0 = mobility_field_derivative(m, 1e15, 0.0)
        assert dn0 == 0.0 and dp0 == 0.0
        for e in (1e2, 1e4, 3e5):
            h = 1e-4 * e
            fd_n = (mobility(m, 1e15, e + h)[0] - mobility(m, 1e15, e - h)[0]) / (2 * h)
            fd_p = (mobility(m, 1e15, e + h)[1] - mobility(m, 1e15, e - h)[1]) / (2 * h)
            dn, dp = mobility_field_derivative(m, 1e15, e)
            assert dn == pytest.approx(fd_n, rel=1e-6)
            assert dp == pytest.approx(fd_p, rel=1e-6)


class TestRecombination:
    def test_equilibrium_rate_is_zero(self):
        m = PhysicalModels()
        ni = m.n_intrinsic
        r, _, _ = recombination(m, 10 * ni, ni / 10)  # np == ni^2
        assert r == pytest.approx(0.0, abs=1e-30 * ni)

    def test_srh_formula_oracle(self):
        # direct numeric evaluation of the SRH + Auger expressions
        m = PhysicalModels(tau_n=1e-6, tau_p=1e-6)
        ni = m.n_intrinsic
        n = p = 1e17
        srh = (n * p - ni * ni) / (1e-6 * (n + ni) + 1e-6 * (p + ni))
        aug = (m.auger_n * n + m.auger_p * p) * (n * p - ni * ni)
        r, _, _ = recombination(m, n, p)
        assert r == pytest.approx(srh + aug, rel=1e-12)

    def test_sign_property(self):
        m = PhysicalModels()
        ni = m.n_intrinsic
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = 10 ** rng.uniform(4, 19)
            p = 10 ** rng.uniform(4, 19)
            r, _, _ = recombination(m, n, p)
            if n * p > ni * ni * (1 + 1e-9):
                assert r > 0.0
            elif n * p < ni * ni * (1 - 1e-9):
                assert r < 0.0

    def test_derivatives_match_central_differences(self):
        m = PhysicalModels()
        rng = np.random.default_rng(17)
        for _ in range(100):
            n = 10 ** rng.uniform(6, 19)
            p = 10 ** rng.uniform(6, 19)
            r, drdn, drdp = recombination(m, n, p)
            hn, hp = 1e-5 * n, 1e-5 * p
            fd_n = (recombination(m, n + hn, p)[0] - recombination(m, n - hn, p)[0]) / (2 * hn)
            fd_p = (recombination(m, n, p + hp)[0] - recombination(m, n, p - hp)[0]) / (2 * hp)
            # the FD oracle itself carries rounding noise ~eps |r| / h
            noise_n = 1e-13 * abs(r) / hn
            noise_p = 1e-13 * abs(r) / hp
            assert abs(drdn - fd_n) <= 1e-6 * max(abs(fd_n), abs(drdn)) + noise_n
            assert abs(drdp - fd_p) <= 1e-6 * max(abs(fd_p), abs(drdp)) + noise_p


def test_equilibrium_density_neutrality():
    ni = 1e10
    for c in (-5e18, -1e10, 0.0, 3e3, 1e16):
        n, p = equilibrium_density(c, ni)
        assert n > 0 and p > 0
        assert n - p == pytest.approx(c, rel=1e-12, abs=1e-3 * ni)
        assert n * p == pytest.approx(ni * ni, rel=1e-10)
