import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgcp_cox.cox import (
    CoxParams,
    SurvivalCurve,
    baseline_hazard,
    expected_cox_loglik,
    expected_cumhaz_term,
    expected_event_term,
    fit_baseline_curve,
    gauss_legendre,
    mean_remaining_life,
    mgf_exponent,
    risk_grid,
    survival_curve,
    survival_window_prob,
)
from mgcp_cox.datagen import UnitRecord
from mgcp_cox.errors import ValidationError


def unit(V, delta=1, w=(1.0,)):
    return UnitRecord(id="u", times=np.empty(0), Y=np.empty(0), V=V, delta=delta, w=np.array(w))


def cp(gamma=0.3, beta=0.5, b=-3.0, psi=0.05, t_min=2.0):
    return CoxParams(gamma=[gamma], beta=beta, b=b, psi=psi, t_min=t_min)


def mu(t):
    return 0.5 + 0.1 * np.asarray(t)


def var(t):
    return 0.2 + 0.01 * np.asarray(t)


class TestBaselineHazard:
    def test_zero_before_t_min(self):
        assert baseline_hazard(1.9, cp()) == 0.0

    def test_flat_when_psi_zero(self):
        c = cp(psi=0.0)
        np.testing.assert_allclose(baseline_hazard([2.0, 5.0, 50.0], c), np.exp(c.b))

    def test_nondecreasing(self):
        t = np.linspace(2.0, 30.0, 200)
        assert np.all(np.diff(baseline_hazard(t, cp())) >= 0)

    def test_weibull_rho_one_limit(self):
        lam, rho = 0.001, 1.0
        c = CoxParams([], 0.0, np.log(lam * rho), 0.0, 0.0)
        t = np.linspace(0.0, 100.0, 11)
        # equal up to the rounding of exp(log(x))
        np.testing.assert_allclose(baseline_hazard(t, c), lam * rho * t ** (rho - 1.0), rtol=1e-15)

    def test_negative_psi_rejected(self):
        with pytest.raises(ValidationError):
            cp(psi=-1e-3)


class TestEventTerm:
    def test_censored_is_zero(self):
        assert expected_event_term(unit(5.0, delta=0), 123.0, cp()) == 0.0

    def test_covariate_free(self):
        c = cp(gamma=0.0, beta=0.0)
        assert expected_event_term(unit(7.0), 3.0, c) == pytest.approx(c.b + c.psi * 5.0, rel=1e-15)

    def test_monte_carlo(self, rng):
        c, u = cp(), unit(7.0)
        m, v = mu(7.0), var(7.0)
        f = rng.normal(m, np.sqrt(v), 100_000)
        samples = np.log(baseline_hazard(7.0, c) * np.exp(c.gamma[0] * 1.0 + c.beta * f))
        se = samples.std(ddof=1) / np.sqrt(f.size)
        assert abs(expected_event_term(u, m, c) - samples.mean()) < 3 * se

    def test_event_before_t_min(self):
        with pytest.raises(ValidationError):
            expected_event_term(unit(1.0), 0.0, cp())


class TestCumhazTerm:
    def test_beta_zero_closed_form(self):
        c = cp(beta=0.0)
        V = 9.0
        want = -np.exp(c.gamma[0]) * np.exp(c.b) / c.psi * np.expm1(c.psi * (V - c.t_min))
        np.testing.assert_allclose(expected_cumhaz_term(unit(V), mu, var, c), want, rtol=1e-12)

    def test_mgf_factor_monte_carlo(self, rng):
        beta, m, v = 0.7, 0.4, 0.3
        f = rng.normal(m, np.sqrt(v), 1_000_000)
        mc = np.mean(np.exp(beta * f))
        np.testing.assert_allclose(np.exp(mgf_exponent(beta, m, v)), mc, rtol=0.01)

    def test_printed_variant_differs(self):
        assert mgf_exponent(0.5, 1.0, 0.4, "linear") == pytest.approx(0.5 * (1.0 + 0.2))
        assert mgf_exponent(0.5, 1.0, 0.4) != mgf_exponent(0.5, 1.0, 0.4, "linear")
        assert mgf_exponent(1.0, 1.0, 0.4) == mgf_exponent(1.0, 1.0, 0.4, "linear")
        with pytest.raises(ValidationError):
            mgf_exponent(1.0, 1.0, 0.4, "other")

    def test_zero_variance_riemann(self):
        c, V = cp(), 15.0
        got = expected_cumhaz_term(unit(V), mu, lambda t: np.zeros_like(t), c)
        n = 10_000
        h = (V - c.t_min) / n
        mid = c.t_min + h * (np.arange(n) + 0.5)
        want = -np.sum(baseline_hazard(mid, c) * np.exp(c.gamma[0] + c.beta * mu(mid))) * h
        np.testing.assert_allclose(got, want, rtol=1e-6)

    def test_nonpositive_V(self):
        with pytest.raises(ValidationError):
            expected_cumhaz_term(unit(0.0, delta=0), mu, var, cp())


class TestExpectedCoxLoglik:
    @staticmethod
    def moments(i, t):
        return mu(t) + 0.2 * i, var(t)

    def test_single_censored_unit(self):
        c = cp(gamma=0.0, beta=0.0)
        V = 8.0
        want = -np.exp(c.b) / c.psi * np.expm1(c.psi * (V - c.t_min))
        np.testing.assert_allclose(expected_cox_loglik([unit(V, 0)], self.moments, c), want, rtol=1e-12)

    def test_additive(self):
        units = [unit(4.0), unit(9.0, 0), unit(12.0)]
        c = cp()
        whole = expected_cox_loglik(units, self.moments, c)
        a = expected_cox_loglik(units[:1], self.moments, c)
        b = expected_cox_loglik(units[1:], lambda i, t: self.moments(i + 1, t), c)
        np.testing.assert_allclose(whole, a + b, rtol=1e-13)

    def test_monte_carlo_two_units(self, rng):
        units = [unit(6.0), unit(10.0, 0, w=(0.0,))]
        c = cp()
        exact = expected_cox_loglik(units, self.moments, c)
        S = 100_000
        total = np.zeros(S)
        for i, u in enumerate(units):
            m, v = self.moments(i, np.array([u.V]))
            f = rng.normal(m, np.sqrt(v), S)
            total += u.delta * (np.log(baseline_hazard(u.V, c)) + c.gamma[0] * u.w[0] + c.beta * f)
            nodes, wts = gauss_legendre(c.t_min, u.V, 32)
            mn, vn = self.moments(i, nodes)
            fn = rng.normal(mn, np.sqrt(vn), (S, nodes.size))
            total -= (baseline_hazard(nodes, c) * np.exp(c.gamma[0] * u.w[0] + c.beta * fn)) @ wts
        se = total.std(ddof=1) / np.sqrt(S)
        assert abs(total.mean() - exact) < 3 * se

    def test_shift_lowers_censored_loglik(self):
        units = [unit(9.0, 0), unit(14.0, 0)]
        c = cp()
        base = expected_cox_loglik(units, self.moments, c)
        shifted = expected_cox_loglik(units, lambda i, t: (self.moments(i, t)[0] + 0.3, var(t)), c)
        assert shifted < base


class TestBaselineCurve:
    def test_risk_grid(self):
        g = risk_grid([3.0, 5.0, 8.0])
        np.testing.assert_array_equal(g[g <= 6.0], [0, 1, 2, 3, 4, 5, 6])
        np.testing.assert_array_equal(risk_grid([2.5, 9.0, 3.5])[:5], [0, 1, 2, 2.5, 3])

    def test_needs_two_events(self):
        with pytest.raises(ValidationError):
            fit_baseline_curve([4.0], cp())

    def test_H_nondecreasing_and_hazard_clipped(self, rng):
        bh = fit_baseline_curve(rng.uniform(5, 40, 20), cp())
        assert np.all(np.diff(bh.H) >= 0)
        assert np.all(bh.hazard(np.linspace(-5, 60, 300)) >= 0)

    def test_flat_baseline_slope_recovered(self):
        c = cp(psi=0.0, t_min=0.0)
        bh = fit_baseline_curve(np.arange(1.0, 31.0), c)
        t = np.linspace(2, 28, 50)
        np.testing.assert_allclose(bh.hazard(t), np.exp(c.b), rtol=0.05)


def const_cp(h, t_min=0.0):
    return CoxParams(gamma=[0.0], beta=0.0, b=np.log(h), psi=0.0, t_min=t_min)


def flat(t):
    return np.zeros_like(np.asarray(t, dtype=float))


class TestWindowProbability:
    def test_empty_window(self):
        assert survival_window_prob(20.0, 0.0, [0.0], flat, None, const_cp(0.1)) == 0.0

    def test_constant_hazard(self):
        h, dt = 0.07, 13.0
        got = survival_window_prob(5.0, dt, [0.0], flat, None, const_cp(h))
        np.testing.assert_allclose(got, -np.expm1(-h * dt), rtol=0, atol=1e-8)

    def test_monotone_in_window(self):
        c = cp()
        p = [survival_window_prob(3.0, dt, [1.0], mu, None, c) for dt in np.linspace(0, 30, 31)]
        assert np.all(np.diff(p) >= 0)

    def test_negative_window(self):
        with pytest.raises(ValidationError):
            survival_window_prob(3.0, -1.0, [1.0], mu, None, cp())

    def test_spline_baseline(self, rng):
        c = cp(psi=0.0, t_min=0.0)
        bh = fit_baseline_curve(np.arange(1.0, 31.0), c)
        got = survival_window_prob(5.0, 10.0, [0.0], flat, bh, CoxParams([0.0], 0.0, 0.0, 0.0, 0.0))
        np.testing.assert_allclose(got, -np.expm1(-10.0 * np.exp(c.b)), rtol=0.02)

    @settings(max_examples=50, deadline=None)
    @given(t_star=st.floats(0.0, 50.0), dt=st.floats(0.0, 100.0), b=st.floats(-10.0, 3.0),
           psi=st.floats(0.0, 1.0), beta=st.floats(-2.0, 2.0))
    def test_probability_in_unit_interval(self, t_star, dt, b, psi, beta):
        c = CoxParams([0.5], beta, b, psi, 1.0)
        p = survival_window_prob(t_star, dt, [1.0], mu, None, c)
        assert 0.0 <= p <= 1.0


class TestSurvivalCurve:
    def test_invariants(self):
        curve = survival_curve(4.0, 30.0, [1.0], mu, None, cp())
        assert curve.survival[0] == 1.0
        assert np.all(np.diff(curve.survival) <= 0)
        assert curve.times[0] == 4.0 and curve.times[-1] == 34.0

    def test_rejects_increasing(self):
        with pytest.raises(ValidationError):
            SurvivalCurve(0.0, 1.0, np.array([0.0, 1.0]), np.array([1.0, 1.1]))


class TestMeanRemainingLife:
    def test_constant_hazard(self):
        h = 0.1
        for cap in (15.0, 250.0):
            got = mean_remaining_life(5.0, [0.0], flat, None, const_cp(h), 5.0 + cap)
            np.testing.assert_allclose(got, -np.expm1(-h * cap) / h, rtol=1e-6)
        np.testing.assert_allclose(mean_remaining_life(5.0, [0.0], flat, None, const_cp(h), 305.0), 1 / h, rtol=1e-6)

    def test_matches_fine_grid(self):
        c = cp(psi=0.02)
        t_star, cap = 4.0, 80.0
        f = lambda t: 0.3 * np.sin(np.asarray(t) / 5.0)  # noqa: E731
        got = mean_remaining_life(t_star, [1.0], f, None, c, cap)
        u = np.linspace(t_star, cap, 100_001)
        rate = baseline_hazard(u, c) * np.exp(c.gamma[0] + c.beta * f(u))
        H = np.r_[0.0, np.cumsum(0.5 * (rate[1:] + rate[:-1]) * np.diff(u))]
        want = np.trapezoid(np.exp(-H), u)
        np.testing.assert_allclose(got, want, rtol=1e-4)

    def test_larger_hazard_shorter_life(self):
        a = mean_remaining_life(4.0, [1.0], mu, None, cp(b=-3.0), 100.0)
        b = mean_remaining_life(4.0, [1.0], mu, None, cp(b=-2.0), 100.0)
        assert b < a

    def test_cap_must_exceed_t_star(self):
        with pytest.raises(ValidationError):
            mean_remaining_life(4.0, [1.0], mu, None, cp(), 4.0)
