import numpy as np
import pytest
from scipy import stats

from mgcp_cox.datagen import (
    DEFAULT_SIGMA_B,
    GenConfig,
    UnitRecord,
    gen_dataset,
    gen_unit,
    path_basis,
    sample_event_time,
)
from mgcp_cox.errors import ValidationError


class TestSampleEventTime:
    def test_exponential_mean(self):
        rng = np.random.default_rng(0)
        T = np.array([sample_event_time(lambda t: np.full_like(t, 0.1), rng, 600.0)[0] for _ in range(100_000)])
        np.testing.assert_allclose(T.mean(), 10.0, rtol=0.01)

    def test_doubling_hazard_halves_mean(self):
        means = []
        for h in (0.1, 0.2):
            rng = np.random.default_rng(1)
            means.append(np.mean([sample_event_time(lambda t: np.full_like(t, h), rng, 600.0)[0]
                                  for _ in range(20_000)]))
        # common random numbers make the ratio almost exact
        np.testing.assert_allclose(means[0] / means[1], 2.0, rtol=1e-3)

    def test_weibull_ks(self):
        lam, rho = 0.05, 1.5
        rng = np.random.default_rng(2)
        T = np.array([sample_event_time(lambda t: lam * rho * t ** (rho - 1), rng, 200.0)[0] for _ in range(5000)])
        assert stats.kstest(T, lambda t: -np.expm1(-lam * t**rho)).pvalue > 0.01

    def test_horizon_marker(self):
        T, at_horizon = sample_event_time(lambda t: np.zeros_like(t), np.random.default_rng(0), 50.0)
        assert T == 50.0 and at_horizon

    def test_negative_hazard(self):
        with pytest.raises(ValidationError):
            sample_event_time(lambda t: np.full_like(t, -1.0), np.random.default_rng(0), 10.0)


class TestGenUnit:
    def test_signal_moments(self):
        cfg = GenConfig()
        rng = np.random.default_rng(3)
        b0, resid = [], []
        for _ in range(10_000):
            a = rng.uniform(*cfg.a_range)
            b = rng.multivariate_normal([2.5, 0.1, a], cfg.Sigma_b, method="eigh")
            b0.append(b[0])
        b0 = np.array(b0)
        assert abs(b0.mean() - 2.5) < 3 * b0.std(ddof=1) / np.sqrt(b0.size)
        units = gen_dataset(GenConfig(N=300, censor_frac=0.0, seed=4))
        # residuals against the true path are unavailable, so use second differences:
        # for a quadratic path, diff^2 y = 2a + noise with variance 6 sigma^2
        d2 = np.concatenate([np.diff(u.Y, 2) - np.mean(np.diff(u.Y, 2)) for u in units if u.Y.size > 6])
        np.testing.assert_allclose(d2.var() / 6.0, 0.1, rtol=0.05)

    def test_record_invariants(self):
        rng = np.random.default_rng(5)
        for i in range(50):
            u = gen_unit(GenConfig(), rng, unit_id=i)
            assert np.all(np.diff(u.times) > 0)
            assert u.times.size == 0 or u.times[-1] <= u.V
            assert u.times.size == 0 or u.times[0] == 1.0
            assert u.delta in (0, 1) and u.w[0] in (0.0, 1.0)

    def test_beta_shortens_lifetimes(self):
        means = {}
        for beta in (0.0, 0.5):
            rng = np.random.default_rng(6)
            cfg = GenConfig(beta_true=beta, t_max=20_000.0)
            means[beta] = np.mean([gen_unit(cfg, rng).V for _ in range(10_000)])
        assert means[0.5] < means[0.0]


class TestGenDataset:
    def test_exactly_one_censored(self):
        for seed in range(5):
            units = gen_dataset(GenConfig(N=20, censor_frac=0.05, seed=seed))
            assert len(units) == 20
            assert sum(u.delta == 0 for u in units) == 1

    def test_censored_before_latent_time(self):
        units = gen_dataset(GenConfig(N=40, censor_frac=0.25, seed=1))
        for u in units:
            if u.delta == 0:
                assert 0.5 * u.true_event_time <= u.V < u.true_event_time
                assert u.times.size == 0 or u.times[-1] <= u.V

    def test_deterministic(self):
        a = gen_dataset(GenConfig(seed=11))
        b = gen_dataset(GenConfig(seed=11))
        assert a == b
        assert [u.true_event_time for u in a] == [u.true_event_time for u in b]
        assert gen_dataset(GenConfig(seed=12)) != a

    def test_censoring_independent_of_lifetime(self):
        # selection is uniform over units: censored units' latent times are a random subsample
        long, cens = [], []
        for seed in range(200):
            units = gen_dataset(GenConfig(N=20, censor_frac=0.25, seed=seed))
            med = np.median([u.true_event_time for u in units])
            for u in units:
                long.append(u.true_event_time > med)
                cens.append(u.delta == 0)
        table = np.array([[np.sum(np.array(long) & np.array(cens)), np.sum(np.array(long) & ~np.array(cens))],
                          [np.sum(~np.array(long) & np.array(cens)), np.sum(~np.array(long) & ~np.array(cens))]])
        assert stats.chi2_contingency(table).pvalue > 0.01

    def test_shared_curvature_option(self):
        units = gen_dataset(GenConfig(N=5, a_per_unit=False, seed=2))
        assert len(units) == 5


class TestConfig:
    def test_sigma_symmetric_psd(self):
        S = GenConfig().Sigma_b
        np.testing.assert_array_equal(S, S.T)
        assert np.linalg.eigvalsh(S).min() > 0
        assert S[0, 2] == -4.5e-5
        np.testing.assert_array_equal(DEFAULT_SIGMA_B, S)

    def test_rejects_bad_censor_frac(self):
        with pytest.raises(ValidationError):
            GenConfig(censor_frac=1.0)

    def test_path_basis(self):
        np.testing.assert_array_equal(path_basis([2.0]), [[1.0, 2.0, 4.0]])

    def test_unit_record_validation(self):
        with pytest.raises(ValidationError):
            UnitRecord(id=1, times=[1.0, 1.0], Y=[0.0, 0.0], V=3.0, delta=1, w=[0.0])
        with pytest.raises(ValidationError):
            UnitRecord(id=1, times=[1.0, 4.0], Y=[0.0, 0.0], V=3.0, delta=1, w=[0.0])
        with pytest.raises(ValidationError):
            UnitRecord(id=1, times=[1.0], Y=[0.0], V=3.0, delta=2, w=[0.0])
