import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsd.errors import DimensionMismatch, InvariantViolation, TooFewSamples
from fsd.mixture import EMConfig, FeatureStats, GaussianMixture, fit_gmm


def mp_log_density(model: GaussianMixture, x) -> float:
    """Raw-space mixture log density in 50-digit arithmetic."""
    mpmath.mp.dps = 50
    mean, std = model.raw_means(), np.sqrt(model.raw_variances())
    total = mpmath.mpf(0)
    for w, mu, sd in zip(model.weights, mean, std):
        term = mpmath.mpf(float(w))
        for xi, m, s in zip(x, mu, sd):
            s = mpmath.mpf(float(s))
            u = (mpmath.mpf(float(xi)) - mpmath.mpf(float(m))) / s
            term *= mpmath.exp(-u * u / 2) / (s * mpmath.sqrt(2 * mpmath.pi))
        total += term
    return float(mpmath.log(total))


def random_model(rng, c=3, d=4):
    stats = FeatureStats(rng.normal(size=d), rng.uniform(0.5, 2.0, d))
    w = rng.dirichlet(np.ones(c))
    return GaussianMixture(w, rng.normal(size=(c, d)), rng.uniform(0.3, 2.0, (c, d)), stats)


class TestStats:
    def test_population_std(self):
        x = np.array([[1.0, 5.0], [3.0, 5.0]])
        st_ = FeatureStats.fit(x)
        np.testing.assert_allclose(st_.mean, [2.0, 5.0])
        np.testing.assert_allclose(st_.std, [1.0, 1e-8])

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_transform_inverse(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(3, 5, size=(20, 4))
        s = FeatureStats.fit(x)
        z = s.transform(x)
        np.testing.assert_allclose(z.mean(0), 0, atol=1e-12)
        np.testing.assert_allclose(z.std(0), 1, rtol=1e-12)
        np.testing.assert_allclose(s.inverse(z), x, rtol=1e-12, atol=1e-12)


class TestDensity:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_high_precision_oracle(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(rng)
        for _ in range(3):
            x = model.raw_means()[0] + rng.normal(size=4) * 2
            got = model.log_likelihood(x)
            ref = mp_log_density(model, x)
            assert abs(got - ref) <= 1e-10 * abs(ref) + 1e-12

    def test_far_tail_finite(self, rng):
        model = random_model(rng)
        x = model.raw_means()[0] + 50 * np.sqrt(model.raw_variances()).max(0)
        ll = model.log_likelihood(x)
        assert np.isfinite(ll)
        assert abs(ll - mp_log_density(model, x)) <= 1e-10 * abs(ll)

    def test_standardization_identity(self, rng):
        model = random_model(rng)
        x = rng.normal(size=(7, 4))
        z = model.stats.transform(x)
        np.testing.assert_allclose(
            model.score_samples(x), model.score_standardized(z) - np.log(model.stats.std).sum(), rtol=1e-13
        )

    def test_single_vector_only(self, rng):
        model = random_model(rng)
        with pytest.raises(DimensionMismatch):
            model.log_likelihood(np.zeros((2, 4)))
        with pytest.raises(DimensionMismatch):
            model.log_likelihood(np.zeros(3))

    def test_validation(self, rng):
        stats = FeatureStats(np.zeros(2), np.ones(2))
        with pytest.raises(InvariantViolation):
            GaussianMixture([0.5, 0.6], np.zeros((2, 2)), np.ones((2, 2)), stats)
        with pytest.raises(InvariantViolation):
            GaussianMixture([1.0], np.zeros((1, 2)), np.full((1, 2), 1e-9), stats)
        with pytest.raises(InvariantViolation):
            GaussianMixture([1.0], np.array([[np.nan, 0.0]]), np.ones((1, 2)), stats)


class TestEM:
    def test_single_component_closed_form(self, rng):
        x = rng.normal([1, -2, 4], [0.5, 2, 3], size=(200, 3))
        res = fit_gmm(x, 1)
        g = res.model
        np.testing.assert_allclose(g.weights, [1.0])
        np.testing.assert_allclose(g.raw_means()[0], x.mean(0), rtol=1e-10)
        np.testing.assert_allclose(g.raw_variances()[0], x.var(0), rtol=1e-10)

    def test_identical_samples(self):
        x = np.tile([0.3, 0.7], (10, 1))
        g = fit_gmm(x, 1).model
        assert np.all(g.variances >= g.var_floor)
        assert np.isfinite(g.log_likelihood(x[0]))

    def test_planted_two_components(self, rng):
        a = rng.normal([-3, 0], 0.5, size=(150, 2))
        b = rng.normal([3, 1], 0.5, size=(150, 2))
        g = fit_gmm(np.vstack([a, b]), 2).model
        order = np.argsort(g.raw_means()[:, 0])
        np.testing.assert_allclose(g.raw_means()[order], [[-3, 0], [3, 1]], atol=0.15)
        np.testing.assert_allclose(g.weights, [0.5, 0.5], atol=0.01)
        np.testing.assert_allclose(g.raw_variances()[order], 0.25, rtol=0.3)

    @pytest.mark.parametrize("seed", range(4))
    def test_monotone_trace(self, seed):
        rng = np.random.default_rng(seed)
        x = np.vstack([rng.normal(m, 1.0, size=(60, 5)) for m in (-2, 0, 3)])
        res = fit_gmm(x, 4, EMConfig(max_iter=100, tol=0.0, seed=seed))
        tr = np.asarray(res.ll_trace)
        assert np.all(np.diff(tr) >= -1e-9)

    def test_deterministic(self, rng):
        x = rng.normal(size=(80, 3))
        a, b = fit_gmm(x, 3).model, fit_gmm(x, 3).model
        for f in ("weights", "means", "variances"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()

    def test_too_few_samples(self, rng):
        with pytest.raises(TooFewSamples):
            fit_gmm(rng.normal(size=(2, 3)), 3)
