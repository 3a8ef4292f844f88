import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.mixture import GaussianMixture

from clearlab.gmm import (DegenerateFit, GmmFit, LossCache, clean_posterior, crossing_point, fit_em,
                          fit_or_uniform, normalize_losses)


def mixture(n=200, seed=0, means=(0.2, 2.5), std=0.05):
    rng = np.random.default_rng(seed)
    half = n // 2
    return np.abs(np.concatenate([rng.normal(means[0], std, half), rng.normal(means[1], std, n - half)]))


@pytest.mark.parametrize("seed", range(5))
def test_recovers_separated_mixture(seed):
    fit = fit_em(mixture(seed=seed))
    np.testing.assert_allclose(fit.means, [0.2, 2.5], rtol=0.05)
    np.testing.assert_allclose(fit.weights, [0.5, 0.5], atol=0.02)
    assert fit.converged
    assert abs(fit.weights.sum() - 1.0) < 1e-9
    assert (fit.stds >= 1e-4).all()


def test_matches_sklearn_oracle():
    x = np.concatenate([np.random.default_rng(1).gamma(2.0, 0.2, 300),
                        np.random.default_rng(2).normal(2.0, 0.4, 200)])
    ours = fit_em(x, max_iter=500, tol=1e-10)
    ref = GaussianMixture(2, tol=1e-10, max_iter=500, reg_covar=0.0, random_state=0,
                          means_init=np.percentile(x, [25, 75])[:, None]).fit(x[:, None])
    order = np.argsort(ref.means_[:, 0])
    np.testing.assert_allclose(ours.means, ref.means_[order, 0], rtol=1e-4)
    np.testing.assert_allclose(ours.weights, ref.weights_[order], rtol=1e-4)
    np.testing.assert_allclose(clean_posterior(ours, x), ref.predict_proba(x[:, None])[:, order[0]], atol=1e-4)


@given(st.integers(0, 10_000), st.integers(10, 300))
def test_log_likelihood_monotone(seed, n):
    rng = np.random.default_rng(seed)
    x = np.abs(np.concatenate([rng.normal(0.3, 0.2, n), rng.exponential(1.5, n // 2 + 2)]))
    ll = np.array(fit_em(x).log_likelihood)
    assert (np.diff(ll) >= -1e-8 * np.abs(ll[:-1]).clip(1)).all()


def test_separated_posterior():
    fit = GmmFit(np.array([0.5, 0.5]), np.array([0.2, 2.5]), np.array([0.05, 0.05]))
    assert clean_posterior(fit, 0.2) > 0.999
    assert clean_posterior(fit, 2.5) < 0.001


def test_equal_components_give_half():
    fit = GmmFit(np.array([0.5, 0.5]), np.array([1.0, 1.0]), np.array([0.3, 0.3]))
    np.testing.assert_allclose(clean_posterior(fit, np.linspace(0, 3, 7)), 0.5)


def test_crossing_point_is_half():
    fit = fit_em(mixture(seed=3))
    assert clean_posterior(fit, crossing_point(fit)) == pytest.approx(0.5, abs=1e-9)


@given(st.floats(0.0, 5.0), st.floats(0.05, 2.0))
def test_posterior_bounds_and_complement(loss, sd):
    fit = GmmFit(np.array([0.3, 0.7]), np.array([0.5, 2.0]), np.array([sd, sd]))
    p = clean_posterior(fit, loss)
    assert 0.0 <= p <= 1.0
    assert p + (1.0 - p) == 1.0


def test_posterior_non_increasing_between_means_equal_std():
    fit = GmmFit(np.array([0.4, 0.6]), np.array([0.5, 2.0]), np.array([0.4, 0.4]))
    p = clean_posterior(fit, np.linspace(0.5, 2.0, 200))
    assert (np.diff(p) <= 1e-15).all()


def test_degenerate_and_small_inputs():
    with pytest.raises(DegenerateFit):
        fit_em(np.full(50, 0.7))
    fit = fit_or_uniform(np.full(50, 0.7))
    assert fit.degenerate and clean_posterior(fit, 0.7) == 0.5
    with pytest.raises(ValueError, match="at least 4"):
        fit_em([0.1, 0.2, 0.3])


def test_loss_cache_validation():
    with pytest.raises(ValueError):
        LossCache(np.array([0.1, -0.2]), 1)
    with pytest.raises(ValueError):
        LossCache(np.array([0.1, np.nan]), 1)
    assert len(LossCache(np.zeros(5), 2)) == 5


def test_normalisation():
    np.testing.assert_allclose(normalize_losses(np.array([1.0, 3.0, 2.0])), [0.0, 1.0, 0.5])
    np.testing.assert_array_equal(normalize_losses(np.ones(3)), np.zeros(3))


def test_deterministic_fit():
    x = mixture(seed=7)
    a, b = fit_em(x), fit_em(x)
    assert a.means.tobytes() == b.means.tobytes() and a.log_likelihood == b.log_likelihood
