import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import multivariate_normal

from trendmap.gmm import (
    EstimationError,
    GmmComponent,
    GmmModel,
    denormalize,
    density,
    estimate,
    load_gmm,
    sample,
    save_gmm,
)
from trendmap.matrix import Normalization
from trendmap.som import GridSpec, SomModel, TrainingSchedule, train


def mixture(alphas, mus, sigmas, covariance="full"):
    comps = [GmmComponent(k, a, np.atleast_1d(np.asarray(m, float)), np.asarray(s, float))
             for k, (a, m, s) in enumerate(zip(alphas, mus, sigmas))]
    return GmmModel(tuple(comps), grid=GridSpec(1, len(comps)), covariance=covariance)


# ---------------------------------------------------------------- estimation


def test_single_node_is_data_moments():
    X = np.random.default_rng(0).normal(size=(200, 3)) @ np.array([[2, 0, 0], [0.5, 1, 0], [0, 0.3, 0.2]])
    m = SomModel(GridSpec(1, 1), X.mean(axis=0, keepdims=True))
    g = estimate(m, X, r_est=0.5)
    (c,) = g.components
    assert c.alpha == 1.0
    np.testing.assert_allclose(c.mu, X.mean(axis=0), atol=1e-12)
    ridge = 1e-6 * X.var(axis=0).mean()
    np.testing.assert_allclose(c.sigma, np.cov(X.T, ddof=0) + ridge * np.eye(3), atol=1e-12)


def test_two_nodes_tiny_radius_is_per_bmu():
    X = np.array([[0.0, 0.1], [0.2, -0.1], [0.1, 0.0], [5.0, 5.1], [5.2, 4.9], [4.9, 5.0]])
    m = SomModel(GridSpec(1, 2), np.array([[0.0, 0.0], [5.0, 5.0]]))
    g = estimate(m, X, r_est=1e-6)
    np.testing.assert_allclose(g.alphas, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(g.components[0].mu, X[:3].mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(g.components[1].mu, X[3:].mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(g.components[1].sigma[0, 0], X[3:, 0].var() + 1e-6 * X.var(axis=0).mean(),
                               atol=1e-12)


def test_neighbourhood_weighting_matches_direct_sum():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 2))
    W = rng.normal(size=(4, 2))
    m = SomModel(GridSpec(2, 2), W)
    r = 0.8
    g = estimate(m, X, r_est=r, min_weight=0.0)
    # direct per-sample weighting
    bmu = np.argmin(((X[:, None] - W[None]) ** 2).sum(axis=2), axis=1)
    xy = m.grid.coords()
    d2 = ((xy[:, None] - xy[None]) ** 2).sum(axis=2)
    C = np.exp(-d2[bmu] / (2 * r))  # (n, K)
    ridge = 1e-6 * X.var(axis=0).mean()
    alphas = C.sum(axis=0) / C.sum()
    np.testing.assert_allclose(g.alphas, alphas, atol=1e-12)
    for k, comp in enumerate(g.components):
        w = C[:, k]
        mu = w @ X / w.sum()
        S = ((X - mu) * w[:, None]).T @ (X - mu) / w.sum() + ridge * np.eye(2)
        np.testing.assert_allclose(comp.mu, mu, atol=1e-12)
        np.testing.assert_allclose(comp.sigma, S, atol=1e-12)


def test_low_weight_nodes_dropped_and_renormalised():
    X = np.vstack([np.zeros((5, 1)), np.full((5, 1), 10.0)])
    m = SomModel(GridSpec(1, 3), np.array([[0.0], [10.0], [100.0]]))
    g = estimate(m, X, r_est=1e-3)
    assert [c.node for c in g.components] == [0, 1]
    assert sum(g.alphas) == pytest.approx(1.0, abs=1e-15)
    assert g.alpha_grid().shape == (1, 3) and g.alpha_grid()[0, 2] == 0.0


def test_all_nodes_below_threshold_is_error():
    m = SomModel(GridSpec(1, 1), np.zeros((1, 2)))
    with pytest.raises(EstimationError):
        estimate(m, np.zeros((1, 2)), min_weight=5.0)


def test_diag_covariance_matches_full_diagonal():
    X = np.random.default_rng(5).normal(size=(80, 3))
    m = train(X, GridSpec(2, 2), TrainingSchedule.default(GridSpec(2, 2), 80, epochs=2), progress=False)
    full = estimate(m, X, covariance="full")
    diag = estimate(m, X, covariance="diag")
    for a, b in zip(full.components, diag.components):
        np.testing.assert_allclose(np.diag(a.sigma), b.sigma, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 4), st.floats(0.05, 5))
def test_alphas_sum_to_one_and_covariances_factor(seed, rows, cols, r):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 3))
    m = SomModel(GridSpec(rows, cols), rng.normal(size=(rows * cols, 3)))
    try:
        g = estimate(m, X, r_est=r)
    except EstimationError:
        return
    assert abs(g.alphas.sum() - 1.0) <= 1e-9 and np.all(g.alphas >= 0)
    for c in g.components:
        np.linalg.cholesky(c.sigma)
        np.testing.assert_array_equal(c.sigma, c.sigma.T)


# ---------------------------------------------------------------- density


def test_standard_normal_peak():
    g = mixture([1.0], [[0.0]], [[[1.0]]])
    assert density(g, [0.0]) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-15)


def test_symmetric_two_component_midpoint():
    a = 1.3
    g = mixture([0.5, 0.5], [[-a], [a]], [[[0.7]], [[0.7]]])
    expect = math.exp(-a * a / (2 * 0.7)) / math.sqrt(2 * math.pi * 0.7)
    assert density(g, [0.0]) == pytest.approx(expect, rel=1e-13)


def test_density_against_scipy():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(3, 3))
    S1, S2 = A @ A.T + np.eye(3), np.diag([0.5, 2.0, 1.0])
    g = mixture([0.3, 0.7], [[0, 1, 2], [-1, 0, 1]], [S1, S2])
    X = rng.normal(size=(20, 3))
    ref = 0.3 * multivariate_normal([0, 1, 2], S1).pdf(X) + 0.7 * multivariate_normal([-1, 0, 1], S2).pdf(X)
    np.testing.assert_allclose(density(g, X), ref, rtol=1e-10)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_one_dimensional_density_integrates_to_one(k):
    mus = [-2.0, 0.5, 3.0][:k]
    sds = [0.6, 1.0, 0.4][:k]
    alphas = np.array([0.2, 0.5, 0.3][:k])
    g = mixture(alphas / alphas.sum(), [[m] for m in mus], [[[s * s]] for s in sds])
    lo, hi = min(m - 8 * s for m, s in zip(mus, sds)), max(m + 8 * s for m, s in zip(mus, sds))
    total, _ = integrate.quad(lambda x: density(g, [x]), lo, hi, points=mus, limit=200)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_singular_covariance_rejected():
    with pytest.raises(ValueError):
        mixture([1.0], [[0.0, 0.0]], [[[1.0, 1.0], [1.0, 1.0]]])


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(0.01, 10))
def test_density_non_negative(x, s):
    g = mixture([0.4, 0.6], [[0.0], [3.0]], [[[s]], [[1.0]]])
    assert density(g, [x]) >= 0


# ---------------------------------------------------------------- sampling


def test_tiny_covariance_samples_at_mean():
    g = mixture([1.0], [[1.0, -2.0]], [np.eye(2) * 1e-14])
    np.testing.assert_allclose(sample(g, 100, seed=1), np.tile([1.0, -2.0], (100, 1)), atol=1e-5)


def test_component_frequencies():
    g = mixture([0.3, 0.7], [[0.0], [10.0]], [[[1.0]], [[1.0]]])
    _, comp = sample(g, 100_000, seed=2, return_components=True)
    assert abs(np.mean(comp == 0) - 0.3) <= 0.01


def test_sample_mean_clt_bound():
    S = np.array([[2.0, 0.3], [0.3, 0.5]])
    g = mixture([1.0], [[1.0, -1.0]], [S])
    n = 100_000
    X = sample(g, n, seed=3)
    sd = np.sqrt(np.diag(S))
    assert np.all(np.abs(X.mean(axis=0) - [1.0, -1.0]) <= 4 * sd / math.sqrt(n))
    np.testing.assert_allclose(np.cov(X.T), S, atol=0.03)


def test_diag_sampling():
    g = mixture([1.0], [[0.0, 0.0]], [np.array([4.0, 0.25])], covariance="diag")
    X = sample(g, 50_000, seed=4)
    np.testing.assert_allclose(X.std(axis=0), [2.0, 0.5], rtol=0.02)


def test_sampling_deterministic_and_validated():
    g = mixture([0.5, 0.5], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    np.testing.assert_array_equal(sample(g, 10, seed=9), sample(g, 10, seed=9))
    with pytest.raises(ValueError):
        sample(g, 0)


# ---------------------------------------------------------------- denormalisation


def test_denormalize_examples():
    X = np.array([[0.3, 2.0]])
    np.testing.assert_array_equal(denormalize(X, Normalization()), X)
    out = denormalize(np.array([[1.0]]), Normalization(True, "l1"), [1.0])
    assert out[0, 0] == pytest.approx(math.e - 1, rel=1e-15)
    np.testing.assert_array_equal(denormalize(np.zeros((2, 3)), Normalization(True, "l2"), [3.0, 4.0]), 0.0)


def test_denormalize_clamps_and_scales():
    out = denormalize(np.array([[-0.5, 0.5]]), Normalization(False, "max"), [4.0])
    np.testing.assert_array_equal(out, [[0.0, 2.0]])
    with pytest.raises(ValueError):
        denormalize(np.ones((1, 1)), Normalization(False, "l1"), None)


# ---------------------------------------------------------------- serialisation


@pytest.mark.parametrize("cov", ["full", "diag"])
def test_gmm_round_trip(cov):
    X = np.random.default_rng(7).normal(size=(60, 2))
    grid = GridSpec(2, 2)
    m = train(X, grid, TrainingSchedule.default(grid, 60, epochs=2), progress=False)
    g = estimate(m, X, covariance=cov)
    buf = io.StringIO()
    save_gmm(g, buf)
    buf.seek(0)
    back = load_gmm(buf)
    assert back.covariance == cov and back.grid == grid
    for a, b in zip(g.components, back.components):
        assert a.node == b.node and a.alpha == b.alpha
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.sigma, b.sigma)
