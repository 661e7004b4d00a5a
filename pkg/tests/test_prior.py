import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from diffwm import make_linear
from diffwm.prior import (ContentPrior, PriorError, classify, component_score, log_marginal,
                          make_prior, marginal_variance, responsibilities, sample_content, score)

S = make_linear()


def small_prior(K=3, d=4, seed=0, sigma=0.7):
    rng = np.random.default_rng(seed)
    w = rng.random(K) + 0.2
    return ContentPrior(w / w.sum(), 2 * rng.standard_normal((K, d)), sigma)


def test_k1_component_always_zero(prior1, rng):
    C, _ = sample_content(prior1, rng, 200)
    assert np.all(C == 0)


def test_sigma_zero_returns_mean(rng):
    p = ContentPrior(np.array([0.5, 0.5]), np.array([[1.0, 2.0], [-3.0, 0.5]]), 0.0)
    C, z = sample_content(p, rng, 50)
    assert np.array_equal(z, p.means[C])


def test_component_frequencies(rng):
    p = ContentPrior(np.array([0.5, 0.5]), np.zeros((2, 3)), 1.0)
    N = 20000
    C, _ = sample_content(p, rng, N)
    assert abs(C.mean() - 0.5) < 3 / math.sqrt(N)


def test_sample_single_shape(prior, rng):
    c, z = sample_content(prior, rng)
    assert isinstance(c, int) and z.shape == (64,)


def test_marginal_variance_examples(prior1):
    assert marginal_variance(prior1, S, 0) == pytest.approx(1.0)
    p = ContentPrior(np.ones(1), np.zeros((1, 2)), 3.0)
    assert marginal_variance(p, S, 0) == pytest.approx(9.0)
    # abar near 0 at the end of the DDPM schedule
    assert marginal_variance(p, S, 1000) == pytest.approx(1.0, abs=1e-3)
    sched = make_linear(1, 0.5, 0.5)
    assert marginal_variance(prior1, sched, 1) == pytest.approx(1.0)


def test_log_marginal_peak(prior1):
    t = 300
    ab = S.alpha_bar[t]
    v = marginal_variance(prior1, S, t)
    x = math.sqrt(ab) * prior1.means[0]
    assert log_marginal(prior1, S, x, t) == pytest.approx(-0.5 * 64 * math.log(2 * math.pi * v), rel=1e-12)


def test_log_marginal_translation(rng):
    # t = 0 so the shift applies directly to the means
    p = small_prior()
    shift = rng.standard_normal(4)
    q = ContentPrior(p.weights, p.means + shift, p.sigma)
    x = rng.standard_normal((10, 4))
    assert np.allclose(log_marginal(p, S, x, 0), log_marginal(q, S, x + shift, 0), atol=1e-12)


def test_log_marginal_naive_sum(rng):
    p = small_prior(K=2, d=3)
    t = 200
    ab, v = S.alpha_bar[t], marginal_variance(p, S, t)
    for _ in range(10):
        x = rng.standard_normal(3)
        naive = sum(w * multivariate_normal(math.sqrt(ab) * m, v * np.eye(3)).pdf(x)
                    for w, m in zip(p.weights, p.means))
        assert log_marginal(p, S, x, t) == pytest.approx(math.log(naive), rel=1e-10)


def test_score_single_gaussian(prior1, rng):
    t = 400
    ab, v = S.alpha_bar[t], marginal_variance(prior1, S, t)
    x = rng.standard_normal((5, 64))
    assert np.allclose(score(prior1, S, x, t), (math.sqrt(ab) * prior1.means[0] - x) / v, atol=1e-13)
    assert np.allclose(score(prior1, S, math.sqrt(ab) * prior1.means[0], t), 0.0, atol=1e-13)


def fd_grad(f, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_score_finite_differences(rng):
    p = small_prior(K=3, d=4)
    for _ in range(20):
        t = int(rng.integers(0, 1001))
        x = 2 * rng.standard_normal(4)
        fd = fd_grad(lambda y: log_marginal(p, S, y, t), x)
        s = score(p, S, x, t)
        assert np.linalg.norm(fd - s) / np.linalg.norm(s) < 1e-5


def test_responsibilities_examples(prior1, rng):
    assert np.allclose(responsibilities(prior1, S, rng.standard_normal(64), 10), [1.0])
    p = ContentPrior(np.array([0.5, 0.5]), np.array([[1.0, 0.0], [-1.0, 0.0]]), 1.0)
    assert np.allclose(responsibilities(p, S, np.array([0.0, 5.0]), 0), [0.5, 0.5], atol=1e-15)


def test_responsibilities_well_separated(prior):
    t = 100
    ab, v = S.alpha_bar[t], marginal_variance(prior, S, t)
    x = math.sqrt(ab) * prior.means[1]
    r = responsibilities(prior, S, x, t)
    # independent density-ratio oracle
    sq = ((math.sqrt(ab) * prior.means - x) ** 2).sum(1)
    ratio = np.exp(-0.5 * (sq - sq[1]) / v)
    assert r[1] == pytest.approx(1 / ratio.sum(), rel=1e-12)
    assert r[1] > 0.999


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.floats(0.1, 50), st.integers(0, 2**32 - 1))
def test_simplex_property(t, scale, seed):
    p = make_prior()
    x = scale * np.random.default_rng(seed).standard_normal((8, 64))
    r = responsibilities(p, S, x, t)
    assert np.all(r >= 0)
    assert np.all(np.abs(r.sum(-1) - 1) <= 1e-12)


def test_component_score_and_classify(prior, rng):
    C, z = sample_content(prior, rng, 100)
    assert np.array_equal(classify(prior, S, z, 0), C)
    t = 50
    ab, v = S.alpha_bar[t], marginal_variance(prior, S, t)
    x = rng.standard_normal((100, 64))
    want = (math.sqrt(ab) * prior.means[C] - x) / v
    assert np.allclose(component_score(prior, S, x, t, C), want)


def test_make_prior_separation():
    p = make_prior(d=64, K=4, sigma=1.5, mean_separation=8.0)
    dmin = min(np.linalg.norm(p.means[i] - p.means[j]) for i, j in itertools.combinations(range(4), 2))
    assert dmin == pytest.approx(12.0, rel=1e-12)
    assert np.allclose(p.weights, 0.25)
    one = make_prior(K=1, mean_separation=8.0)
    assert np.linalg.norm(one.means[0]) == pytest.approx(8 / math.sqrt(2))


def test_make_prior_deterministic():
    assert np.array_equal(make_prior(seed=5).means, make_prior(seed=5).means)


@pytest.mark.parametrize("kw", [dict(weights=[0.5, 0.6], means=np.zeros((2, 2)), sigma=1.0),
                                dict(weights=[1.0], means=np.zeros((2, 2)), sigma=1.0),
                                dict(weights=[1.0], means=np.zeros((1, 2)), sigma=-1.0),
                                dict(weights=[1.0], means=np.full((1, 2), np.nan), sigma=1.0)])
def test_prior_validation(kw):
    with pytest.raises(PriorError):
        ContentPrior(**kw)


def test_dimension_mismatch(prior):
    with pytest.raises(PriorError):
        score(prior, S, np.zeros(63), 10)
