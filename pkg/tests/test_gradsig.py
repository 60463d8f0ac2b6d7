import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradprint.errors import DegenerateOutput, DimensionMismatch
from gradprint.gradsig import (
    GradientFactors,
    Moments,
    combine,
    exact_stats,
    forward,
    gradient_factors,
    input_gradient,
    loss,
    sampled_stats,
    stats_of_values,
)


def brute_stats(values):
    """Textbook population moments, computed directly."""
    v = np.asarray(values, dtype=np.float64).ravel()
    mu = v.mean()
    sd = np.sqrt(((v - mu) ** 2).mean())
    skew = ((v - mu) ** 3).mean() / sd**3
    kurt = ((v - mu) ** 4).mean() / sd**4 - 3
    return mu, sd, skew, kurt


def test_forward_examples(rng):
    assert np.array_equal(forward(np.array([1.0, 2.0, 3.0]), np.eye(3)), [1, 2, 3])
    assert np.array_equal(forward(np.ones(4), np.zeros((2, 4))), [0, 0])
    W, x = rng.normal(size=(5, 7)), rng.normal(size=7)
    naive = [sum(W[i, j] * x[j] for j in range(7)) for i in range(5)]
    assert np.allclose(forward(x, W), naive, rtol=1e-6, atol=1e-12)
    with pytest.raises(DimensionMismatch):
        forward(np.ones(3), np.ones((2, 4)))


def test_loss_examples(rng):
    assert loss(np.array([3.0, 4.0])) == 5.0
    assert loss(np.zeros(3)) == 0.0
    o = rng.normal(size=11)
    assert abs(loss(o) - np.sqrt(np.sum(o**2))) < 1e-6


def test_identity_gradient():
    x = np.array([1.0, 0.0])
    gf = gradient_factors(x, forward(x, np.eye(2)))
    assert np.array_equal(gf.materialize(), [[1, 0], [0, 0]])
    with pytest.raises(DegenerateOutput):
        gradient_factors(x, np.zeros(2))


def test_gradient_matches_finite_differences(rng):
    W, x = rng.normal(size=(8, 16)), rng.normal(size=16)
    G = gradient_factors(x, forward(x, W)).materialize()
    assert G.shape == W.shape
    h = 1e-3
    fd = np.empty_like(W)
    for i in range(8):
        for j in range(16):
            Wp, Wm = W.copy(), W.copy()
            Wp[i, j] += h
            Wm[i, j] -= h
            fd[i, j] = (loss(forward(x, Wp)) - loss(forward(x, Wm))) / (2 * h)
    assert np.max(np.abs(G - fd) / np.maximum(np.abs(fd), 1e-3)) < 1e-4


def test_input_gradient_matches_finite_differences(rng):
    W, x = rng.normal(size=(6, 9)), rng.normal(size=9)
    o = forward(x, W)
    g = input_gradient(o / np.linalg.norm(o), W)
    h = 1e-3
    fd = np.array([(loss(forward(x + h * e, W)) - loss(forward(x - h * e, W))) / (2 * h) for e in np.eye(9)])
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)) < 1e-4
    assert np.allclose(input_gradient(np.array([0.6, 0.8]), np.eye(2)), [0.6, 0.8])
    with pytest.raises(DimensionMismatch):
        input_gradient(np.ones(3), np.eye(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32))
def test_exact_stats_equal_materialized(m, d, seed):
    r = np.random.default_rng(seed)
    x, W = r.normal(size=d), r.normal(size=(m, d))
    gf = gradient_factors(x, forward(x, W))
    G = gf.materialize()
    s = exact_stats(gf)
    assert abs(s.fro_norm - np.linalg.norm(x)) <= 1e-5 * np.linalg.norm(x)
    assert abs(s.fro_norm - np.linalg.norm(G)) <= 1e-9 * max(1.0, s.fro_norm)
    assert abs(s.mean - G.mean()) < 1e-6
    assert abs(s.mean - gf.o_hat.mean() * x.mean()) < 1e-12
    if m * d >= 2 and not s.degenerate:
        mu, sd, skew, kurt = brute_stats(G)
        assert abs(s.std - sd) < 1e-6
        # higher standardized moments lose precision when std is tiny
        scale = max(1.0, 1e-6 / max(sd, 1e-300))
        assert abs(s.skewness - skew) < 1e-6 * max(1.0, abs(skew)) * scale
        assert abs(s.kurtosis - kurt) < 1e-6 * max(1.0, abs(kurt)) * scale


def test_50x40_case(rng):
    x, W = rng.normal(size=40), rng.normal(size=(50, 40))
    gf = gradient_factors(x, forward(x, W))
    s = exact_stats(gf)
    mu, sd, skew, kurt = brute_stats(gf.materialize())
    assert np.allclose([s.mean, s.std, s.skewness, s.kurtosis], [mu, sd, skew, kurt], rtol=1e-6, atol=1e-6)


def test_constant_gradient_is_degenerate():
    gf = GradientFactors(np.ones(16), np.ones(1))
    for s in (exact_stats(gf), sampled_stats(gf, 100, seed=1)):
        assert s.std == 0.0 and s.skewness == 0.0 and s.kurtosis == 0.0 and s.degenerate
        assert s.mean == pytest.approx(1.0)


def test_sampled_mean_within_three_standard_errors(rng):
    x, W = rng.normal(size=1000), rng.normal(size=(1000, 1000))
    gf = gradient_factors(x, forward(x, W))
    exact = exact_stats(gf)
    s = sampled_stats(gf, 500_000, seed=3)
    assert s.sample_count == 500_000
    assert abs(s.mean - exact.mean) < 3 * exact.std / np.sqrt(500_000)
    assert s.fro_norm == exact.fro_norm


def test_sampled_kurtosis_for_product_distribution():
    x = np.random.default_rng(4).normal(size=1_000_000)
    gf = GradientFactors(x, np.ones(1))
    exact = exact_stats(gf)
    s = sampled_stats(gf, 500_000, seed=9)
    # asymptotic standard error of excess kurtosis
    se = np.sqrt(24 / 500_000)
    assert abs(s.kurtosis - exact.kurtosis) < 3 * se
    assert abs(s.skewness - exact.skewness) < 3 * np.sqrt(6 / 500_000)


def test_sampled_mean_error_rate(rng):
    x, W = rng.normal(size=64), rng.normal(size=(48, 64))
    gf = gradient_factors(x, forward(x, W))
    exact = exact_stats(gf)
    n = 2000
    misses = sum(abs(sampled_stats(gf, n, seed).mean - exact.mean) >= 3 * exact.std / np.sqrt(n) for seed in range(200))
    assert misses <= 2


def test_sample_size_limits():
    gf = GradientFactors(np.arange(1.0, 5.0), np.ones(2) / np.sqrt(2))
    with pytest.raises(ValueError):
        sampled_stats(gf, 1)
    with pytest.raises(ValueError):
        sampled_stats(gf, 500_001)


def test_sampled_is_seeded():
    gf = GradientFactors(np.arange(1.0, 30.0), np.ones(3) / np.sqrt(3))
    assert sampled_stats(gf, 100, 5) == sampled_stats(gf, 100, 5)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(arrays(np.float64, st.integers(1, 30), elements=finite), min_size=1, max_size=5))
def test_moment_merge_equals_pooled(chunks):
    pooled = Moments.from_values(np.concatenate(chunks))
    merged = combine(Moments.from_values(c) for c in chunks)
    scale = max(1.0, float(np.abs(np.concatenate(chunks)).max()))
    assert merged.n == pooled.n
    assert abs(merged.mean - pooled.mean) <= 1e-9 * scale
    for a, b, p in ((merged.M2, pooled.M2, 2), (merged.M3, pooled.M3, 3), (merged.M4, pooled.M4, 4)):
        assert abs(a - b) <= 1e-7 * pooled.n * scale**p


def test_reweighted_keeps_statistics(rng):
    v = rng.normal(size=500) ** 3
    m = Moments.from_values(v)
    a, b = m.stats(1.0), m.reweighted(77.0).stats(1.0)
    assert np.allclose([a.mean, a.std, a.skewness, a.kurtosis], [b.mean, b.std, b.skewness, b.kurtosis])


def test_stats_of_values_norm(rng):
    v = rng.normal(size=100)
    s = stats_of_values(v)
    assert s.fro_norm == pytest.approx(np.linalg.norm(v))
    mu, sd, skew, kurt = brute_stats(v)
    assert np.allclose([s.mean, s.std, s.skewness, s.kurtosis], [mu, sd, skew, kurt])
