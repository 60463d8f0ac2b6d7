"""Gradient signature of a single linear layer.

For ``o = W x`` and ``L = ||o||``, the weight gradient is the rank-1 matrix
``G = o_hat x^T`` (shape ``[m, d]`` like ``W``) with ``o_hat = o / ||o||``.
``G`` is kept in factored form: its Frobenius norm is ``||x||`` and its raw
element moments factorize, so statistics never need the full matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateOutput, DimensionMismatch
from .rng import SplitMix64

MAX_SAMPLES = 500_000

# relative std below which a distribution is treated as constant
_DEGENERATE_RTOL = 1e-7


def forward(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``o = W x`` for ``W`` stored ``[out, in]``, accumulated in float64."""
    x = np.asarray(x)
    W = np.asarray(W)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise DimensionMismatch(f"cannot apply W{list(W.shape)} to x{list(x.shape)}")
    return W.astype(np.float64) @ x.astype(np.float64)


def loss(o: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(o, dtype=np.float64)))


@dataclass(frozen=True)
class GradientFactors:
    x: np.ndarray  # [d]
    o_hat: np.ndarray  # [m]

    @property
    def shape(self) -> tuple[int, int]:
        return self.o_hat.shape[0], self.x.shape[0]

    @property
    def fro_norm(self) -> float:
        return float(np.linalg.norm(self.x) * np.linalg.norm(self.o_hat))

    def materialize(self) -> np.ndarray:
        return np.outer(self.o_hat, self.x)


def gradient_factors(x: np.ndarray, o: np.ndarray) -> GradientFactors:
    o = np.asarray(o, dtype=np.float64)
    norm = np.linalg.norm(o)
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateOutput("layer output is zero; gradient of ||o|| is undefined")
    return GradientFactors(np.asarray(x, dtype=np.float64), o / norm)


def input_gradient(o_hat: np.ndarray, W: np.ndarray) -> np.ndarray:
    """dL/dx = o_hat^T W."""
    o_hat = np.asarray(o_hat, dtype=np.float64)
    W = np.asarray(W)
    if W.ndim != 2 or o_hat.shape != (W.shape[0],):
        raise DimensionMismatch(f"o_hat{list(o_hat.shape)} does not match W{list(W.shape)}")
    return o_hat @ W.astype(np.float64)


@dataclass(frozen=True)
class LayerStats:
    mean: float
    std: float
    fro_norm: float
    skewness: float | None = None
    kurtosis: float | None = None
    sample_count: int = 0
    degenerate: bool = False


@dataclass(frozen=True)
class Moments:
    """Weight, mean and central power sums ``M_k = sum (v - mean)^k`` of a sample.

    Two samples combine exactly with :meth:`merge`, so pooled statistics can
    be formed without keeping the samples around.
    """

    n: float
    mean: float
    M2: float
    M3: float
    M4: float

    @classmethod
    def from_values(cls, values: np.ndarray) -> "Moments":
        v = np.asarray(values, dtype=np.float64).ravel()
        mean = float(v.mean())
        dev = v - mean
        sq = dev * dev
        return cls(float(v.size), mean, float(sq.sum()), float((sq * dev).sum()), float((sq * sq).sum()))

    @classmethod
    def from_raw(cls, raw: np.ndarray, n: float) -> "Moments":
        r1, r2, r3, r4 = (float(v) for v in raw)
        m2 = r2 - r1 * r1
        m3 = r3 - 3 * r1 * r2 + 2 * r1**3
        m4 = r4 - 4 * r1 * r3 + 6 * r1 * r1 * r2 - 3 * r1**4
        return cls(float(n), r1, n * max(m2, 0.0), n * m3, n * max(m4, 0.0))

    def reweighted(self, n: float) -> "Moments":
        f = n / self.n
        return Moments(float(n), self.mean, self.M2 * f, self.M3 * f, self.M4 * f)

    def merge(self, other: "Moments") -> "Moments":
        na, nb = self.n, other.n
        n = na + nb
        delta = other.mean - self.mean
        mean = self.mean + delta * nb / n
        M2 = self.M2 + other.M2 + delta**2 * na * nb / n
        M3 = (
            self.M3 + other.M3
            + delta**3 * na * nb * (na - nb) / n**2
            + 3 * delta * (na * other.M2 - nb * self.M2) / n
        )
        M4 = (
            self.M4 + other.M4
            + delta**4 * na * nb * (na * na - na * nb + nb * nb) / n**3
            + 6 * delta**2 * (na * na * other.M2 + nb * nb * self.M2) / n**2
            + 4 * delta * (na * other.M3 - nb * self.M3) / n
        )
        return Moments(n, mean, M2, M3, M4)

    def stats(self, fro_norm: float, count: int | None = None) -> LayerStats:
        """Population std, skewness and excess kurtosis.

        A (numerically) constant sample reports zeros and ``degenerate=True``.
        """
        m2, m3, m4 = self.M2 / self.n, self.M3 / self.n, self.M4 / self.n
        count = int(self.n) if count is None else count
        std = float(np.sqrt(max(m2, 0.0)))
        scale = float(np.sqrt(max(m2, 0.0) + self.mean**2))
        if std == 0.0 or std <= _DEGENERATE_RTOL * scale:
            return LayerStats(self.mean, 0.0, fro_norm, 0.0, 0.0, count, True)
        return LayerStats(self.mean, std, fro_norm, m3 / std**3, m4 / m2**2 - 3.0, count, False)


def combine(moments) -> Moments:
    """Merge a sequence of :class:`Moments` left to right."""
    it = iter(moments)
    total = next(it)
    for m in it:
        total = total.merge(m)
    return total


def stats_of_values(values: np.ndarray, fro_norm: float | None = None) -> LayerStats:
    """Moment statistics of a flat sample."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if fro_norm is None:
        fro_norm = float(np.sqrt(np.sum(v * v)))
    return Moments.from_values(v).stats(fro_norm)


def sample_entries(gf: GradientFactors, n: int, seed: int) -> np.ndarray:
    """``n`` entries of G drawn uniformly with replacement."""
    m, d = gf.shape
    i, j = SplitMix64(seed).index_pairs(n, m, d)
    return gf.o_hat[i] * gf.x[j]


def sampled_moments(gf: GradientFactors, n: int = MAX_SAMPLES, seed: int = 0) -> Moments:
    if n < 2:
        raise ValueError("need at least 2 samples")
    if n > MAX_SAMPLES:
        raise ValueError(f"sample size is capped at {MAX_SAMPLES}")
    return Moments.from_values(sample_entries(gf, n, seed))


def sampled_stats(gf: GradientFactors, n: int = MAX_SAMPLES, seed: int = 0) -> LayerStats:
    """Statistics of ``n`` uniformly sampled entries; the norm is exact."""
    return sampled_moments(gf, n, seed).stats(gf.fro_norm)


def raw_moments(gf: GradientFactors) -> np.ndarray:
    """First four raw moments of the entries of G.

    Entry (i, j) is ``o_hat[i] * x[j]``; with (i, j) uniform over the grid,
    ``E[G^k] = E[o_hat^k] E[x^k]``.
    """
    return np.array([np.mean(gf.o_hat**k) * np.mean(gf.x**k) for k in (1, 2, 3, 4)])


def exact_moments(gf: GradientFactors) -> Moments:
    m, d = gf.shape
    return Moments.from_raw(raw_moments(gf), m * d)


def exact_stats(gf: GradientFactors) -> LayerStats:
    """Statistics over every entry of G in O(m + d)."""
    return exact_moments(gf).stats(gf.fro_norm)
