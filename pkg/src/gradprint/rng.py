"""Reproducible random streams.

All randomness in the package flows through :class:`SplitMix64` streams whose
seeds come from :func:`derive_seed`, a 64-bit FNV-1a hash of
``"<global_seed>|<label>"``. Labels name the consumer (layer, iteration,
purpose), so a draw never depends on scheduling order or thread count.

SplitMix64 is counter based, which lets whole blocks be generated with numpy
without a Python loop: output ``k`` (1-based) is ``mix(seed + k * GAMMA)``.
"""

from __future__ import annotations

import numpy as np

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
MASK64 = (1 << 64) - 1

GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S27, _S30, _S31, _S32 = (np.uint64(v) for v in (27, 30, 31, 32))


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def derive_seed(global_seed: int, label: str) -> int:
    """Seed for the stream named ``label`` under ``global_seed``."""
    return fnv1a64(f"{int(global_seed)}|{label}".encode("utf-8"))


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, in place on ``z``."""
    t = np.empty_like(z)
    np.right_shift(z, _S30, out=t)
    z ^= t
    z *= _MIX1
    np.right_shift(z, _S27, out=t)
    z ^= t
    z *= _MIX2
    np.right_shift(z, _S31, out=t)
    z ^= t
    return z


class SplitMix64:
    """SplitMix64 stream with vectorised block draws.

    >>> SplitMix64(1234567).next_u64()
    6457827717110365317
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.position = 0

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs."""
        if n < 0:
            raise ValueError("n must be non-negative")
        z = np.arange(self.position + 1, self.position + 1 + n, dtype=np.uint64)
        self.position += n
        z *= np.uint64(GAMMA)
        z += np.uint64(self.seed)
        return _mix(z)

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normals, Box-Muller on consecutive uniform pairs."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def below(self, bound: int) -> int:
        """One integer uniform in ``[0, bound)``."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return min(int(self.uniform(1)[0] * bound), bound - 1)

    def index_pairs(self, n: int, rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
        """``n`` (row, col) pairs drawn uniformly with replacement.

        Each pair consumes one output: the high 32 bits pick the row and the
        low 32 bits the column (multiply-shift reduction).
        """
        if not (0 < rows < 1 << 32 and 0 < cols < 1 << 32):
            raise ValueError("rows and cols must be in [1, 2**32)")
        i = self.u64(n)
        j = i & np.uint64(0xFFFFFFFF)
        i >>= _S32
        i *= np.uint64(rows)
        i >>= _S32
        j *= np.uint64(cols)
        j >>= _S32
        return i.view(np.int64), j.view(np.int64)

    def sample_without_replacement(self, population: int, k: int) -> list[int]:
        """Partial Fisher-Yates: first ``k`` slots of a shuffled ``range(population)``."""
        k = min(k, population)
        idx = list(range(population))
        for i in range(k):
            j = i + self.below(population - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k]
