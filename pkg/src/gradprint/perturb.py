"""Seeded layer inputs and the input perturbation strategies.

Five strategies take part in random per-layer selection (adversarial,
structural, low-frequency, high-frequency, Gaussian). ``UniformRandom`` exists
only as the baseline for sensitivity profiles and is never auto-selected.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .errors import MissingWeight
from .gradsig import forward, input_gradient
from .rng import SplitMix64, derive_seed

__all__ = [
    "Adversarial", "Structural", "LowFrequency", "HighFrequency", "Gaussian", "UniformRandom",
    "NoiseStrategy", "NoiseParams", "derive_seed", "base_input", "select_strategy", "apply_noise",
    "strategy_from_name",
]


def _positive(**values):
    for k, v in values.items():
        if not v > 0:
            raise ValueError(f"{k} must be positive, got {v}")


@dataclass(frozen=True)
class Adversarial:
    """FGSM step on the norm loss: ``x + eps * sign(dL/dx)``."""

    eps: float = 0.05

    def __post_init__(self):
        _positive(eps=self.eps)


@dataclass(frozen=True)
class Structural:
    """Blend of ``x`` with its low-pass reconstruction."""

    weight: float = 0.5
    keep_fraction: float = 0.25

    def __post_init__(self):
        _positive(weight=self.weight)
        if not 0 < self.keep_fraction <= 1:
            raise ValueError(f"keep_fraction must lie in (0, 1], got {self.keep_fraction}")


@dataclass(frozen=True)
class LowFrequency:
    weight: float = 0.5
    cycles: int = 2

    def __post_init__(self):
        _positive(weight=self.weight)


@dataclass(frozen=True)
class HighFrequency:
    weight: float = 0.5

    def __post_init__(self):
        _positive(weight=self.weight)


@dataclass(frozen=True)
class Gaussian:
    sigma: float = 0.1

    def __post_init__(self):
        # sigma = 0 is allowed as an explicit no-op
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")


@dataclass(frozen=True)
class UniformRandom:
    eps: float = 0.05

    def __post_init__(self):
        _positive(eps=self.eps)


NoiseStrategy = Union[Adversarial, Structural, LowFrequency, HighFrequency, Gaussian, UniformRandom]

STRATEGY_NAMES = {
    "adversarial": Adversarial,
    "structural": Structural,
    "low-freq": LowFrequency,
    "high-freq": HighFrequency,
    "gaussian": Gaussian,
    "uniform": UniformRandom,
}


@dataclass(frozen=True)
class NoiseParams:
    """Magnitudes used when strategies are chosen automatically."""

    eps: float = 0.05
    sigma: float = 0.1
    weight: float = 0.5
    keep_fraction: float = 0.25
    cycles: int = 2

    def candidates(self) -> tuple[NoiseStrategy, ...]:
        return (
            Adversarial(self.eps),
            Structural(self.weight, self.keep_fraction),
            LowFrequency(self.weight, self.cycles),
            HighFrequency(self.weight),
            Gaussian(self.sigma),
        )

    def build(self, name: str) -> NoiseStrategy:
        return strategy_from_name(name, self)

    def updated(self, **overrides) -> "NoiseParams":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def strategy_from_name(name: str, params: NoiseParams | None = None) -> NoiseStrategy:
    params = params or NoiseParams()
    kind = STRATEGY_NAMES.get(name)
    if kind is None:
        raise ValueError(f"unknown noise strategy {name!r}; choose from {sorted(STRATEGY_NAMES)}")
    if kind is UniformRandom:
        return UniformRandom(params.eps)
    return next(s for s in params.candidates() if isinstance(s, kind))


def strategy_name(strategy: NoiseStrategy) -> str:
    return next(k for k, v in STRATEGY_NAMES.items() if isinstance(strategy, v))


def base_input(seed: int, d: int) -> np.ndarray:
    """``d`` standard-normal draws (float32) from the stream ``seed``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return SplitMix64(seed).normal(d).astype(np.float32)


def select_strategy(seed: int, layer: str, iteration: int, params: NoiseParams | None = None) -> NoiseStrategy:
    params = params or NoiseParams()
    stream = SplitMix64(derive_seed(seed, f"{layer}|iter={iteration}|strategy"))
    candidates = params.candidates()
    return candidates[stream.below(len(candidates))]


def apply_noise(x: np.ndarray, strategy: NoiseStrategy, seed: int, W: np.ndarray | None = None) -> np.ndarray:
    """Perturbed copy of ``x``; ``seed`` feeds the stochastic strategies."""
    x = np.asarray(x, dtype=np.float32)
    d = x.shape[0]
    x64 = x.astype(np.float64)

    if isinstance(strategy, Adversarial):
        if W is None:
            raise MissingWeight("adversarial noise needs the layer weight")
        o = forward(x, W)
        norm = np.linalg.norm(o)
        grad = input_gradient(o / norm, W) if norm > 0 else np.zeros(d)
        out = x64 + strategy.eps * np.sign(grad)
    elif isinstance(strategy, Structural):
        spectrum = np.fft.rfft(x64)
        cutoff = strategy.keep_fraction * (d / 2)
        spectrum[np.arange(spectrum.shape[0]) > cutoff] = 0
        smooth = np.fft.irfft(spectrum, n=d)
        out = (1 - strategy.weight) * x64 + strategy.weight * smooth
    elif isinstance(strategy, LowFrequency):
        j = np.arange(d)
        out = x64 + strategy.weight * np.sin(2 * np.pi * strategy.cycles * j / d)
    elif isinstance(strategy, HighFrequency):
        out = x64 + strategy.weight * np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
    elif isinstance(strategy, Gaussian):
        out = x64 + strategy.sigma * SplitMix64(seed).normal(d)
    elif isinstance(strategy, UniformRandom):
        out = x64 + strategy.eps * (2.0 * SplitMix64(seed).uniform(d) - 1.0)
    else:
        raise TypeError(f"not a noise strategy: {strategy!r}")
    return out.astype(np.float32)
