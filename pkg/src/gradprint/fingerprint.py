"""Fingerprint extraction and per-layer sensitivity profiles.

A fingerprint is 16 numbers: five global gradient statistics, (mean, std,
norm) for the attention, FFN and embedding categories, the total parameter
count and the number of tensors. Each statistical entry is averaged over
``iterations`` independent perturbation rounds.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import __version__
from .errors import DegenerateOutput, NoEligibleLayers
from .gradsig import (
    MAX_SAMPLES,
    LayerStats,
    Moments,
    combine,
    exact_moments,
    forward,
    gradient_factors,
    sampled_moments,
)
from .perturb import NoiseParams, NoiseStrategy, apply_noise, base_input, select_strategy, strategy_name
from .rng import derive_seed
from .taxonomy import LayerCategory, LayerRecord, records_from_index, sample_layers
from .tensorfile import PathLike, SafetensorsFile

log = logging.getLogger(__name__)

FINGERPRINT_SCHEMA = "gradprint.fingerprint/1"

FIELDS = (
    "global_mean", "global_std", "global_norm", "global_skewness", "global_kurtosis",
    "attention_mean", "attention_std", "attention_norm",
    "ffn_mean", "ffn_std", "ffn_norm",
    "embedding_mean", "embedding_std", "embedding_norm",
    "total_params", "num_layers",
)

# categories with their own fingerprint entries
_CATEGORY_PREFIX = {
    LayerCategory.ATTENTION: "attention",
    LayerCategory.FFN: "ffn",
    LayerCategory.EMBEDDING: "embedding",
}

SENSITIVITY_TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj", "down_proj", "up_proj")


@dataclass
class ExtractionConfig:
    global_seed: int = 42
    iterations: int = 30
    sample_size: int = MAX_SAMPLES
    per_category_k: int = 3
    mode: str = "sampled"  # or "exact"
    noise: NoiseParams = field(default_factory=NoiseParams)
    all_layers: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 2 <= self.sample_size <= MAX_SAMPLES:
            raise ValueError(f"sample_size must lie in [2, {MAX_SAMPLES}]")
        if self.mode not in ("sampled", "exact"):
            raise ValueError(f"mode must be 'sampled' or 'exact', got {self.mode!r}")
        if self.per_category_k < 1:
            raise ValueError("per_category_k must be >= 1")

    def describe(self) -> dict:
        return {
            "seed": self.global_seed,
            "iterations": self.iterations,
            "sample_size": self.sample_size,
            "per_category_k": self.per_category_k,
            "mode": self.mode,
            "all_layers": self.all_layers,
            "noise": asdict(self.noise),
        }


@dataclass
class Fingerprint:
    global_mean: float
    global_std: float
    global_norm: float
    global_skewness: float
    global_kurtosis: float
    attention_mean: float
    attention_std: float
    attention_norm: float
    ffn_mean: float
    ffn_std: float
    ffn_norm: float
    embedding_mean: float
    embedding_std: float
    embedding_norm: float
    total_params: float
    num_layers: float
    model_name: str = ""
    extraction: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {name: float(getattr(self, name)) for name in FIELDS}
        d["model_name"] = self.model_name
        d["extraction"] = self.extraction
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Fingerprint":
        missing = [name for name in FIELDS if name not in d]
        if missing:
            raise ValueError(f"fingerprint is missing {missing}")
        return cls(
            **{name: float(d[name]) for name in FIELDS},
            model_name=str(d.get("model_name", "")),
            extraction=dict(d.get("extraction", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "Fingerprint":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_vector(cls, v: Sequence[float], model_name: str = "") -> "Fingerprint":
        if len(v) != len(FIELDS):
            raise ValueError(f"expected {len(FIELDS)} values, got {len(v)}")
        return cls(*(float(x) for x in v), model_name=model_name)


assert tuple(f.name for f in fields(Fingerprint))[: len(FIELDS)] == FIELDS


def vectorize(fp: Fingerprint) -> np.ndarray:
    return np.array([getattr(fp, name) for name in FIELDS], dtype=np.float64)


def load_fingerprint(path: PathLike) -> Fingerprint:
    with open(path, encoding="utf-8") as f:
        return Fingerprint.from_json(f.read())


def save_fingerprint(fp: Fingerprint, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(fp.to_json())


# -- extraction -----------------------------------------------------------------

def _perturbed_input(name: str, W: np.ndarray, t: int, seed: int, strategy: NoiseStrategy) -> np.ndarray:
    x0 = base_input(derive_seed(seed, f"{name}|iter={t}|input"), W.shape[1])
    return apply_noise(x0, strategy, derive_seed(seed, f"{name}|iter={t}|noise"), W)


@dataclass
class _LayerRound:
    fro_norm: float
    pooled: Moments  # contribution to the global pool
    stats: LayerStats | None  # category statistics, selected layers only


def _run_layer(src: SafetensorsFile, rec: LayerRecord, selected: bool, config: ExtractionConfig):
    """All iterations for one layer; ``None`` marks a degenerate round."""
    W = src.read_tensor(rec.name).reshape(rec.shape[0], -1)
    seed = config.global_seed
    rounds: list[_LayerRound | None] = []
    for t in range(config.iterations):
        strategy = select_strategy(seed, rec.name, t, config.noise)
        x = _perturbed_input(rec.name, W, t, seed, strategy)
        try:
            gf = gradient_factors(x, forward(x, W))
        except DegenerateOutput:
            rounds.append(None)
            continue
        mom = stats = None
        if selected:
            if config.mode == "exact":
                mom = exact_moments(gf)
            else:
                mom = sampled_moments(gf, config.sample_size, derive_seed(seed, f"{rec.name}|iter={t}|sample"))
            stats = mom.stats(gf.fro_norm)
        pooled = exact_moments(gf) if config.all_layers or mom is None else mom
        # every layer carries equal weight in the global pool
        rounds.append(_LayerRound(gf.fro_norm, pooled.reweighted(float(config.sample_size)), stats))
    return rounds


def _mean(values: list[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def extract_fingerprint(
    model: PathLike | SafetensorsFile, config: ExtractionConfig | None = None, model_name: str | None = None
) -> Fingerprint:
    """Fingerprint the safetensors file ``model``."""
    config = config or ExtractionConfig()
    src = model if isinstance(model, SafetensorsFile) else SafetensorsFile(model)
    records = records_from_index(src.index)
    eligible = sorted((r for r in records if r.eligible), key=lambda r: r.name)
    if not eligible:
        raise NoEligibleLayers(f"{src.path}: no tensor with two or more dimensions")

    selection = sample_layers(records, config.global_seed, config.per_category_k)
    selected = {r.name for members in selection.values() for r in members}
    pool_layers = eligible if config.all_layers else [r for r in eligible if r.name in selected]
    work = [r for r in eligible if r.name in selected or config.all_layers]

    def job(rec):
        return rec.name, _run_layer(src, rec, rec.name in selected, config)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = dict(pool.map(job, work))
    else:
        results = dict(map(job, work))

    skipped = sorted({name for name, rounds in results.items() if any(r is None for r in rounds)})
    for name in skipped:
        log.warning("%s: degenerate output in some iterations; those rounds are excluded", name)

    per_iter: dict[str, list[float]] = {name: [] for name in FIELDS[:14]}
    for t in range(config.iterations):
        pooled = [results[r.name][t] for r in pool_layers if results[r.name][t] is not None]
        if pooled:
            g = combine(p.pooled for p in pooled).stats(0.0)
            per_iter["global_mean"].append(g.mean)
            per_iter["global_std"].append(g.std)
            per_iter["global_skewness"].append(g.skewness)
            per_iter["global_kurtosis"].append(g.kurtosis)
            per_iter["global_norm"].append(math.sqrt(math.fsum(p.fro_norm**2 for p in pooled)))
        for category, prefix in _CATEGORY_PREFIX.items():
            rounds = [results[r.name][t] for r in selection[category] if results[r.name][t] is not None]
            if rounds:
                per_iter[f"{prefix}_mean"].append(_mean([r.stats.mean for r in rounds]))
                per_iter[f"{prefix}_std"].append(_mean([r.stats.std for r in rounds]))
                per_iter[f"{prefix}_norm"].append(_mean([r.stats.fro_norm for r in rounds]))

    if not per_iter["global_mean"]:
        raise NoEligibleLayers(f"{src.path}: every sampled layer produced a zero output")

    empty = [prefix for category, prefix in _CATEGORY_PREFIX.items() if not per_iter[f"{prefix}_mean"]]
    values = {name: _mean(v) for name, v in per_iter.items()}
    values["total_params"] = float(sum(r.size for r in records))
    values["num_layers"] = float(len(records))

    extraction = {"schema": FINGERPRINT_SCHEMA, "tool_version": __version__}
    extraction.update(config.describe())
    extraction.update({
        "num_layers_counts": "tensor entries",
        "empty_categories": empty,
        "degenerate_layers": skipped,
        "selected_layers": {
            category.label: [r.name for r in members] for category, members in selection.items()
        },
    })
    name = model_name if model_name is not None else src.path.name.removesuffix(".safetensors")
    return Fingerprint(**values, model_name=name, extraction=extraction)


# -- sensitivity ------------------------------------------------------------------

@dataclass
class SensitivityProfile:
    scores: dict[str, tuple[float, float]]  # layer -> (raw, zscore)
    strategy: NoiseStrategy
    iterations: int

    def to_dict(self) -> dict:
        return {
            "strategy": strategy_name(self.strategy),
            "parameters": asdict(self.strategy),
            "iterations": self.iterations,
            "layers": [{"name": n, "raw": raw, "zscore": z} for n, (raw, z) in self.scores.items()],
        }


def zscores(values: Sequence[float]) -> np.ndarray:
    """Population z-scores; all zeros when the values do not vary."""
    v = np.asarray(values, dtype=np.float64)
    std = v.std()
    if v.size < 2 or std == 0.0:
        return np.zeros_like(v)
    return (v - v.mean()) / std


def sensitivity_profile(
    model: PathLike | SafetensorsFile,
    strategy: NoiseStrategy,
    iterations: int = 30,
    seed: int = 42,
    targets: Sequence[str] = SENSITIVITY_TARGETS,
) -> SensitivityProfile:
    """Mean gradient Frobenius norm per targeted layer under one fixed strategy."""
    src = model if isinstance(model, SafetensorsFile) else SafetensorsFile(model)
    layers = sorted(
        (r for r in records_from_index(src.index) if r.eligible and any(t in r.name for t in targets)),
        key=lambda r: r.name,
    )
    if not layers:
        raise NoEligibleLayers(f"{src.path}: no eligible layer matches {list(targets)}")
    raw = []
    for rec in layers:
        W = src.read_tensor(rec.name).reshape(rec.shape[0], -1)
        norms = []
        for t in range(iterations):
            x = _perturbed_input(rec.name, W, t, seed, strategy)
            try:
                norms.append(gradient_factors(x, forward(x, W)).fro_norm)
            except DegenerateOutput:
                continue
        raw.append(_mean(norms))
    z = zscores(raw)
    scores = {rec.name: (float(r), float(zz)) for rec, r, zz in zip(layers, raw, z)}
    return SensitivityProfile(scores, strategy, iterations)
