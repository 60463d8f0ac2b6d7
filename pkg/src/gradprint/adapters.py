"""LoRA adapter loading and folding into base weights.

An adapter directory holds ``adapter_config.json`` and
``adapter_model.safetensors``. Each adapted linear layer contributes a pair
``lora_A`` ``[r, in]`` / ``lora_B`` ``[out, r]``, and merging replaces the
base weight with ``W + (lora_alpha / r) * B @ A``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MissingConfigKey, OrphanLoraTensor, ShapeIncompatible, TargetNotFound
from .tensorfile import F32, PathLike, SafetensorsFile, copy_tensors

log = logging.getLogger(__name__)

CONFIG_FILENAME = "adapter_config.json"
WEIGHTS_FILENAME = "adapter_model.safetensors"

_LORA_NAME = re.compile(r"^(?:base_model\.model\.)?(?P<path>.+)\.lora_(?P<side>[AB])(?:\.default)?\.weight$")


@dataclass(frozen=True)
class AdapterConfig:
    r: int
    lora_alpha: float
    target_modules: tuple[str, ...]

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {self.r}")
        if not np.isfinite(self.scaling) or self.scaling <= 0:
            raise ValueError(f"LoRA scaling must be finite and positive, got {self.scaling}")

    @property
    def scaling(self) -> float:
        return float(self.lora_alpha) / self.r

    def targets(self, path: str) -> bool:
        """Whether module ``path`` is covered by ``target_modules`` (exact suffix match)."""
        if not self.target_modules or "all-linear" in self.target_modules:
            return True
        return any(path == t or path.endswith("." + t) for t in self.target_modules)


@dataclass
class AdapterPair:
    target: str  # base tensor name, e.g. "model.layers.0.self_attn.q_proj.weight"
    A: np.ndarray  # [r, in]
    B: np.ndarray  # [out, r]

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.B.shape[1]:
            raise ShapeIncompatible(
                f"{self.target}: lora_A {self.A.shape} and lora_B {self.B.shape} disagree on rank"
            )

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def delta_shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]


def load_config(path: PathLike) -> AdapterConfig:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    for key in ("r", "lora_alpha", "target_modules"):
        if key not in doc:
            raise MissingConfigKey(f"{path}: missing {key!r}")
    targets = doc["target_modules"]
    if isinstance(targets, str):
        targets = [targets]
    return AdapterConfig(int(doc["r"]), float(doc["lora_alpha"]), tuple(targets or ()))


def load_adapter(directory: PathLike) -> tuple[AdapterConfig, list[AdapterPair]]:
    directory = Path(directory)
    config = load_config(directory / CONFIG_FILENAME)
    weights = SafetensorsFile(directory / WEIGHTS_FILENAME)

    halves: dict[str, dict[str, str]] = {}
    for name in weights.names():
        m = _LORA_NAME.match(name)
        if m is None:
            log.debug("ignoring non-LoRA tensor %s", name)
            continue
        halves.setdefault(m["path"], {})[m["side"]] = name

    pairs = []
    for path, sides in halves.items():
        if set(sides) != {"A", "B"}:
            have = next(iter(sides))
            raise OrphanLoraTensor(f"{sides[have]} has no matching lora_{'B' if have == 'A' else 'A'}")
        if not config.targets(path):
            log.warning("%s is not covered by target_modules; skipped", path)
            continue
        pairs.append(AdapterPair(path + ".weight", weights.read_tensor(sides["A"]), weights.read_tensor(sides["B"])))
    return config, pairs


def lora_delta(pair: AdapterPair, scaling: float) -> np.ndarray:
    return scaling * (pair.B.astype(np.float64) @ pair.A.astype(np.float64))


def merge_lora(base: PathLike, adapter: PathLike, output: PathLike) -> list[str]:
    """Fold the adapter at ``adapter`` into ``base`` and write ``output``.

    Adapted tensors are stored as F32; every other tensor is copied byte for
    byte. Returns the names of the rewritten tensors.
    """
    config, pairs = load_adapter(adapter)
    src = SafetensorsFile(base)
    replaced = {}
    for pair in pairs:
        if pair.target not in src.index:
            raise TargetNotFound(f"{pair.target} not found in base model")
        info = src.index[pair.target]
        if len(info.shape) != 2 or tuple(info.shape) != pair.delta_shape:
            raise ShapeIncompatible(
                f"{pair.target}: base shape {list(info.shape)} vs adapter update {list(pair.delta_shape)}"
            )
        W = src.read_tensor(pair.target)
        delta = lora_delta(pair, config.scaling)
        merged = np.where(delta == 0.0, W, (W.astype(np.float64) + delta).astype(np.float32))
        replaced[pair.target] = (F32, info.shape, merged)

    metadata = dict(src.metadata or {})
    metadata["lora_merged_targets"] = json.dumps(sorted(replaced))
    metadata["lora_merged_dtype"] = "F32"
    metadata["lora_scaling"] = repr(config.scaling)
    copy_tensors(output, [(n, src) for n in src.names()], metadata, replace=replaced)
    return sorted(replaced)
