"""Name-based layer categories and seeded per-category layer sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable

from .rng import SplitMix64, derive_seed
from .tensorfile import FileIndex


class LayerCategory(IntEnum):
    ATTENTION = 0
    FFN = 1
    EMBEDDING = 2
    NORM = 3
    UNKNOWN = 4

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    LayerCategory.ATTENTION: "Attention",
    LayerCategory.FFN: "FFN",
    LayerCategory.EMBEDDING: "Embedding",
    LayerCategory.NORM: "Norm",
    LayerCategory.UNKNOWN: "Unknown",
}

# first match wins
_RULES = (
    (("attention", "attn"), LayerCategory.ATTENTION),
    (("ffn", "mlp"), LayerCategory.FFN),
    (("embed",), LayerCategory.EMBEDDING),
    (("norm",), LayerCategory.NORM),
)


def classify_layer(name: str) -> LayerCategory:
    lowered = name.lower()
    for needles, category in _RULES:
        if any(n in lowered for n in needles):
            return category
    return LayerCategory.UNKNOWN


@dataclass(frozen=True)
class LayerRecord:
    name: str
    shape: tuple[int, ...]
    category: LayerCategory

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def eligible(self) -> bool:
        # a forward pass needs a weight matrix
        return len(self.shape) >= 2


def records_from_index(index: FileIndex) -> list[LayerRecord]:
    return [LayerRecord(t.name, tuple(t.shape), classify_layer(t.name)) for t in index.tensors.values()]


def sample_layers(
    records: Iterable[LayerRecord], seed: int, k: int = 3
) -> dict[LayerCategory, list[LayerRecord]]:
    """Pick up to ``k`` eligible layers per category.

    Candidates are sorted by name before drawing, so the result depends only
    on the set of records and the seed. Selections are returned name-sorted.
    """
    groups: dict[LayerCategory, list[LayerRecord]] = {c: [] for c in LayerCategory}
    for rec in records:
        if rec.eligible:
            groups[rec.category].append(rec)
    out = {}
    for category, members in groups.items():
        members.sort(key=lambda r: r.name)
        if len(members) > k:
            stream = SplitMix64(derive_seed(seed, "sample|" + category.label))
            picked = stream.sample_without_replacement(len(members), k)
            members = sorted((members[i] for i in picked), key=lambda r: r.name)
        out[category] = members
    return out
