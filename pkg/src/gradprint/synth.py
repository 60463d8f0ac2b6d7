"""Synthetic model families with known lineage.

Each family gets its own hidden width, depth and weight scale; derivatives
copy the base and modify a random subset of its matrices with additive
noise, a low-rank (LoRA-like) update or per-head row scaling. Everything is
drawn from :mod:`gradprint.rng` streams, so a spec and seed always produce
the same bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .rng import SplitMix64, derive_seed
from .tensorfile import PathLike, save_file

GROUND_TRUTH = "ground_truth.json"


@dataclass(frozen=True)
class AdditiveNoise:
    sigma: float = 0.01  # relative to the layer's weight scale


@dataclass(frozen=True)
class LowRankUpdate:
    rank: int = 2
    scale: float = 0.05


@dataclass(frozen=True)
class HeadScaling:
    gamma: float = 1.5
    heads: int = 4


Modification = Union[AdditiveNoise, LowRankUpdate, HeadScaling]
_MOD_KINDS = {"additive_noise": AdditiveNoise, "low_rank_update": LowRankUpdate, "head_scaling": HeadScaling}


def modification_from_dict(d: dict) -> Modification:
    d = dict(d)
    kind = d.pop("kind")
    return _MOD_KINDS[kind](**d)


def modification_to_dict(mod) -> dict:
    kind = next(k for k, v in _MOD_KINDS.items() if isinstance(mod, v))
    return {"kind": kind, **asdict(mod)}


@dataclass(frozen=True)
class FamilyShape:
    hidden: int
    blocks: int
    vocab: int = 64
    ffn_mult: int = 2
    scale: float = 0.02


@dataclass
class SynthSpec:
    families: int = 4
    derivatives_per_family: int = 6
    seed: int = 7
    shapes: list[FamilyShape] = field(default_factory=lambda: [
        FamilyShape(hidden=32, blocks=2, scale=0.02),
        FamilyShape(hidden=48, blocks=3, scale=0.05),
        FamilyShape(hidden=64, blocks=2, scale=0.03),
        FamilyShape(hidden=96, blocks=2, scale=0.08),
    ])
    modifications: list = field(default_factory=lambda: [AdditiveNoise(0.05), LowRankUpdate(2, 0.05)])
    modified_fraction: float = 0.5
    dtype: str = "F32"

    def __post_init__(self):
        if self.families < 2:
            raise ValueError("need at least two families")
        if len(self.shapes) < self.families:
            raise ValueError(f"{self.families} families but only {len(self.shapes)} shapes")
        for s in self.shapes[: self.families]:
            for dim in (s.hidden, s.vocab, s.hidden * s.ffn_mult):
                if not 4 <= dim <= 256:
                    raise ValueError(f"dimension {dim} outside desk-scale range [4, 256]")
        if not self.modifications:
            raise ValueError("at least one modification kind is required")

    def to_dict(self) -> dict:
        return {
            "families": self.families,
            "derivatives_per_family": self.derivatives_per_family,
            "seed": self.seed,
            "shapes": [asdict(s) for s in self.shapes],
            "modifications": [modification_to_dict(m) for m in self.modifications],
            "modified_fraction": self.modified_fraction,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        kw = dict(d)
        if "shapes" in kw:
            kw["shapes"] = [FamilyShape(**s) for s in kw["shapes"]]
        if "modifications" in kw:
            kw["modifications"] = [modification_from_dict(m) for m in kw["modifications"]]
        return cls(**kw)


def layer_plan(shape: FamilyShape) -> list[tuple[str, tuple[int, ...]]]:
    """Tensor names and shapes, Llama-style naming, covering every category."""
    h, f = shape.hidden, shape.hidden * shape.ffn_mult
    plan = [("model.embed_tokens.weight", (shape.vocab, h))]
    for b in range(shape.blocks):
        p = f"model.layers.{b}"
        plan += [
            (f"{p}.input_layernorm.weight", (h,)),
            (f"{p}.self_attn.q_proj.weight", (h, h)),
            (f"{p}.self_attn.k_proj.weight", (h, h)),
            (f"{p}.self_attn.v_proj.weight", (h, h)),
            (f"{p}.self_attn.o_proj.weight", (h, h)),
            (f"{p}.post_attention_layernorm.weight", (h,)),
            (f"{p}.mlp.gate_proj.weight", (f, h)),
            (f"{p}.mlp.up_proj.weight", (f, h)),
            (f"{p}.mlp.down_proj.weight", (h, f)),
        ]
    plan += [("model.norm.weight", (h,)), ("lm_head.weight", (shape.vocab, h))]
    return plan


def _family_name(index: int) -> str:
    return f"family{index}"


def base_tensors(spec: SynthSpec, family_index: int) -> dict[str, np.ndarray]:
    shape = spec.shapes[family_index]
    out = {}
    for name, dims in layer_plan(shape):
        stream = SplitMix64(derive_seed(spec.seed, f"family={family_index}|{name}"))
        n = int(np.prod(dims))
        if len(dims) == 1:
            out[name] = (1.0 + 0.1 * stream.normal(n)).astype(np.float32).reshape(dims)
        else:
            out[name] = (shape.scale * stream.normal(n)).astype(np.float32).reshape(dims)
    return out


def apply_modification(W: np.ndarray, mod: Modification, stream: SplitMix64, scale: float) -> np.ndarray:
    out_dim, in_dim = W.shape
    W64 = W.astype(np.float64)
    if isinstance(mod, AdditiveNoise):
        if mod.sigma == 0:
            return W.copy()
        return (W64 + mod.sigma * scale * stream.normal(W.size).reshape(W.shape)).astype(np.float32)
    if isinstance(mod, LowRankUpdate):
        B = stream.normal(out_dim * mod.rank).reshape(out_dim, mod.rank)
        A = stream.normal(mod.rank * in_dim).reshape(mod.rank, in_dim)
        return (W64 + mod.scale * scale * (B @ A)).astype(np.float32)
    if isinstance(mod, HeadScaling):
        heads = max(1, min(mod.heads, out_dim))
        rows = out_dim // heads
        head = stream.below(heads)
        W2 = W64.copy()
        W2[head * rows : (head + 1) * rows] *= mod.gamma
        return W2.astype(np.float32)
    raise TypeError(f"unknown modification {mod!r}")


def derivative_tensors(spec: SynthSpec, family_index: int, j: int, base: dict[str, np.ndarray]):
    """Tensors of derivative ``j`` plus its modification and modified layer names."""
    mod = spec.modifications[j % len(spec.modifications)]
    stream = SplitMix64(derive_seed(spec.seed, f"family={family_index}|derivative={j}"))
    eligible = sorted(n for n, w in base.items() if w.ndim == 2)
    count = max(1, round(spec.modified_fraction * len(eligible)))
    chosen = sorted(eligible[i] for i in stream.sample_without_replacement(len(eligible), count))
    scale = spec.shapes[family_index].scale
    out = dict(base)
    for name in chosen:
        out[name] = apply_modification(base[name], mod, stream, scale)
    return out, mod, chosen


def _write(path: Path, tensors: dict[str, np.ndarray], dtype: str, metadata: dict) -> None:
    save_file(path, {n: (dtype, w.shape, w) for n, w in tensors.items()}, metadata)


def generate_family(spec: SynthSpec, family_index: int, out_dir: PathLike):
    """Write one family's base and derivatives; returns (base path, derivative paths, ground truth)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    family = _family_name(family_index)
    base = base_tensors(spec, family_index)
    base_path = out_dir / f"{family}-base.safetensors"
    _write(base_path, base, spec.dtype, {"generator": "gradprint.synth"})
    truth = {base_path.name: {"family": family, "role": "base", "modification": None}}
    paths = []
    for j in range(spec.derivatives_per_family):
        tensors, mod, chosen = derivative_tensors(spec, family_index, j, base)
        path = out_dir / f"{family}-d{j}.safetensors"
        _write(path, tensors, spec.dtype, {"generator": "gradprint.synth"})
        truth[path.name] = {
            "family": family,
            "role": "derivative",
            "modification": modification_to_dict(mod),
            "modified_layers": chosen,
        }
        paths.append(path)
    return base_path, paths, truth


def generate_corpus(spec: SynthSpec, out_dir: PathLike) -> dict:
    """Write every family plus ``ground_truth.json``; returns the ground truth."""
    out_dir = Path(out_dir)
    truth: dict = {}
    for f in range(spec.families):
        truth.update(generate_family(spec, f, out_dir)[2])
    doc = {"spec": spec.to_dict(), "models": truth}
    (out_dir / GROUND_TRUTH).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return doc


def load_ground_truth(corpus: PathLike) -> dict:
    return json.loads((Path(corpus) / GROUND_TRUTH).read_text(encoding="utf-8"))


def split_roles(truth: dict) -> tuple[list[str], list[str]]:
    """(base filenames, derivative filenames), each sorted."""
    models = truth["models"]
    bases = sorted(n for n, m in models.items() if m["role"] == "base")
    members = sorted(n for n, m in models.items() if m["role"] != "base")
    return bases, members


def families_of(truth: dict, names: Sequence[str]) -> list[str]:
    return [truth["models"][n]["family"] for n in names]
