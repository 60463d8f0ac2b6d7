"""
Consolidating checkpoints: shards and LoRA adapters
===================================================

Released checkpoints often arrive split across shard files, and derivatives
are often published as LoRA adapters. Both have to be folded into a single
weight file before a fingerprint can be taken.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from gradprint.adapters import merge_lora
from gradprint.gradsig import forward
from gradprint.tensorfile import SafetensorsFile, merge_shards, save_file

rng = np.random.default_rng(0)
workdir = Path(tempfile.mkdtemp())
shards = workdir / "shards"
shards.mkdir()

# Split a six-tensor model over two shards and describe it with an index file.
names = [f"model.layers.{i}.self_attn.{p}_proj.weight" for i in range(3) for p in "qv"]
weights = {n: rng.normal(size=(8, 8)).astype(np.float32) for n in names}
weight_map = {}
for k, group in enumerate((names[:2], names[2:]), 1):
    fname = f"model-{k:05d}-of-00002.safetensors"
    save_file(shards / fname, {n: weights[n] for n in group})
    weight_map.update({n: fname for n in group})
(shards / "model.safetensors.index.json").write_text(json.dumps({"weight_map": weight_map}))

merged = workdir / "merged.safetensors"
shard_set = merge_shards(shards, merged)
print(f"merged {len(shard_set.order)} tensors from {len(shard_set.shards)} shards via {shard_set.source}")

# A rank-2 adapter on the first attention projection.
target = names[0].removesuffix(".weight")
A = rng.normal(size=(2, 8)).astype(np.float32)
B = rng.normal(size=(8, 2)).astype(np.float32)
adapter = workdir / "adapter"
adapter.mkdir()
(adapter / "adapter_config.json").write_text(json.dumps({"r": 2, "lora_alpha": 8, "target_modules": ["q_proj"]}))
save_file(adapter / "adapter_model.safetensors", {
    f"base_model.model.{target}.lora_A.weight": A,
    f"base_model.model.{target}.lora_B.weight": B,
})

# Every other tensor is copied through byte for byte.
folded = workdir / "folded.safetensors"
print("rewritten:", merge_lora(merged, adapter, folded))

# The folded layer behaves like base layer plus scaled low-rank path.
x = rng.normal(size=8)
W = weights[names[0]]
lhs = forward(x, SafetensorsFile(folded).read_tensor(names[0]))
rhs = forward(x, W) + 4.0 * (B @ (A @ x))
print("max forward difference:", float(np.abs(lhs - rhs).max()))
