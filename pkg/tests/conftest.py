import json
import struct

import numpy as np
import pytest

from gradprint.tensorfile import save_file


def raw_file(header: dict, data: bytes, pad: bool = True) -> bytes:
    """Hand-assemble a safetensors file, bypassing the writer under test."""
    text = json.dumps(header).encode()
    if pad:
        text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model(tmp_path):
    """Two-block toy model covering every layer category."""
    r = np.random.default_rng(0)
    tensors = {
        "model.embed_tokens.weight": r.normal(size=(16, 8)).astype(np.float32),
        "model.layers.0.self_attn.q_proj.weight": r.normal(size=(8, 8)).astype(np.float32),
        "model.layers.0.self_attn.v_proj.weight": r.normal(size=(8, 8)).astype(np.float32),
        "model.layers.0.mlp.up_proj.weight": r.normal(size=(16, 8)).astype(np.float32),
        "model.layers.0.mlp.down_proj.weight": r.normal(size=(8, 16)).astype(np.float32),
        "model.layers.0.input_layernorm.weight": np.ones(8, dtype=np.float32),
        "lm_head.weight": r.normal(size=(16, 8)).astype(np.float32),
    }
    path = tmp_path / "small.safetensors"
    save_file(path, tensors)
    return path, tensors
