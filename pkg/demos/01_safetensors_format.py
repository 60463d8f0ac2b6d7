"""
Reading and checking safetensors files
======================================

A safetensors file is an 8-byte little-endian header length, a JSON header
and a flat data region. This walk-through writes a small file, reads one
tensor back without loading the rest, then breaks the layout on purpose.
"""

import json
import struct
import tempfile
from pathlib import Path

import numpy as np

from gradprint.tensorfile import BF16, SafetensorsFile, parse_header, save_file, validate

workdir = Path(tempfile.mkdtemp())

# Three tensors in three dtypes. Plain float32 arrays need no annotation.
path = workdir / "tiny.safetensors"
save_file(path, {
    "embed.weight": np.arange(12, dtype=np.float32).reshape(3, 4),
    "proj.weight": ("F16", [2, 2], np.array([0.5, -1.0, 2.0, 4.0])),
    "scale": (BF16, [4], np.ones(4)),
}, metadata={"format": "pt"})

f = SafetensorsFile(path)
print("header length:", f.index.header_len)
for t in f.index.tensors.values():
    print(f"  {t.name:<14} {t.dtype.name:<5} {list(t.shape)} bytes {t.data_offsets}")

# Reads seek straight to one tensor's byte range; everything comes back as float32.
print("proj.weight =", f.read_tensor("proj.weight").tolist())

# A hand-built header where two tensors claim the same bytes.
header = json.dumps({
    "a": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]},
    "b": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]},
}).encode()
header += b" " * (-len(header) % 8)
broken = struct.pack("<Q", len(header)) + header + bytes(16)
print("violations:", validate(parse_header(broken)))
