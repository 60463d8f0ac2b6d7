"""Safetensors parsing, validation, writing and shard merging.

File layout::

    [8 bytes]  little-endian u64 header length N
    [N bytes]  UTF-8 JSON header, space padded
    [rest]     raw tensor data region

Each header entry maps a tensor name to ``dtype``, ``shape`` and
``data_offsets`` (relative to the start of the data region); the optional
``__metadata__`` entry is a flat text-to-text map.

Parsing checks each entry in isolation. Whole-file layout problems (overlaps,
gaps) are reported by :func:`validate` so malformed files can still be
inspected.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Mapping, Union

import numpy as np

from .errors import (
    DuplicateName,
    DuplicateTensorAcrossShards,
    MalformedHeader,
    MissingIndexEntry,
    NoShardsFound,
    OffsetOutOfRange,
    ShapeMismatch,
    TruncatedFile,
    UnknownTensor,
    UnsupportedDType,
)

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

INDEX_FILENAME = "model.safetensors.index.json"
SHARD_PATTERN = re.compile(r"model-(\d+)-of-(\d+)\.safetensors")
METADATA_KEY = "__metadata__"

# widths of dtypes we can only pass through, used for size checks
_PASSTHROUGH_WIDTHS = {
    "BOOL": 1, "U8": 1, "I8": 1, "F8_E4M3": 1, "F8_E5M2": 1,
    "U16": 2, "I16": 2,
    "U32": 4, "I32": 4,
    "U64": 8, "I64": 8,
}


@dataclass(frozen=True)
class DType:
    """Tensor element type. Anything outside F64/F32/F16/BF16 is unsupported
    for arithmetic but keeps its original name so it can be reported or copied."""

    name: str

    @property
    def supported(self) -> bool:
        return self.name in _NUMPY

    @property
    def byte_width(self) -> int | None:
        if self.name in _WIDTHS:
            return _WIDTHS[self.name]
        return _PASSTHROUGH_WIDTHS.get(self.name)

    def __str__(self) -> str:
        return self.name


F64 = DType("F64")
F32 = DType("F32")
F16 = DType("F16")
BF16 = DType("BF16")

_WIDTHS = {"F64": 8, "F32": 4, "F16": 2, "BF16": 2}
_NUMPY = {"F64": np.dtype("<f8"), "F32": np.dtype("<f4"), "F16": np.dtype("<f2"), "BF16": np.dtype("<u2")}


def as_dtype(value: DType | str) -> DType:
    return value if isinstance(value, DType) else DType(str(value))


@dataclass(frozen=True)
class TensorInfo:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]

    @property
    def begin(self) -> int:
        return self.data_offsets[0]

    @property
    def end(self) -> int:
        return self.data_offsets[1]


@dataclass
class FileIndex:
    header_len: int
    metadata: dict[str, str] | None
    tensors: dict[str, TensorInfo]
    data_region_len: int

    @property
    def data_start(self) -> int:
        return 8 + self.header_len

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __getitem__(self, name: str) -> TensorInfo:
        try:
            return self.tensors[name]
        except KeyError:
            raise UnknownTensor(f"no tensor named {name!r}") from None


# -- violations ---------------------------------------------------------------

@dataclass(frozen=True)
class Overlap:
    a: str
    b: str


@dataclass(frozen=True)
class Gap:
    offset: int


@dataclass(frozen=True)
class OutOfRange:
    name: str


@dataclass(frozen=True)
class ZeroSizedAlias:
    a: str
    b: str


Violation = Union[Overlap, Gap, OutOfRange, ZeroSizedAlias]


def describe(v: Violation) -> dict:
    d = {"kind": type(v).__name__}
    d.update(v.__dict__)
    return d


# -- parsing ------------------------------------------------------------------

def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise MalformedHeader(f"duplicate key {k!r} in header")
        out[k] = v
    return out


def _is_uint(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def _parse_entry(name: str, entry) -> TensorInfo:
    if not isinstance(entry, dict):
        raise MalformedHeader(f"{name}: entry is not an object")
    keys = set(entry)
    missing = {"dtype", "shape", "data_offsets"} - keys
    if missing:
        raise MalformedHeader(f"{name}: missing key(s) {sorted(missing)}")
    if keys - {"dtype", "shape", "data_offsets"}:
        raise MalformedHeader(f"{name}: unknown key(s) {sorted(keys - {'dtype', 'shape', 'data_offsets'})}")
    dtype, shape, offsets = entry["dtype"], entry["shape"], entry["data_offsets"]
    if not isinstance(dtype, str):
        raise MalformedHeader(f"{name}: dtype must be a string")
    if not isinstance(shape, list) or not all(_is_uint(s) for s in shape):
        raise MalformedHeader(f"{name}: shape must be a list of non-negative integers")
    if not (isinstance(offsets, list) and len(offsets) == 2 and all(_is_uint(o) for o in offsets)):
        raise MalformedHeader(f"{name}: data_offsets must be two non-negative integers")
    begin, end = offsets
    if begin > end:
        raise MalformedHeader(f"{name}: data_offsets begin {begin} > end {end}")
    info = TensorInfo(name, DType(dtype), tuple(shape), (begin, end))
    width = info.dtype.byte_width
    if width is not None and info.nbytes != width * info.numel:
        raise MalformedHeader(
            f"{name}: size mismatch, offsets span {info.nbytes} bytes but "
            f"{dtype}{list(shape)} needs {width * info.numel}"
        )
    return info


def parse_header(buf: bytes, *, file_size: int | None = None, strict: bool = True) -> FileIndex:
    """Decode the header of a safetensors file.

    ``buf`` holds the file bytes, or at least its first ``8 + header_len``
    bytes when ``file_size`` gives the full length. With ``strict=False``,
    tensors reaching past the data region are kept and left to
    :func:`validate` instead of raising :class:`OffsetOutOfRange`.
    """
    buf = bytes(buf)
    size = len(buf) if file_size is None else file_size
    if len(buf) < 8:
        raise TruncatedFile(f"file has {len(buf)} bytes, need at least 8")
    (header_len,) = struct.unpack("<Q", buf[:8])
    if size < 8 + header_len or len(buf) < 8 + header_len:
        raise TruncatedFile(f"header length {header_len} exceeds file size {size}")
    raw = buf[8 : 8 + header_len]
    try:
        text = raw.decode("utf-8").rstrip(" ")
        header = json.loads(text, object_pairs_hook=_no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")

    data_len = size - 8 - header_len
    metadata = None
    tensors: dict[str, TensorInfo] = {}
    for name, entry in header.items():
        if name == METADATA_KEY:
            if not isinstance(entry, dict) or not all(isinstance(v, str) for v in entry.values()):
                raise MalformedHeader("__metadata__ must map text to text")
            metadata = dict(entry)
            continue
        info = _parse_entry(name, entry)
        if strict and info.end > data_len:
            raise OffsetOutOfRange(f"{name}: end offset {info.end} exceeds data region of {data_len} bytes")
        tensors[name] = info
    return FileIndex(header_len, metadata, tensors, data_len)


def read_index(path: PathLike, *, strict: bool = True) -> FileIndex:
    """Parse only the header of the file at ``path``."""
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        prefix = f.read(8)
        if len(prefix) == 8:
            (n,) = struct.unpack("<Q", prefix)
            if 8 + n <= size:
                prefix += f.read(n)
    return parse_header(prefix, file_size=size, strict=strict)


def validate(index: FileIndex) -> list[Violation]:
    """All layout violations of ``index``; empty means well formed."""
    out: list[Violation] = []
    limit = index.data_region_len
    for t in index.tensors.values():
        if t.end > limit or t.begin > t.end:
            out.append(OutOfRange(t.name))

    ordered = sorted(index.tensors.values(), key=lambda t: (t.begin, t.end, t.name))
    # overlaps: sweep with the set of still-open non-empty intervals
    active: list[TensorInfo] = []
    for t in ordered:
        active = [a for a in active if a.end > t.begin]
        if t.nbytes > 0:
            for a in active:
                out.append(Overlap(a.name, t.name))
            active.append(t)

    empties: dict[int, list[str]] = {}
    for t in ordered:
        if t.nbytes == 0:
            empties.setdefault(t.begin, []).append(t.name)
    for names in empties.values():
        for a, b in zip(names, names[1:]):
            out.append(ZeroSizedAlias(a, b))

    cursor = 0
    for t in ordered:
        if t.begin > cursor:
            out.append(Gap(cursor))
        cursor = max(cursor, t.end)
    if cursor < limit:
        out.append(Gap(cursor))
    return out


# -- dtype conversion ----------------------------------------------------------

def decode(raw: bytes, dtype: DType | str, shape: Iterable[int]) -> np.ndarray:
    """Raw little-endian bytes to a float32 array of ``shape``."""
    dtype = as_dtype(dtype)
    if not dtype.supported:
        raise UnsupportedDType(dtype.name)
    arr = np.frombuffer(raw, dtype=_NUMPY[dtype.name])
    if dtype.name == "BF16":
        arr = (arr.astype(np.uint32) << np.uint32(16)).view(np.float32)
    else:
        arr = arr.astype(np.float32)
    return arr.reshape(tuple(shape))


def _f32_to_bf16(values: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    rounded = bits + np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    out = (rounded >> np.uint32(16)).astype(np.uint16)
    nan = np.isnan(values.astype(np.float32))
    out[nan] = 0x7FC0
    return out


def encode(values, dtype: DType | str) -> bytes:
    dtype = as_dtype(dtype)
    if not dtype.supported:
        raise UnsupportedDType(dtype.name)
    arr = np.asarray(values)
    if dtype.name == "BF16":
        return _f32_to_bf16(arr.astype(np.float32)).astype("<u2").tobytes()
    return arr.astype(_NUMPY[dtype.name]).tobytes()


# -- reading ------------------------------------------------------------------

class SafetensorsFile:
    """A parsed file on disk. Tensor reads touch only that tensor's byte range."""

    def __init__(self, path: PathLike, *, strict: bool = True):
        self.path = Path(path)
        self.index = read_index(self.path, strict=strict)

    @property
    def tensors(self) -> dict[str, TensorInfo]:
        return self.index.tensors

    @property
    def metadata(self) -> dict[str, str] | None:
        return self.index.metadata

    def names(self) -> list[str]:
        return list(self.index.tensors)

    def read_raw(self, name: str) -> bytes:
        info = self.index[name]
        if info.end > self.index.data_region_len:
            raise OffsetOutOfRange(f"{name}: end offset {info.end} exceeds data region")
        with open(self.path, "rb") as f:
            return _read_at(f, self.index.data_start + info.begin, info.nbytes)

    def read_tensor(self, name: str) -> np.ndarray:
        info = self.index[name]
        if not info.dtype.supported:
            raise UnsupportedDType(info.dtype.name)
        return decode(self.read_raw(name), info.dtype, info.shape)


def _read_at(f: BinaryIO, offset: int, n: int) -> bytes:
    f.seek(offset)
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFile(f"expected {n} bytes at offset {offset}, got {len(data)}")
    return data


def read_tensor(file: SafetensorsFile | PathLike, name: str) -> np.ndarray:
    """Tensor ``name`` widened or narrowed to float32."""
    if not isinstance(file, SafetensorsFile):
        file = SafetensorsFile(file)
    return file.read_tensor(name)


# -- writing ------------------------------------------------------------------

TensorSpec = Union[tuple, np.ndarray]


def _normalize_entry(name: str, spec) -> tuple[DType, tuple[int, ...], bytes | np.ndarray]:
    """Accept ``ndarray`` (F32), ``(dtype, shape, values)`` or ``(dtype, shape, raw_bytes)``."""
    if isinstance(spec, np.ndarray):
        return F32, tuple(spec.shape), spec
    dtype, shape, values = spec
    dtype = as_dtype(dtype)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeMismatch(f"{name}: negative dimension in {list(shape)}")
    n = math.prod(shape)
    if isinstance(values, (bytes, bytearray, memoryview)):
        width = dtype.byte_width
        if width is not None and len(values) != width * n:
            raise ShapeMismatch(f"{name}: {len(values)} bytes for {dtype}{list(shape)}")
        return dtype, shape, bytes(values)
    arr = np.asarray(values)
    if arr.size != n:
        raise ShapeMismatch(f"{name}: {arr.size} values for shape {list(shape)}")
    return dtype, shape, arr


def _layout(entries: list[tuple[str, DType, tuple[int, ...], int]], metadata: Mapping[str, str] | None) -> bytes:
    header: dict = {}
    if metadata is not None:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    offset = 0
    for name, dtype, shape, nbytes in entries:
        header[name] = {"dtype": dtype.name, "shape": list(shape), "data_offsets": [offset, offset + nbytes]}
        offset += nbytes
    text = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text


def _iter_file(tensors: Mapping[str, TensorSpec], metadata: Mapping[str, str] | None) -> Iterator[bytes]:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise DuplicateName("tensor names must be unique")
    entries, payloads = [], []
    for name in names:
        if name == METADATA_KEY:
            raise DuplicateName(f"{METADATA_KEY} is reserved")
        dtype, shape, values = _normalize_entry(name, tensors[name])
        payload = values if isinstance(values, bytes) else encode(values, dtype)
        entries.append((name, dtype, shape, len(payload)))
        payloads.append(payload)
    yield _layout(entries, metadata)
    yield from payloads


def write_file(tensors: Mapping[str, TensorSpec], metadata: Mapping[str, str] | None = None) -> bytes:
    """Serialize ``tensors`` (in mapping order) to safetensors bytes."""
    return b"".join(_iter_file(tensors, metadata))


def save_file(path: PathLike, tensors: Mapping[str, TensorSpec], metadata: Mapping[str, str] | None = None) -> Path:
    path = Path(path)
    with open(path, "wb") as f:
        for chunk in _iter_file(tensors, metadata):
            f.write(chunk)
    return path


def copy_tensors(
    path: PathLike,
    sources: list[tuple[str, SafetensorsFile]],
    metadata: Mapping[str, str] | None = None,
    replace: Mapping[str, TensorSpec] | None = None,
) -> Path:
    """Write ``path`` from tensors of opened files, one tensor in memory at a time.

    ``sources`` lists ``(name, file)`` in output order; entries of ``replace``
    substitute new contents for the named tensors.
    """
    replace = dict(replace or {})
    entries = []
    for name, src in sources:
        if name in replace:
            dtype, shape, values = _normalize_entry(name, replace[name])
            replace[name] = (dtype, shape, values if isinstance(values, bytes) else encode(values, dtype))
            entries.append((name, dtype, shape, len(replace[name][2])))
        else:
            info = src.index[name]
            entries.append((name, info.dtype, info.shape, info.nbytes))
    if len({e[0] for e in entries}) != len(entries):
        raise DuplicateName("tensor names must be unique")
    path = Path(path)
    with open(path, "wb") as out:
        out.write(_layout(entries, metadata))
        for name, src in sources:
            out.write(replace[name][2] if name in replace else src.read_raw(name))
    return path


# -- shards -------------------------------------------------------------------

@dataclass
class ShardSet:
    source: str  # "index" or "pattern"
    shards: list[tuple[Path, SafetensorsFile]]
    weight_map: dict[str, Path]
    order: list[str] = field(default_factory=list)
    pattern: str | None = None


def _find_pattern_shards(directory: Path) -> list[Path]:
    matched = []
    for p in directory.iterdir():
        m = SHARD_PATTERN.fullmatch(p.name)
        if m and p.is_file():
            matched.append((int(m.group(1)), p.name, p))
    if matched:
        return [p for _, _, p in sorted(matched)]
    return sorted((p for p in directory.glob("*.safetensors") if p.is_file()), key=lambda p: p.name)


def load_shard_set(directory: PathLike, strategy: str | None = None) -> ShardSet:
    """Discover shards under ``directory``.

    ``strategy`` is ``"index"`` (use ``model.safetensors.index.json``),
    ``"pattern"`` (filename regex, lexicographic fallback) or ``None`` to
    prefer the index file when present.
    """
    directory = Path(directory)
    index_path = directory / INDEX_FILENAME
    if strategy is None:
        strategy = "index" if index_path.exists() else "pattern"
    if strategy not in ("index", "pattern"):
        raise ValueError(f"unknown shard strategy {strategy!r}")

    if strategy == "index":
        if not index_path.exists():
            raise NoShardsFound(f"{index_path} not found")
        with open(index_path, encoding="utf-8") as f:
            doc = json.load(f)
        weight_map = doc.get("weight_map")
        if not isinstance(weight_map, dict) or not weight_map:
            raise NoShardsFound(f"{index_path} has no weight_map")
        files = list(dict.fromkeys(weight_map.values()))
        shards = []
        for fname in files:
            p = directory / fname
            if not p.exists():
                raise MissingIndexEntry(f"weight_map references missing shard {fname}")
            shards.append((p, SafetensorsFile(p)))
        by_file = dict(zip(files, (sf for _, sf in shards)))
        for tensor, fname in weight_map.items():
            if tensor not in by_file[fname].index:
                raise MissingIndexEntry(f"{tensor!r} listed in weight_map but absent from {fname}")
        order = list(weight_map)
        pattern = None
    else:
        paths = _find_pattern_shards(directory)
        if not paths:
            raise NoShardsFound(f"no .safetensors shards in {directory}")
        shards = [(p, SafetensorsFile(p)) for p in paths]
        order = []
        pattern = SHARD_PATTERN.pattern

    owner: dict[str, Path] = {}
    in_shard_order: list[str] = []
    for p, sf in shards:
        for name in sf.names():
            if name in owner:
                raise DuplicateTensorAcrossShards(f"{name!r} appears in {owner[name].name} and {p.name}")
            owner[name] = p
            in_shard_order.append(name)

    if strategy == "pattern":
        order = in_shard_order
    else:
        listed = set(order)
        extra = [n for n in in_shard_order if n not in listed]
        if extra:
            log.warning("%d tensor(s) present in shards but missing from weight_map; appended", len(extra))
            order = order + extra
    return ShardSet(strategy, shards, owner, order, pattern)


def merge_shards(directory: PathLike, output: PathLike, strategy: str | None = None) -> ShardSet:
    """Merge all shards under ``directory`` into a single file at ``output``."""
    shard_set = load_shard_set(directory, strategy)
    files = {p: sf for p, sf in shard_set.shards}
    metadata = {
        "merge_strategy": shard_set.source,
        "tensor_order": "weight_map" if shard_set.source == "index" else "shard",
        "shard_count": str(len(shard_set.shards)),
    }
    copy_tensors(output, [(n, files[shard_set.weight_map[n]]) for n in shard_set.order], metadata)
    return shard_set
