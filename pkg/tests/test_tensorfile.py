import json
import struct
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import raw_file
from gradprint.errors import (
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
from gradprint.tensorfile import (
    BF16,
    F16,
    F32,
    F64,
    DType,
    Gap,
    Overlap,
    OutOfRange,
    SafetensorsFile,
    ZeroSizedAlias,
    load_shard_set,
    merge_shards,
    parse_header,
    read_index,
    read_tensor,
    save_file,
    validate,
    write_file,
)


def entry(dtype, shape, begin, end):
    return {"dtype": dtype, "shape": shape, "data_offsets": [begin, end]}


# -- parse_header --------------------------------------------------------------

def test_minimal_file_with_header_length_62():
    text = b'{"t":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}'.ljust(62)
    data = np.arange(4, dtype="<f4").tobytes()
    index = parse_header(struct.pack("<Q", 62) + text + data)
    assert index.header_len == 62
    assert list(index.tensors) == ["t"]
    t = index.tensors["t"]
    assert t.dtype == F32 and t.shape == (2, 2) and t.data_offsets == (0, 16)
    assert index.data_region_len == 16


def test_size_mismatch_is_malformed():
    buf = raw_file({"t": entry("F32", [2, 2], 0, 17)}, bytes(17))
    with pytest.raises(MalformedHeader, match="17"):
        parse_header(buf)


def test_short_file_is_truncated():
    with pytest.raises(TruncatedFile):
        parse_header(b"\x00\x01\x02\x03")


def test_header_longer_than_file_is_truncated():
    buf = raw_file({"t": entry("F32", [1], 0, 4)}, bytes(4))
    with pytest.raises(TruncatedFile):
        parse_header(buf[:20])


@pytest.mark.parametrize(
    "header",
    [
        b"not json",
        b"[1, 2]",
        json.dumps({"t": {"dtype": "F32", "shape": [1]}}).encode(),
        json.dumps({"t": {**entry("F32", [1], 0, 4), "extra": 1}}).encode(),
        json.dumps({"t": entry("F32", [-1], 0, 4)}).encode(),
        json.dumps({"t": entry("F32", [1], 4, 0)}).encode(),
        json.dumps({"__metadata__": {"a": 1}}).encode(),
        b'{"t": {"dtype":"F32","shape":[1],"data_offsets":[0,4]}, "t": {"dtype":"F32","shape":[1],"data_offsets":[0,4]}}',
    ],
)
def test_malformed_headers(header):
    buf = struct.pack("<Q", len(header)) + header + bytes(4)
    with pytest.raises(MalformedHeader):
        parse_header(buf)


def test_out_of_range_is_an_error_when_strict_and_a_violation_otherwise():
    buf = raw_file({"a": entry("F32", [4], 0, 16), "b": entry("F32", [4], 16, 32)}, bytes(16))
    with pytest.raises(OffsetOutOfRange):
        parse_header(buf)
    index = parse_header(buf, strict=False)
    assert OutOfRange("b") in validate(index)


def test_header_order_is_preserved_and_metadata_read():
    header = {"__metadata__": {"format": "pt"}, "z": entry("F32", [1], 0, 4), "a": entry("F32", [1], 4, 8)}
    index = parse_header(raw_file(header, bytes(8)))
    assert list(index.tensors) == ["z", "a"]
    assert index.metadata == {"format": "pt"}


def test_unsupported_dtypes_parse_with_known_widths():
    index = parse_header(raw_file({"q": entry("I8", [4], 0, 4), "f8": entry("F8_E4M3", [2], 4, 6)}, bytes(6)))
    assert not index.tensors["q"].dtype.supported
    assert index.tensors["f8"].dtype == DType("F8_E4M3")
    with pytest.raises(MalformedHeader):
        parse_header(raw_file({"q": entry("I16", [4], 0, 4)}, bytes(4)))


# -- validate -----------------------------------------------------------------

def test_identical_intervals_overlap():
    index = parse_header(raw_file({"a": entry("F32", [4], 0, 16), "b": entry("F32", [4], 0, 16)}, bytes(16)))
    assert validate(index) == [Overlap("a", "b")]


def test_gap_between_tensors():
    index = parse_header(raw_file({"a": entry("F32", [4], 0, 16), "b": entry("F32", [4], 32, 48)}, bytes(48)))
    assert validate(index) == [Gap(16)]


def test_trailing_gap():
    index = parse_header(raw_file({"a": entry("F32", [4], 0, 16)}, bytes(20)))
    assert validate(index) == [Gap(16)]


def test_well_formed_two_tensor_file():
    index = parse_header(raw_file({"a": entry("F32", [4], 0, 16), "b": entry("F16", [2], 16, 20)}, bytes(20)))
    assert validate(index) == []


def test_zero_sized_tensors_at_same_offset_alias():
    header = {"a": entry("F32", [0], 0, 0), "b": entry("F32", [0, 3], 0, 0), "c": entry("F32", [1], 0, 4)}
    index = parse_header(raw_file(header, bytes(4)))
    assert validate(index) == [ZeroSizedAlias("a", "b")]


def test_partial_overlap_reports_pair():
    header = {"a": entry("F32", [4], 0, 16), "b": entry("F32", [2], 8, 16), "c": entry("F32", [2], 16, 24)}
    assert validate(parse_header(raw_file(header, bytes(24)))) == [Overlap("a", "b")]


# -- read_tensor ----------------------------------------------------------------

def test_bf16_ones(tmp_path):
    path = tmp_path / "bf.safetensors"
    path.write_bytes(raw_file({"w": entry("BF16", [2, 3], 0, 12)}, bytes.fromhex("803f") * 6))
    out = read_tensor(path, "w")
    assert out.dtype == np.float32
    assert np.array_equal(out, np.ones((2, 3), dtype=np.float32))


def test_dtype_conversions(tmp_path):
    vals = np.array([1.5, -2.25, 1e-3, 3.0e38], dtype=np.float64)
    path = tmp_path / "mix.safetensors"
    save_file(path, {
        "f64": (F64, [4], vals),
        "f16": (F16, [3], vals[:3]),
        "bf16": (BF16, [2], np.array([1.0, -0.5], dtype=np.float32)),
    })
    f = SafetensorsFile(path)
    assert np.array_equal(f.read_tensor("f64"), vals.astype(np.float32))
    assert np.array_equal(f.read_tensor("f16"), vals[:3].astype(np.float16).astype(np.float32))
    assert np.array_equal(f.read_tensor("bf16"), [1.0, -0.5])


def test_unknown_and_unsupported(tmp_path):
    path = tmp_path / "q.safetensors"
    path.write_bytes(raw_file({"q": entry("I8", [4], 0, 4)}, bytes(4)))
    with pytest.raises(UnknownTensor):
        read_tensor(path, "missing")
    with pytest.raises(UnsupportedDType) as exc:
        read_tensor(path, "q")
    assert exc.value.dtype == "I8"
    path.write_bytes(raw_file({"q": entry("F8_E4M3", [4], 0, 4)}, bytes(4)))
    with pytest.raises(UnsupportedDType, match="F8_E4M3"):
        read_tensor(path, "q")


def test_read_touches_only_one_tensor(tmp_path):
    big = np.zeros((512, 1024), dtype=np.float32)  # 2 MiB
    small = np.arange(16, dtype=np.float32)
    path = tmp_path / "big.safetensors"
    save_file(path, {"big": big, "small": small})
    f = SafetensorsFile(path)
    tracemalloc.start()
    out = f.read_tensor("small")
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    assert np.array_equal(out, small)
    assert peak < 64 * 1024


# -- write_file ----------------------------------------------------------------

def test_roundtrip_single_tensor():
    buf = write_file({"v": np.array([1.0, 2.0], dtype=np.float32)})
    index = parse_header(buf)
    assert (8 + index.header_len) % 8 == 0
    data = buf[index.data_start:]
    assert np.array_equal(np.frombuffer(data, "<f4"), [1.0, 2.0])


def test_empty_map():
    buf = write_file({})
    assert buf[8:].rstrip(b" ") == b"{}"
    index = parse_header(buf)
    assert index.tensors == {} and index.data_region_len == 0
    assert validate(index) == []


def test_insertion_order_preserved():
    buf = write_file({"zeta": np.zeros(2, np.float32), "alpha": np.ones(3, np.float32)})
    assert list(parse_header(buf).tensors) == ["zeta", "alpha"]


def test_writer_errors():
    with pytest.raises(ShapeMismatch):
        write_file({"a": ("F32", [3], np.zeros(2))})
    with pytest.raises(DuplicateName):
        write_file({"__metadata__": np.zeros(1, np.float32)})


tensor_maps = st.dictionaries(
    st.text(st.characters(codec="utf-8", exclude_characters="\x00"), min_size=1, max_size=12).filter(
        lambda s: s != "__metadata__"
    ),
    st.tuples(
        st.sampled_from(["F32", "F16", "BF16", "F64"]),
        st.lists(st.integers(0, 4), max_size=3),
        st.integers(0, 2**32 - 1),
    ),
    max_size=6,
)


def _materialize(spec):
    out = {}
    for name, (dtype, shape, seed) in spec.items():
        n = int(np.prod(shape)) if shape else 1
        width = DType(dtype).byte_width
        raw = np.random.default_rng(seed).integers(0, 256, size=n * width, dtype=np.uint8).tobytes()
        out[name] = (dtype, shape, raw)
    return out


@settings(max_examples=50, deadline=None)
@given(tensor_maps)
def test_roundtrip_is_bit_exact(spec):
    tensors = _materialize(spec)
    buf = write_file(tensors, metadata={"k": "v"})
    index = parse_header(buf)
    assert list(index.tensors) == list(tensors)
    # empty tensors legitimately share an offset
    assert all(isinstance(v, ZeroSizedAlias) for v in validate(index))
    for name, (dtype, shape, raw) in tensors.items():
        t = index.tensors[name]
        assert t.dtype.name == dtype and list(t.shape) == list(shape)
        assert buf[index.data_start + t.begin: index.data_start + t.end] == raw


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(width=32, allow_nan=False), min_size=1, max_size=20))
def test_f32_values_roundtrip(values):
    arr = np.array(values, dtype=np.float32)
    index = parse_header(buf := write_file({"x": arr}))
    assert np.frombuffer(buf[index.data_start:], "<f4").tobytes() == arr.tobytes()


# -- shards --------------------------------------------------------------------

def _model(n=6, seed=0):
    r = np.random.default_rng(seed)
    return {f"layer.{i}.weight": r.normal(size=(3, 2)).astype(np.float32) for i in range(n)}


def _write_shards(directory, tensors, groups, index=True):
    names = list(tensors)
    weight_map = {}
    for k, group in enumerate(groups, 1):
        fname = f"model-{k:05d}-of-{len(groups):05d}.safetensors"
        save_file(directory / fname, {names[i]: tensors[names[i]] for i in group})
        for i in group:
            weight_map[names[i]] = fname
    if index:
        (directory / "model.safetensors.index.json").write_text(json.dumps({"metadata": {}, "weight_map": weight_map}))
    return weight_map


def test_merge_two_shards_with_index(tmp_path):
    tensors = _model(4)
    _write_shards(tmp_path, tensors, [[0, 1], [2, 3]])
    out = tmp_path / "merged.safetensors"
    merge_shards(tmp_path, out)
    f = SafetensorsFile(out)
    assert f.names() == list(tensors)
    for name, w in tensors.items():
        assert f.read_tensor(name).tobytes() == w.tobytes()
    assert validate(f.index) == []
    assert f.metadata["tensor_order"] == "weight_map"


def test_index_order_wins_over_shard_order(tmp_path):
    tensors = _model(4)
    wm = _write_shards(tmp_path, tensors, [[0, 1], [2, 3]], index=False)
    reordered = {k: wm[k] for k in ["layer.3.weight", "layer.0.weight", "layer.2.weight", "layer.1.weight"]}
    (tmp_path / "model.safetensors.index.json").write_text(json.dumps({"weight_map": reordered}))
    out = tmp_path / "m.safetensors"
    merge_shards(tmp_path, out, "index")
    assert SafetensorsFile(out).names() == list(reordered)
    merge_shards(tmp_path, out, "pattern")
    assert SafetensorsFile(out).names() == list(tensors)


def test_missing_index_entry(tmp_path):
    tensors = _model(4)
    wm = _write_shards(tmp_path, tensors, [[0, 1], [2, 3]], index=False)
    wm["lm_head.weight"] = "model-00002-of-00002.safetensors"
    (tmp_path / "model.safetensors.index.json").write_text(json.dumps({"weight_map": wm}))
    with pytest.raises(MissingIndexEntry, match="lm_head"):
        merge_shards(tmp_path, tmp_path / "m.safetensors")


def test_duplicate_across_shards(tmp_path):
    tensors = _model(3)
    _write_shards(tmp_path, tensors, [[0, 1], [1, 2]], index=False)
    with pytest.raises(DuplicateTensorAcrossShards):
        merge_shards(tmp_path, tmp_path / "m.safetensors", "pattern")


def test_no_shards(tmp_path):
    with pytest.raises(NoShardsFound):
        merge_shards(tmp_path, tmp_path / "m.safetensors")


def test_pattern_orders_numerically_and_falls_back_to_lexicographic(tmp_path):
    tensors = _model(3)
    names = list(tensors)
    for k, name in zip([10, 2, 1], names):
        save_file(tmp_path / f"model-{k}-of-10.safetensors", {name: tensors[name]})
    shard_set = load_shard_set(tmp_path, "pattern")
    assert [p.name for p, _ in shard_set.shards] == ["model-1-of-10.safetensors", "model-2-of-10.safetensors",
                                                     "model-10-of-10.safetensors"]
    other = tmp_path / "other"
    other.mkdir()
    save_file(other / "b.safetensors", {"b": tensors[names[0]]})
    save_file(other / "a.safetensors", {"a": tensors[names[1]]})
    assert load_shard_set(other).order == ["a", "b"]


def test_merge_equals_write_of_concatenation(tmp_path):
    tensors = _model(5, seed=3)
    _write_shards(tmp_path, tensors, [[0], [1, 2], [3, 4]])
    out = tmp_path / "m.safetensors"
    merge_shards(tmp_path, out)
    expected = write_file(tensors, metadata={"merge_strategy": "index", "tensor_order": "weight_map",
                                             "shard_count": "3"})
    assert out.read_bytes() == expected
    assert read_index(out).data_region_len == sum(w.nbytes for w in tensors.values())
