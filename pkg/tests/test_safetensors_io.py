import io
import json
import struct
import tracemalloc

import numpy as np
import pytest

import moemerge as mm
from moemerge.errors import FormatError
from moemerge.safetensors_io import _serialize_header

from conftest import TINY_SPEC, build_raw, build_safetensors


def f32(*values) -> bytes:
    return np.array(values, dtype="<f4").tobytes()


# --- read_header ----------------------------------------------------------------


def test_read_header_minimal_file():
    raw = build_safetensors([("a", "F32", [2, 2], f32(1, 2, 3, 4))], pad_to_8=False)
    size, tensors, metadata = mm.read_header(io.BytesIO(raw))
    assert metadata is None
    assert list(tensors) == ["a"]
    info = tensors["a"]
    assert info.dtype is mm.DType.F32
    assert info.shape == (2, 2)
    assert info.data_offsets == (0, 16)
    assert info.numel == 4 and info.nbytes == 16


def test_read_header_size_mismatch():
    raw = build_raw({"a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, b"\0" * 8)
    with pytest.raises(FormatError, match="size mismatch"):
        mm.read_header(io.BytesIO(raw))


def test_read_header_unknown_dtype():
    raw = build_raw({"a": {"dtype": "F13", "shape": [1], "data_offsets": [0, 2]}}, b"\0" * 2)
    with pytest.raises(FormatError, match="unknown dtype"):
        mm.read_header(io.BytesIO(raw))


def test_read_header_fp8_is_clean_unsupported():
    raw = build_raw({"a": {"dtype": "F8_E4M3", "shape": [4], "data_offsets": [0, 4]}}, b"\0" * 4)
    with pytest.raises(FormatError, match="FP8"):
        mm.read_header(io.BytesIO(raw))


def test_read_header_duplicate_names():
    payload = b'{"a":{"dtype":"U8","shape":[1],"data_offsets":[0,1]},"a":{"dtype":"U8","shape":[1],"data_offsets":[1,2]}}'
    raw = struct.pack("<Q", len(payload)) + payload + b"\0\0"
    with pytest.raises(FormatError, match="duplicate"):
        mm.read_header(io.BytesIO(raw))


def test_read_header_length_beyond_file():
    raw = struct.pack("<Q", 1 << 40) + b"{}"
    with pytest.raises(FormatError, match="exceeds"):
        mm.read_header(io.BytesIO(raw))


def test_read_header_truncated():
    with pytest.raises(FormatError, match="truncated"):
        mm.read_header(io.BytesIO(b"\x08\x00\x00"))


def test_read_header_bad_json():
    payload = b'{"a": nope}'
    raw = struct.pack("<Q", len(payload)) + payload
    with pytest.raises(FormatError, match="JSON"):
        mm.read_header(io.BytesIO(raw))


def test_read_header_scalar_tensor():
    raw = build_safetensors([("s", "F64", [], np.float64(3.5).tobytes())])
    _, tensors, _ = mm.read_header(io.BytesIO(raw))
    assert tensors["s"].shape == ()
    assert tensors["s"].numel == 1


def test_read_header_preserves_order():
    entries = [(f"t{i}", "U8", [1], bytes([i])) for i in (3, 1, 2, 0)]
    raw = build_safetensors(entries)
    _, tensors, _ = mm.read_header(io.BytesIO(raw))
    assert list(tensors) == ["t3", "t1", "t2", "t0"]


def test_read_header_roundtrip_against_manifest(tiny_base):
    index, manifest = tiny_base
    by_name = {m["name"]: m for m in manifest}
    assert set(index.tensors) == set(by_name)
    for name, info in index.tensors.items():
        assert list(info.shape) == by_name[name]["shape"]
        assert info.dtype.code == by_name[name]["dtype"]


# --- open_checkpoint --------------------------------------------------------------


def test_open_single_file_equals_one_shard_dir(tmp_path):
    raw = build_safetensors([("a", "F32", [2], f32(5, 6))])
    single = tmp_path / "m.safetensors"
    single.write_bytes(raw)
    as_dir = tmp_path / "dir"
    as_dir.mkdir()
    (as_dir / "m.safetensors").write_bytes(raw)
    one = mm.open_checkpoint(single)
    two = mm.open_checkpoint(as_dir)
    assert set(one.tensors) == set(two.tensors) == {"a"}
    assert one.tensors["a"].data_offsets == two.tensors["a"].data_offsets


def test_open_sharded_with_index(tiny_base):
    index, manifest = tiny_base
    assert index.index_name is not None
    assert len(index.shards) >= 2
    assert len(index.tensors) == len(manifest)


def test_open_missing_shard(tmp_path):
    raw = build_safetensors([("a", "U8", [1], b"\x01")])
    (tmp_path / "s1.safetensors").write_bytes(raw)
    (tmp_path / "model.safetensors.index.json").write_text(
        json.dumps({"metadata": {}, "weight_map": {"a": "s1.safetensors", "b": "gone.safetensors"}})
    )
    with pytest.raises(FormatError, match="missing shard"):
        mm.open_checkpoint(tmp_path)


def test_open_duplicate_across_shards(tmp_path):
    raw = build_safetensors([("a", "U8", [1], b"\x01")])
    (tmp_path / "s1.safetensors").write_bytes(raw)
    (tmp_path / "s2.safetensors").write_bytes(raw)
    with pytest.raises(FormatError, match="appears in both"):
        mm.open_checkpoint(tmp_path)


def test_open_empty_dir(tmp_path):
    with pytest.raises(FormatError, match="no .safetensors"):
        mm.open_checkpoint(tmp_path)


def test_open_rejects_overlap(tmp_path):
    header = {
        "a": {"dtype": "U8", "shape": [2], "data_offsets": [0, 2]},
        "b": {"dtype": "U8", "shape": [2], "data_offsets": [1, 3]},
    }
    p = tmp_path / "m.safetensors"
    p.write_bytes(build_raw(header, b"\0" * 3))
    with pytest.raises(FormatError, match="overlaps"):
        mm.open_checkpoint(p)


def test_open_rejects_range_past_data_end(tmp_path):
    p = tmp_path / "m.safetensors"
    p.write_bytes(build_raw({"a": {"dtype": "U8", "shape": [4], "data_offsets": [0, 4]}}, b"\0"))
    with pytest.raises(FormatError, match="exceeds data region"):
        mm.open_checkpoint(p)


# --- read_tensor -------------------------------------------------------------------


def test_read_tensor_values(tmp_path):
    p = tmp_path / "m.safetensors"
    p.write_bytes(build_safetensors([("x", "F32", [2], f32(1.0, 2.0))]))
    data = mm.read_tensor(mm.open_checkpoint(p), "x")
    assert data.values.tolist() == [1.0, 2.0]
    assert data.raw == f32(1.0, 2.0)


def test_read_tensor_bf16_one(tmp_path):
    p = tmp_path / "m.safetensors"
    p.write_bytes(build_safetensors([("x", "BF16", [1], struct.pack("<H", 0x3F80))]))
    data = mm.read_tensor(mm.open_checkpoint(p), "x")
    assert data.values.tolist() == [1.0]


def test_read_tensor_matches_generator_values(tiny_base):
    index, _ = tiny_base
    from moemerge.fixtures import _base_values
    from moemerge import tensor_math

    for name in list(index.tensors)[:5]:
        info = index.tensors[name]
        want = tensor_math.decode(
            tensor_math.encode(_base_values(TINY_SPEC, name, info.numel), info.dtype),
            info.dtype,
        )
        got = mm.read_tensor(index, name).values
        assert np.array_equal(got, want)


def test_read_tensor_absent(tiny_base):
    index, _ = tiny_base
    with pytest.raises(KeyError, match="nope"):
        mm.read_tensor(index, "nope")


def test_read_tensor_memory_is_tensor_sized(tmp_path):
    big = np.zeros(2_000_000, dtype="<f4").tobytes()  # 8 MB shard
    small = f32(*range(8))
    p = tmp_path / "m.safetensors"
    p.write_bytes(build_safetensors([("big", "F32", [2_000_000], big), ("small", "F32", [8], small)]))
    index = mm.open_checkpoint(p)
    del big
    tracemalloc.start()
    mm.read_tensor(index, "small")
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert peak < 512 * 1024, f"read_tensor allocated {peak} bytes for a 32-byte tensor"


# --- write_checkpoint ---------------------------------------------------------------


def stream_of(index):
    for name in index.layout_names():
        yield index.tensors[name], mm.read_tensor_raw(index, name)


def test_write_roundtrip_bytes_identical(tiny_base, tmp_path):
    index, _ = tiny_base
    out = mm.write_checkpoint(stream_of(index), tmp_path / "copy", base=index)
    assert set(out.tensors) == set(index.tensors)
    for name in index.tensors:
        assert mm.read_tensor_raw(out, name) == mm.read_tensor_raw(index, name)
        assert out.tensors[name].dtype is index.tensors[name].dtype
        assert out.tensors[name].shape == index.tensors[name].shape


def test_write_mirror_is_byte_identical_except_metadata(tiny_base, tmp_path):
    index, _ = tiny_base
    out_dir = tmp_path / "mirrored"
    out = mm.write_checkpoint(
        stream_of(index), out_dir, base=index, metadata={"aoe.base": "x"}
    )
    assert [s.name for s in out.shards] == [s.name for s in index.shards]
    for ours, theirs in zip(out.shards, index.shards):
        ours_bytes = ours.path.read_bytes()[ours.data_start :]
        theirs_bytes = theirs.path.read_bytes()[theirs.data_start :]
        assert ours_bytes == theirs_bytes  # data region untouched
        assert ours.metadata == {"aoe.base": "x"}
    # without extra metadata the whole shard files are byte-identical
    out2 = mm.write_checkpoint(stream_of(index), tmp_path / "plain", base=index)
    for ours, theirs in zip(out2.shards, index.shards):
        assert ours.path.read_bytes() == theirs.path.read_bytes()


def test_write_second_write_is_byte_stable(tiny_base, tmp_path):
    index, _ = tiny_base
    first = mm.write_checkpoint(stream_of(index), tmp_path / "w1", base=index)
    second = mm.write_checkpoint(stream_of(first), tmp_path / "w2", base=first)
    for a, b in zip(first.shards, second.shards):
        assert a.path.read_bytes() == b.path.read_bytes()
    assert (tmp_path / "w1" / first.index_name).read_text() == (
        tmp_path / "w2" / second.index_name
    ).read_text()


def test_write_pack_shard_arithmetic(tmp_path):
    infos = [
        mm.TensorInfo(f"t{i}", mm.DType.U8, (1024,), (0, 1024)) for i in range(3)
    ]
    stream = ((info, bytes(1024)) for info in infos)
    policy = mm.OutputPolicy(mode="pack", max_shard_bytes=2048)
    out = mm.write_checkpoint(stream, tmp_path / "packed", policy)
    assert len(out.shards) == 2
    assert [s.name for s in out.shards] == [
        "model-00001-of-00002.safetensors",
        "model-00002-of-00002.safetensors",
    ]


def test_write_pack_tensor_larger_than_shard(tmp_path):
    info = mm.TensorInfo("t", mm.DType.U8, (4096,), (0, 4096))
    policy = mm.OutputPolicy(mode="pack", max_shard_bytes=1024)
    with pytest.raises(FormatError, match="exceeds"):
        mm.write_checkpoint(iter([(info, bytes(4096))]), tmp_path / "p", policy)


def test_write_duplicate_name_in_stream(tmp_path):
    info = mm.TensorInfo("t", mm.DType.U8, (1,), (0, 1))
    with pytest.raises(FormatError, match="duplicate"):
        mm.write_checkpoint(
            iter([(info, b"\x01"), (info, b"\x02")]), tmp_path / "d.safetensors"
        )


def test_write_mirror_rejects_wrong_order(tiny_base, tmp_path):
    index, _ = tiny_base
    names = index.layout_names()
    swapped = [names[1], names[0]] + names[2:]

    def stream():
        for name in swapped:
            yield index.tensors[name], mm.read_tensor_raw(index, name)

    with pytest.raises(FormatError, match="order"):
        mm.write_checkpoint(stream(), tmp_path / "bad", base=index)


def test_write_empty_stream(tmp_path):
    with pytest.raises(FormatError, match="empty"):
        mm.write_checkpoint(iter([]), tmp_path / "e.safetensors")


def test_header_serialization_is_padded_and_compact():
    info = mm.TensorInfo("a", mm.DType.F32, (2,), (0, 8))
    header = _serialize_header([info], None)
    assert (8 + len(header)) % 8 == 0
    assert json.loads(header.decode()) == {
        "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}
    }


# --- validate_checkpoint -------------------------------------------------------------


def test_validate_clean_fixture(tiny_base):
    index, _ = tiny_base
    assert mm.validate_checkpoint(index) == []
    assert mm.validate_checkpoint(index.root) == []


def test_validate_reports_size_mismatch(tmp_path):
    # end offset reduced by 4: the lenient scanner reports instead of raising
    header = {
        "a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]},
    }
    p = tmp_path / "m.safetensors"
    p.write_bytes(build_raw(header, b"\0" * 8))
    issues = mm.validate_checkpoint(p)
    assert len(issues) == 1
    assert issues[0].kind == "size_mismatch"


def test_validate_reports_gap_and_overlap(tmp_path):
    header = {
        "a": {"dtype": "U8", "shape": [2], "data_offsets": [0, 2]},
        "b": {"dtype": "U8", "shape": [2], "data_offsets": [4, 6]},
        "c": {"dtype": "U8", "shape": [3], "data_offsets": [5, 8]},
    }
    p = tmp_path / "m.safetensors"
    p.write_bytes(build_raw(header, b"\0" * 8))
    kinds = {i.kind for i in mm.validate_checkpoint(p)}
    assert "gap" in kinds and "overlap" in kinds


def test_validate_reports_missing_shard(tmp_path):
    (tmp_path / "s1.safetensors").write_bytes(build_safetensors([("a", "U8", [1], b"\0")]))
    (tmp_path / "model.safetensors.index.json").write_text(
        json.dumps({"metadata": {}, "weight_map": {"a": "s1.safetensors", "b": "x.safetensors"}})
    )
    kinds = {i.kind for i in mm.validate_checkpoint(tmp_path)}
    assert "missing_shard" in kinds


def test_cross_validation_of_fixture_pair(tiny_pair):
    # two checkpoints generated from one manifest agree on names/shapes/dtypes
    assert mm.validate_compatibility([tiny_pair["base"], tiny_pair["variant"]]) == []


# --- metadata and fingerprints --------------------------------------------------------


def test_metadata_preserved_and_extended(tiny_base, tmp_path):
    index, _ = tiny_base
    first = mm.write_checkpoint(
        stream_of(index), tmp_path / "w1", base=index, metadata={"origin": "unit-test"}
    )
    assert first.metadata == {"origin": "unit-test"}
    second = mm.write_checkpoint(
        stream_of(first), tmp_path / "w2", base=first, metadata={"aoe.delta": "0.0"}
    )
    assert second.metadata == {"origin": "unit-test", "aoe.delta": "0.0"}


def test_fingerprint_tracks_header_changes(tiny_base, tmp_path):
    index, _ = tiny_base
    same = mm.open_checkpoint(index.root)
    assert index.fingerprint() == same.fingerprint()
    other = mm.write_checkpoint(
        stream_of(index), tmp_path / "w", base=index, metadata={"k": "v"}
    )
    assert other.fingerprint() != index.fingerprint()
