"""Bit-exact reading, validation, and writing of safetensors checkpoints.

File layout: ``[u64-LE header length][UTF-8 JSON header][raw tensor data]``.
Header entries are ``{"dtype": str, "shape": [ints], "data_offsets": [begin,
end]}`` keyed by tensor name, plus an optional ``"__metadata__"`` string map;
offsets are relative to the first byte after the header.

Checkpoints may be a single ``.safetensors`` file, a directory of shards with
a ``*.safetensors.index.json`` weight map, or a directory of shards without
an index (headers are unioned).

Reading a tensor touches only that tensor's byte range, so memory stays
O(tensor), never O(shard). Opening is strict (malformed headers, size
mismatches, overlapping ranges, duplicate names are errors);
``validate_checkpoint`` instead scans leniently and returns every violation
as a report entry.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from . import tensor_math
from .dtypes import DType
from .errors import FormatError

_HEADER_PREFIX = struct.Struct("<Q")
_COPY_CHUNK = 8 * 1024 * 1024
# Sanity bound on header size; a fuzzer can otherwise make us try to
# allocate whatever a random u64 says.
_MAX_HEADER_BYTES = 256 * 1024 * 1024

INDEX_SUFFIX = ".safetensors.index.json"


@dataclass(frozen=True)
class TensorInfo:
    """Location and type of one tensor at rest."""

    name: str
    dtype: DType
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]  # [begin, end) relative to the data region
    shard: str = ""  # shard file name within the checkpoint

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]


@dataclass(frozen=True)
class ShardInfo:
    """One shard file: where its data region starts and what its header was."""

    name: str
    path: Path
    data_start: int  # absolute offset of the data region
    data_size: int  # bytes from data_start to end of file
    header_hash: str  # sha256 over the length prefix + header JSON bytes
    metadata: dict[str, str] | None


@dataclass
class CheckpointIndex:
    """Unified view of a checkpoint: every tensor, across all shards.

    ``tensors`` preserves header order per shard, shards in listed order.
    ``metadata`` is the union of the shards' metadata blocks (later shards
    win on conflicting keys; shards written by this package carry identical
    blocks).
    """

    root: Path
    shards: list[ShardInfo]
    tensors: dict[str, TensorInfo]
    metadata: dict[str, str] | None = None
    index_name: str | None = None  # weight-map file name, when one exists
    index_metadata: dict | None = None  # the index JSON's "metadata" object

    def shard(self, name: str) -> ShardInfo:
        for s in self.shards:
            if s.name == name:
                return s
        raise KeyError(f"no shard named {name!r}")

    def layout_names(self) -> list[str]:
        """Tensor names in physical order: shard order, then data offset."""
        order = {s.name: i for i, s in enumerate(self.shards)}
        return sorted(
            self.tensors,
            key=lambda n: (
                order[self.tensors[n].shard],
                self.tensors[n].data_offsets[0],
                n,
            ),
        )

    def fingerprint(self) -> str:
        """Stable identity of the checkpoint's headers (not its data bytes)."""
        h = hashlib.sha256()
        for s in self.shards:
            h.update(s.name.encode("utf-8"))
            h.update(b"\x00")
            h.update(s.header_hash.encode("ascii"))
            h.update(b"\n")
        return h.hexdigest()


@dataclass
class TensorData:
    """A tensor pulled off disk: decoded working values plus original bytes."""

    info: TensorInfo
    values: np.ndarray  # float64, flat
    raw: bytes


@dataclass(frozen=True)
class ValidationIssue:
    kind: str
    detail: str
    shard: str | None = None
    name: str | None = None

    def __str__(self) -> str:
        where = ":".join(x for x in (self.shard, self.name) if x)
        return f"[{self.kind}] {where}: {self.detail}" if where else f"[{self.kind}] {self.detail}"


def _check_entry(name: str, entry: object) -> tuple[TensorInfo | None, str | None]:
    """Validate one header entry; returns (info, None) or (None, problem)."""
    if not isinstance(entry, dict):
        return None, "entry is not a JSON object"
    extra = set(entry) - {"dtype", "shape", "data_offsets"}
    if extra:
        return None, f"unexpected entry fields {sorted(extra)}"
    missing = {"dtype", "shape", "data_offsets"} - set(entry)
    if missing:
        return None, f"missing entry fields {sorted(missing)}"
    dtype_code = entry["dtype"]
    if not isinstance(dtype_code, str):
        return None, "dtype is not a string"
    try:
        dtype = DType.from_code(dtype_code)
    except FormatError as exc:
        return None, str(exc)
    shape = entry["shape"]
    if not isinstance(shape, list) or any(
        not isinstance(d, int) or isinstance(d, bool) or d < 0 for d in shape
    ):
        return None, f"invalid shape {shape!r}"
    offsets = entry["data_offsets"]
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or any(not isinstance(o, int) or isinstance(o, bool) for o in offsets)
    ):
        return None, f"invalid data_offsets {offsets!r}"
    begin, end = offsets
    if begin < 0 or end < begin:
        return None, f"invalid byte range [{begin}, {end})"
    expected = dtype.byte_width * math.prod(shape)
    if end - begin != expected:
        return None, (
            f"size mismatch: offsets span {end - begin} bytes but "
            f"{dtype.code} x shape {shape} needs {expected}"
        )
    return (
        TensorInfo(name=name, dtype=dtype, shape=tuple(shape), data_offsets=(begin, end)),
        None,
    )


def _reject_duplicate_keys(pairs: list[tuple[str, object]]) -> dict:
    obj: dict = {}
    for key, value in pairs:
        if key in obj:
            raise FormatError(f"duplicate tensor name {key!r} in header")
        obj[key] = value
    return obj


def _check_metadata(value: object) -> dict[str, str]:
    if not isinstance(value, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in value.items()
    ):
        raise FormatError("__metadata__ must be a string-to-string map")
    return dict(value)


def read_header(
    f: BinaryIO, shard: str = ""
) -> tuple[int, dict[str, TensorInfo], dict[str, str] | None]:
    """Parse the header of an open safetensors file.

    Returns ``(header_size, tensors, metadata)`` where ``header_size`` is the
    JSON byte length (the data region starts at ``8 + header_size``) and
    ``tensors`` preserves the header's entry order.

    Raises FormatError for every malformed case: truncation, header length
    exceeding the file, bad JSON, duplicate names, size-violating offsets,
    unknown dtypes.
    """
    pos = f.tell()
    file_size = f.seek(0, os.SEEK_END)
    f.seek(pos)
    prefix = f.read(8)
    if len(prefix) < 8:
        raise FormatError("truncated file: missing 8-byte header length")
    (header_size,) = _HEADER_PREFIX.unpack(prefix)
    if header_size > _MAX_HEADER_BYTES:
        raise FormatError(f"header length {header_size} exceeds sanity bound")
    if 8 + header_size > file_size - pos:
        raise FormatError(
            f"header length {header_size} exceeds file size {file_size - pos}"
        )
    header_bytes = f.read(header_size)
    if len(header_bytes) < header_size:
        raise FormatError("truncated file: incomplete header")
    try:
        obj = json.loads(
            header_bytes.decode("utf-8"), object_pairs_hook=_reject_duplicate_keys
        )
    except FormatError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise FormatError("header JSON is not an object")

    metadata: dict[str, str] | None = None
    tensors: dict[str, TensorInfo] = {}
    for name, entry in obj.items():
        if name == "__metadata__":
            metadata = _check_metadata(entry)
            continue
        info, problem = _check_entry(name, entry)
        if problem is not None:
            raise FormatError(f"tensor {name!r}: {problem}")
        assert info is not None
        tensors[name] = TensorInfo(
            name=info.name,
            dtype=info.dtype,
            shape=info.shape,
            data_offsets=info.data_offsets,
            shard=shard,
        )
    return header_size, tensors, metadata


def _hash_header(path: Path) -> tuple[int, str]:
    """Header size and sha256 over the first ``8 + header_size`` bytes."""
    with open(path, "rb") as f:
        prefix = f.read(8)
        if len(prefix) < 8:
            raise FormatError(f"{path.name}: truncated file")
        (header_size,) = _HEADER_PREFIX.unpack(prefix)
        if header_size > _MAX_HEADER_BYTES:
            raise FormatError(f"{path.name}: header length exceeds sanity bound")
        header = f.read(header_size)
        if len(header) < header_size:
            raise FormatError(f"{path.name}: truncated header")
    return header_size, hashlib.sha256(prefix + header).hexdigest()


def _check_ranges(shard: str, tensors: Iterable[TensorInfo], data_size: int) -> None:
    """Strict-open checks: every range inside the data region, no overlaps."""
    spans = sorted(
        ((t.data_offsets[0], t.data_offsets[1], t.name) for t in tensors),
    )
    prev_end = 0
    prev_name = None
    for begin, end, name in spans:
        if end > data_size:
            raise FormatError(
                f"{shard}: tensor {name!r} byte range [{begin}, {end}) "
                f"exceeds data region of {data_size} bytes"
            )
        if begin < prev_end:
            raise FormatError(
                f"{shard}: tensor {name!r} overlaps {prev_name!r}"
            )
        prev_end, prev_name = end, name


def _open_shard(path: Path) -> tuple[ShardInfo, dict[str, TensorInfo]]:
    with open(path, "rb") as f:
        header_size, tensors, metadata = read_header(f, shard=path.name)
    _, header_hash = _hash_header(path)
    data_start = 8 + header_size
    data_size = path.stat().st_size - data_start
    _check_ranges(path.name, tensors.values(), data_size)
    return (
        ShardInfo(
            name=path.name,
            path=path,
            data_start=data_start,
            data_size=data_size,
            header_hash=header_hash,
            metadata=metadata,
        ),
        tensors,
    )


def _find_index_file(root: Path) -> Path | None:
    candidates = sorted(p for p in root.iterdir() if p.name.endswith(INDEX_SUFFIX))
    if not candidates:
        return None
    if len(candidates) > 1:
        raise FormatError(
            f"{root}: multiple index files: {[p.name for p in candidates]}"
        )
    return candidates[0]


def open_checkpoint(path: str | Path) -> CheckpointIndex:
    """Open a checkpoint file or directory into one unified index.

    Raises FormatError on malformed shards, duplicate tensor names across
    shards, shards referenced by the index but missing on disk, or an empty
    checkpoint.
    """
    root = Path(path)
    if not root.exists():
        raise FileNotFoundError(f"no such checkpoint: {root}")

    if root.is_file():
        shard, tensors = _open_shard(root)
        if not tensors:
            raise FormatError(f"{root}: empty checkpoint")
        return CheckpointIndex(
            root=root, shards=[shard], tensors=tensors, metadata=shard.metadata
        )

    index_path = _find_index_file(root)
    shards: list[ShardInfo] = []
    tensors: dict[str, TensorInfo] = {}
    metadata: dict[str, str] | None = None

    if index_path is not None:
        try:
            index_obj = json.loads(index_path.read_text("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{index_path.name}: malformed index JSON: {exc}") from exc
        if not isinstance(index_obj, dict) or not isinstance(
            index_obj.get("weight_map"), dict
        ):
            raise FormatError(f"{index_path.name}: index lacks a weight_map object")
        weight_map: dict[str, str] = index_obj["weight_map"]
        shard_names = sorted(set(weight_map.values()))
        shard_tensors: dict[str, dict[str, TensorInfo]] = {}
        for shard_name in shard_names:
            shard_path = root / shard_name
            if not shard_path.is_file():
                raise FormatError(f"missing shard {shard_name!r} referenced by index")
            shard, entries = _open_shard(shard_path)
            shards.append(shard)
            shard_tensors[shard_name] = entries
            if shard.metadata:
                metadata = {**(metadata or {}), **shard.metadata}
        for name, shard_name in weight_map.items():
            if name not in shard_tensors.get(shard_name, {}):
                raise FormatError(
                    f"index maps {name!r} to {shard_name!r} but the shard lacks it"
                )
        for shard_name in shard_names:
            for name, info in shard_tensors[shard_name].items():
                if name in tensors:
                    raise FormatError(
                        f"tensor {name!r} appears in both {tensors[name].shard!r} "
                        f"and {shard_name!r}"
                    )
                if name not in weight_map:
                    raise FormatError(f"tensor {name!r} missing from the weight map")
                tensors[name] = info
        if not tensors:
            raise FormatError(f"{root}: empty checkpoint")
        return CheckpointIndex(
            root=root,
            shards=shards,
            tensors=tensors,
            metadata=metadata,
            index_name=index_path.name,
            index_metadata=index_obj.get("metadata"),
        )

    shard_paths = sorted(p for p in root.glob("*.safetensors") if p.is_file())
    if not shard_paths:
        raise FormatError(f"{root}: no .safetensors files found")
    for shard_path in shard_paths:
        shard, entries = _open_shard(shard_path)
        shards.append(shard)
        for name, info in entries.items():
            if name in tensors:
                raise FormatError(
                    f"tensor {name!r} appears in both {tensors[name].shard!r} "
                    f"and {shard.name!r}"
                )
            tensors[name] = info
        if shard.metadata:
            metadata = {**(metadata or {}), **shard.metadata}
    if not tensors:
        raise FormatError(f"{root}: empty checkpoint")
    return CheckpointIndex(root=root, shards=shards, tensors=tensors, metadata=metadata)


def read_tensor_raw(index: CheckpointIndex, name: str) -> bytes:
    """Read exactly one tensor's bytes (seek + bounded read, never the shard)."""
    try:
        info = index.tensors[name]
    except KeyError:
        raise KeyError(f"no tensor named {name!r} in checkpoint {index.root}") from None
    shard = index.shard(info.shard)
    begin, end = info.data_offsets
    with open(shard.path, "rb") as f:
        f.seek(shard.data_start + begin)
        raw = f.read(end - begin)
    if len(raw) != end - begin:
        raise FormatError(
            f"{shard.name}: tensor {name!r} byte range ends past end of shard"
        )
    return raw


def read_tensor(index: CheckpointIndex, name: str) -> TensorData:
    """Read and decode one tensor into a float64 working buffer."""
    raw = read_tensor_raw(index, name)
    info = index.tensors[name]
    return TensorData(info=info, values=tensor_math.decode(raw, info.dtype), raw=raw)


# ---------------------------------------------------------------------------
# Writing


@dataclass(frozen=True)
class OutputPolicy:
    """How merged/written checkpoints are laid out on disk.

    ``mirror`` reproduces the base checkpoint's shard assignment and tensor
    order exactly; ``pack`` fills shards sequentially up to
    ``max_shard_bytes``. Both are deterministic.
    """

    mode: str = "mirror"  # "mirror" | "pack"
    max_shard_bytes: int = 2 * 1024 * 1024 * 1024
    shard_template: str = "model-{index:05d}-of-{count:05d}.safetensors"
    index_name: str = "model.safetensors.index.json"

    def validated(self) -> "OutputPolicy":
        if self.mode not in ("mirror", "pack"):
            raise ValueError(f"unknown output mode {self.mode!r}")
        if self.max_shard_bytes < 1:
            raise ValueError("max_shard_bytes must be positive")
        return self


def _serialize_header(
    entries: list[TensorInfo], metadata: dict[str, str] | None
) -> bytes:
    obj: dict[str, object] = {}
    if metadata:
        obj["__metadata__"] = dict(metadata)
    offset = 0
    for info in entries:
        expected = info.dtype.byte_width * info.numel
        obj[info.name] = {
            "dtype": info.dtype.code,
            "shape": list(info.shape),
            "data_offsets": [offset, offset + expected],
        }
        offset += expected
    text = json.dumps(obj, separators=(",", ":"), ensure_ascii=True)
    payload = text.encode("utf-8")
    pad = (8 - (8 + len(payload)) % 8) % 8
    return payload + b" " * pad


class _ShardWriter:
    """Accumulates one shard: data bytes to a temp file, header at the end."""

    def __init__(self, directory: Path, tag: str):
        self.directory = directory
        self.tmp_path = directory / f".{tag}.data.tmp"
        self.entries: list[TensorInfo] = []
        self.data_bytes = 0
        self._f = open(self.tmp_path, "wb")

    def add(self, info: TensorInfo, data: bytes) -> None:
        self.entries.append(info)
        self._f.write(data)
        self.data_bytes += len(data)

    def finalize(self, final_path: Path, metadata: dict[str, str] | None) -> None:
        self._f.close()
        header = _serialize_header(self.entries, metadata)
        with open(final_path, "wb") as out:
            out.write(_HEADER_PREFIX.pack(len(header)))
            out.write(header)
            with open(self.tmp_path, "rb") as data:
                while chunk := data.read(_COPY_CHUNK):
                    out.write(chunk)
        os.unlink(self.tmp_path)

    def abort(self) -> None:
        self._f.close()
        if self.tmp_path.exists():
            os.unlink(self.tmp_path)


def _write_index_json(
    path: Path, weight_map: dict[str, str], index_metadata: dict | None
) -> None:
    obj = {"metadata": index_metadata or {}, "weight_map": weight_map}
    path.write_text(json.dumps(obj, indent=2) + "\n", "utf-8")


def _merged_metadata(
    base: dict[str, str] | None, extra: dict[str, str] | None
) -> dict[str, str] | None:
    if not base and not extra:
        return None
    return {**(base or {}), **(extra or {})}


def write_checkpoint(
    stream: Iterable[tuple[TensorInfo, bytes]],
    out: str | Path,
    policy: OutputPolicy | None = None,
    *,
    base: CheckpointIndex | None = None,
    metadata: dict[str, str] | None = None,
) -> CheckpointIndex:
    """Write a checkpoint from an ordered stream of (info, bytes) pairs.

    ``out`` may be a ``.safetensors`` file path (single-file write) or a
    directory. In mirror mode the stream must arrive in the base
    checkpoint's physical order and cover exactly its tensor set; shard
    names, assignment, metadata blocks, and the presence of an index file
    all mirror the base, with ``metadata`` keys layered on top. In pack
    mode shards fill sequentially and an index file is always written.

    Each tensor must appear exactly once; the byte length must match its
    info. Returns the reopened index of what was written.
    """
    out = Path(out)
    policy = (policy or OutputPolicy()).validated()

    if out.suffix == ".safetensors":
        return _write_single_file(stream, out, metadata)
    out.mkdir(parents=True, exist_ok=True)
    if policy.mode == "mirror":
        if base is None:
            raise ValueError("mirror mode requires a base checkpoint index")
        return _write_mirror(stream, out, base, metadata)
    return _write_packed(stream, out, policy, metadata)


def _checked(info: TensorInfo, data: bytes, seen: set[str]) -> TensorInfo:
    if info.name in seen:
        raise FormatError(f"duplicate tensor {info.name!r} in write stream")
    seen.add(info.name)
    expected = info.dtype.byte_width * info.numel
    if len(data) != expected:
        raise FormatError(
            f"tensor {info.name!r}: got {len(data)} bytes, expected {expected}"
        )
    return info


def _write_single_file(
    stream: Iterable[tuple[TensorInfo, bytes]],
    out: Path,
    metadata: dict[str, str] | None,
) -> CheckpointIndex:
    writer = _ShardWriter(out.parent, out.name)
    seen: set[str] = set()
    try:
        for info, data in stream:
            writer.add(_checked(info, data, seen), data)
        if not writer.entries:
            raise FormatError("refusing to write an empty checkpoint")
        writer.finalize(out, metadata)
    except BaseException:
        writer.abort()
        raise
    return open_checkpoint(out)


def _write_mirror(
    stream: Iterable[tuple[TensorInfo, bytes]],
    out: Path,
    base: CheckpointIndex,
    metadata: dict[str, str] | None,
) -> CheckpointIndex:
    expected_names = base.layout_names()
    weight_map: dict[str, str] = {}
    writer: _ShardWriter | None = None
    current_shard: str | None = None
    seen: set[str] = set()
    pos = 0
    try:
        for info, data in stream:
            if pos >= len(expected_names):
                raise FormatError(
                    f"stream yields {info.name!r} beyond the base tensor set"
                )
            expected = expected_names[pos]
            if info.name != expected:
                raise FormatError(
                    "mirror mode requires base order: "
                    f"got {info.name!r}, expected {expected!r}"
                )
            pos += 1
            _checked(info, data, seen)
            shard_name = base.tensors[info.name].shard
            if shard_name != current_shard:
                if writer is not None:
                    assert current_shard is not None
                    writer.finalize(
                        out / current_shard,
                        _merged_metadata(base.shard(current_shard).metadata, metadata),
                    )
                writer = _ShardWriter(out, shard_name)
                current_shard = shard_name
            assert writer is not None
            writer.add(info, data)
            weight_map[info.name] = shard_name
        if pos < len(expected_names):
            raise FormatError(
                f"stream ended early: missing {expected_names[pos]!r} and "
                f"{len(expected_names) - pos - 1} more"
            )
        if writer is not None:
            assert current_shard is not None
            writer.finalize(
                out / current_shard,
                _merged_metadata(base.shard(current_shard).metadata, metadata),
            )
    except BaseException:
        if writer is not None:
            writer.abort()
        raise
    if base.index_name is not None:
        _write_index_json(out / base.index_name, weight_map, base.index_metadata)
    return open_checkpoint(out)


def _write_packed(
    stream: Iterable[tuple[TensorInfo, bytes]],
    out: Path,
    policy: OutputPolicy,
    metadata: dict[str, str] | None,
) -> CheckpointIndex:
    writers: list[_ShardWriter] = []
    seen: set[str] = set()
    assignment: list[list[str]] = []

    def new_writer() -> _ShardWriter:
        w = _ShardWriter(out, f"shard-{len(writers):05d}")
        writers.append(w)
        assignment.append([])
        return w

    writer: _ShardWriter | None = None
    try:
        for info, data in stream:
            _checked(info, data, seen)
            if len(data) > policy.max_shard_bytes:
                raise FormatError(
                    f"tensor {info.name!r} ({len(data)} bytes) exceeds "
                    f"max shard size {policy.max_shard_bytes}"
                )
            if writer is None or writer.data_bytes + len(data) > policy.max_shard_bytes:
                if writer is not None:
                    writer._f.close()  # complete; reopened by finalize's copy
                writer = new_writer()
            writer.add(info, data)
            assignment[-1].append(info.name)
        if not writers or not seen:
            raise FormatError("refusing to write an empty checkpoint")
        count = len(writers)
        weight_map: dict[str, str] = {}
        for i, w in enumerate(writers):
            shard_name = policy.shard_template.format(index=i + 1, count=count)
            w.finalize(out / shard_name, metadata)
            for name in assignment[i]:
                weight_map[name] = shard_name
        total = sum(w.data_bytes for w in writers)
        _write_index_json(out / policy.index_name, weight_map, {"total_size": total})
    except BaseException:
        for w in writers:
            if w.tmp_path.exists():
                w.abort()
        raise
    return open_checkpoint(out)


# ---------------------------------------------------------------------------
# Validation


def validate_checkpoint(target: CheckpointIndex | str | Path) -> list[ValidationIssue]:
    """Collect every format violation instead of raising on the first.

    Accepts an already-open index or a path (file or directory). The report
    is empty iff the checkpoint is well-formed: parse errors, size
    mismatches, overlapping ranges, gaps in the data region, and dangling
    shard references all become entries.
    """
    if isinstance(target, CheckpointIndex):
        issues: list[ValidationIssue] = []
        for shard in target.shards:
            infos = [t for t in target.tensors.values() if t.shard == shard.name]
            issues.extend(_range_issues(shard.name, infos, shard.data_size))
        return issues

    root = Path(target)
    if not root.exists():
        return [ValidationIssue("missing_file", f"no such path: {root}")]
    if root.is_file():
        return _scan_shard(root)

    issues = []
    shard_paths = sorted(p for p in root.glob("*.safetensors") if p.is_file())
    names_seen: dict[str, str] = {}
    per_shard: dict[str, set[str]] = {}
    for path in shard_paths:
        shard_issues, names = _scan_shard(path, collect_names=True)
        issues.extend(shard_issues)
        per_shard[path.name] = names
        for n in names:
            if n in names_seen:
                issues.append(
                    ValidationIssue(
                        "duplicate_name",
                        f"also present in {names_seen[n]!r}",
                        shard=path.name,
                        name=n,
                    )
                )
            else:
                names_seen[n] = path.name
    try:
        index_path = _find_index_file(root)
    except FormatError as exc:
        issues.append(ValidationIssue("index_error", str(exc)))
        index_path = None
    if index_path is not None:
        try:
            index_obj = json.loads(index_path.read_text("utf-8"))
            weight_map = index_obj["weight_map"]
            if not isinstance(weight_map, dict):
                raise TypeError("weight_map is not an object")
        except Exception as exc:  # noqa: BLE001 - lenient scan reports, never raises
            issues.append(
                ValidationIssue("index_error", f"{index_path.name}: {exc}")
            )
        else:
            for name, shard_name in weight_map.items():
                if not (root / shard_name).is_file():
                    issues.append(
                        ValidationIssue(
                            "missing_shard",
                            f"index references missing shard {shard_name!r}",
                            name=name,
                        )
                    )
                elif name not in per_shard.get(shard_name, set()):
                    issues.append(
                        ValidationIssue(
                            "dangling_reference",
                            f"index maps to {shard_name!r} which lacks the tensor",
                            name=name,
                        )
                    )
    if not shard_paths:
        issues.append(ValidationIssue("empty", f"{root}: no .safetensors files"))
    elif not names_seen:
        issues.append(ValidationIssue("empty", f"{root}: no tensors"))
    return issues


def _scan_shard(path: Path, collect_names: bool = False):
    """Lenient single-shard scan used by validate_checkpoint."""
    issues: list[ValidationIssue] = []
    names: set[str] = set()
    shard = path.name
    size = path.stat().st_size
    infos: list[TensorInfo] = []
    with open(path, "rb") as f:
        prefix = f.read(8)
        if len(prefix) < 8:
            issues.append(ValidationIssue("parse_error", "missing header length", shard=shard))
            return (issues, names) if collect_names else issues
        (header_size,) = _HEADER_PREFIX.unpack(prefix)
        if header_size > _MAX_HEADER_BYTES or 8 + header_size > size:
            issues.append(
                ValidationIssue(
                    "parse_error",
                    f"header length {header_size} exceeds file size {size}",
                    shard=shard,
                )
            )
            return (issues, names) if collect_names else issues
        header_bytes = f.read(header_size)
    try:
        obj = json.loads(
            header_bytes.decode("utf-8"), object_pairs_hook=_reject_duplicate_keys
        )
        if not isinstance(obj, dict):
            raise FormatError("header JSON is not an object")
    except (FormatError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        issues.append(ValidationIssue("parse_error", str(exc), shard=shard))
        return (issues, names) if collect_names else issues

    for name, entry in obj.items():
        if name == "__metadata__":
            try:
                _check_metadata(entry)
            except FormatError as exc:
                issues.append(ValidationIssue("parse_error", str(exc), shard=shard))
            continue
        info, problem = _check_entry(name, entry)
        if problem is not None:
            kind = "size_mismatch" if "size mismatch" in problem else "bad_entry"
            issues.append(ValidationIssue(kind, problem, shard=shard, name=name))
            continue
        assert info is not None
        infos.append(info)
        names.add(name)
    issues.extend(_range_issues(shard, infos, size - 8 - header_size))
    return (issues, names) if collect_names else issues


def _range_issues(
    shard: str, infos: list[TensorInfo], data_size: int
) -> list[ValidationIssue]:
    issues: list[ValidationIssue] = []
    spans = sorted((t.data_offsets[0], t.data_offsets[1], t.name) for t in infos)
    prev_end = 0
    prev_name: str | None = None
    for begin, end, name in spans:
        if end > data_size:
            issues.append(
                ValidationIssue(
                    "out_of_bounds",
                    f"range [{begin}, {end}) exceeds data region of {data_size} bytes",
                    shard=shard,
                    name=name,
                )
            )
        if begin < prev_end:
            issues.append(
                ValidationIssue(
                    "overlap", f"overlaps {prev_name!r}", shard=shard, name=name
                )
            )
        elif begin > prev_end:
            issues.append(
                ValidationIssue(
                    "gap",
                    f"{begin - prev_end} unused bytes before [{begin}, {end})",
                    shard=shard,
                    name=name,
                )
            )
        prev_end = max(prev_end, end)
        prev_name = name
    if spans and prev_end < data_size:
        issues.append(
            ValidationIssue(
                "gap", f"{data_size - prev_end} trailing unused bytes", shard=shard
            )
        )
    return issues
