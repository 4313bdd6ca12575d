"""Checkpoint container I/O and task-delta computation.

The container is the safetensors layout restricted to F32/F64 payloads:

    [u64 little-endian header length N][N bytes UTF-8 JSON header][payload]

Each header entry maps a tensor name to ``{"dtype", "shape", "data_offsets"}``
with offsets relative to the payload start. An optional ``__metadata__``
string-to-string object is carried through unchanged. Headers are written with
lexicographically sorted keys and right-padded with spaces to 8 bytes.
"""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Dict, Iterator, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    IoFailureError,
    MalformedHeaderError,
    NonFiniteInputError,
    ParameterSetMismatchError,
    ShapeDataMismatchError,
    ShapeMismatchError,
    UnsupportedDtypeError,
)

logger = logging.getLogger("svcmerge.checkpoint")

PathLike = Union[str, os.PathLike]

METADATA_KEY = "__metadata__"
HEADER_ALIGN = 8

DTYPES: Dict[str, np.dtype] = {
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
}
_DTYPE_TAGS = {v: k for k, v in DTYPES.items()}


def dtype_tag(arr: np.ndarray) -> str:
    tag = _DTYPE_TAGS.get(arr.dtype.newbyteorder("<"))
    if tag is None:
        raise UnsupportedDtypeError("Only F32 and F64 tensors are supported", detail={"dtype": str(arr.dtype)})
    return tag


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TensorStore:
    """Ordered name -> tensor map, i.e. a checkpoint held in memory."""

    entries: Mapping[str, np.ndarray]
    metadata: Optional[Mapping[str, str]] = None

    def __post_init__(self):
        frozen: Dict[str, np.ndarray] = {}
        for name, arr in self.entries.items():
            if not isinstance(name, str):
                raise MalformedHeaderError("Parameter names must be strings", detail={"name": repr(name)})
            arr = np.asarray(arr)
            dtype_tag(arr)
            frozen[name] = _freeze(np.array(arr, dtype=arr.dtype.newbyteorder("<"), order="C", copy=True))
        object.__setattr__(self, "entries", MappingProxyType(frozen))
        if self.metadata is not None:
            for k, v in self.metadata.items():
                if not isinstance(k, str) or not isinstance(v, str):
                    raise MalformedHeaderError("__metadata__ must map strings to strings")
            object.__setattr__(self, "metadata", MappingProxyType(dict(self.metadata)))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __contains__(self, name: object) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def names(self) -> Tuple[str, ...]:
        return tuple(self.entries)

    def items(self):
        return self.entries.items()

    def same_as(self, other: "TensorStore") -> bool:
        """Bitwise equality: names, order, dtypes, shapes, bytes and metadata."""
        if self.names() != other.names():
            return False
        if dict(self.metadata or {}) != dict(other.metadata or {}):
            return False
        for name, arr in self.items():
            b = other[name]
            if arr.dtype != b.dtype or arr.shape != b.shape or arr.tobytes() != b.tobytes():
                return False
        return True


@dataclass(frozen=True, eq=False)
class DeltaStore(TensorStore):
    """Per-parameter task matrices ΔW_i = W_i - W_pre, in F64."""

    def __post_init__(self):
        super().__post_init__()
        for name, arr in self.items():
            if arr.dtype != np.float64:
                raise UnsupportedDtypeError("Delta tensors must be F64", parameter=name, detail={"dtype": str(arr.dtype)})
            if not np.all(np.isfinite(arr)):
                raise NonFiniteInputError("Delta contains non-finite values", parameter=name)


# ---------- decoding ----------
def _parse_header(raw: bytes, path: str) -> Dict[str, object]:
    def _no_duplicates(pairs):
        out: Dict[str, object] = {}
        for k, v in pairs:
            if k in out:
                raise MalformedHeaderError("Duplicate key in header", path=path, detail={"key": k})
            out[k] = v
        return out

    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedHeaderError("Header is not valid UTF-8", path=path) from exc
    try:
        header = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError("Header is not valid JSON", path=path, detail={"error": exc.msg}) from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError("Header must be a JSON object", path=path)
    return header


def _is_uint(v: object) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def decode_checkpoint(buf: bytes, path: str = "<memory>") -> TensorStore:
    if len(buf) < 8:
        raise MalformedHeaderError("File shorter than the 8-byte length prefix", path=path)
    n = int.from_bytes(buf[:8], "little")
    if n > len(buf) - 8:
        raise MalformedHeaderError("Header length exceeds file size", path=path, detail={"header_len": n})
    header = _parse_header(buf[8:8 + n], path)
    payload = memoryview(buf)[8 + n:]

    metadata = header.pop(METADATA_KEY, None)
    if metadata is not None and not (
        isinstance(metadata, dict) and all(isinstance(v, str) for v in metadata.values())
    ):
        raise MalformedHeaderError("__metadata__ must map strings to strings", path=path)

    entries: Dict[str, np.ndarray] = {}
    spans = []
    for name, info in header.items():
        if not isinstance(info, dict) or not {"dtype", "shape", "data_offsets"} <= set(info):
            raise MalformedHeaderError("Tensor entry missing dtype/shape/data_offsets", parameter=name, path=path)
        tag = info["dtype"]
        if not isinstance(tag, str):
            raise MalformedHeaderError("dtype must be a string", parameter=name, path=path)
        if tag not in DTYPES:
            raise UnsupportedDtypeError("Unsupported dtype", parameter=name, path=path, detail={"dtype": tag})
        shape = info["shape"]
        offsets = info["data_offsets"]
        if not isinstance(shape, list) or not all(_is_uint(d) for d in shape):
            raise MalformedHeaderError("shape must be a list of non-negative integers", parameter=name, path=path)
        if not (isinstance(offsets, list) and len(offsets) == 2 and all(_is_uint(o) for o in offsets)):
            raise MalformedHeaderError("data_offsets must be [begin, end]", parameter=name, path=path)
        begin, end = offsets
        dt = DTYPES[tag]
        count = math.prod(shape)
        if end < begin or end - begin != count * dt.itemsize or end > len(payload):
            raise ShapeDataMismatchError(
                "data_offsets inconsistent with shape and dtype",
                parameter=name,
                path=path,
                detail={"shape": shape, "dtype": tag, "offsets": offsets, "payload": len(payload)},
            )
        if count:
            entries[name] = np.frombuffer(payload, dtype=dt, count=count, offset=begin).reshape(shape).copy()
        else:
            entries[name] = np.zeros(shape, dtype=dt)
        spans.append((begin, end, name))

    # Payload must be covered exactly, without gaps or overlaps.
    cursor = 0
    for begin, end, name in sorted(spans):
        if begin != cursor:
            raise ShapeDataMismatchError("Tensor payloads overlap or leave gaps", parameter=name, path=path)
        cursor = end
    if cursor != len(payload):
        raise ShapeDataMismatchError(
            "Trailing bytes after last tensor", path=path, detail={"covered": cursor, "payload": len(payload)}
        )
    return TensorStore(entries, metadata)


def load_checkpoint(path: PathLike) -> TensorStore:
    p = str(path)
    try:
        buf = Path(p).read_bytes()
    except OSError as exc:
        raise IoFailureError("Cannot read checkpoint", path=p, detail={"error": exc.strerror}) from exc
    store = decode_checkpoint(buf, p)
    logger.debug("Loaded %d tensor(s) from %s (%d bytes)", len(store), p, len(buf))
    return store


# ---------- encoding ----------
def encode_checkpoint(store: TensorStore) -> bytes:
    header: Dict[str, object] = {}
    chunks = []
    offset = 0
    for name in sorted(store.names()):
        arr = store[name]
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        header[name] = {
            "dtype": dtype_tag(arr),
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        chunks.append(data)
        offset += len(data)
    if store.metadata is not None:
        header[METADATA_KEY] = dict(store.metadata)

    raw = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    raw += b" " * (-len(raw) % HEADER_ALIGN)
    return len(raw).to_bytes(8, "little") + raw + b"".join(chunks)


def atomic_write_all(items: Sequence[Tuple[PathLike, bytes]]) -> None:
    """Stage every payload in a temp file next to its target, then rename them all into place.

    Nothing is replaced unless every payload was staged.
    """
    staged = []
    current = None
    try:
        for path, data in items:
            current = target = Path(path)
            fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent or Path("."))
            staged.append((tmp_name, target))
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
        for tmp_name, target in staged:
            current = target
            os.replace(tmp_name, target)
        staged = []
    except OSError as exc:
        raise IoFailureError("Cannot write file", path=str(current), detail={"error": exc.strerror}) from exc
    finally:
        for tmp_name, _ in staged:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename into place."""
    atomic_write_all([(path, data)])


def write_checkpoint(store: TensorStore, path: PathLike) -> None:
    data = encode_checkpoint(store)
    atomic_write_bytes(path, data)
    logger.debug("Wrote %d tensor(s) to %s (%d bytes)", len(store), path, len(data))


# ---------- deltas ----------
def compute_deltas(pretrained: TensorStore, finetuned: TensorStore) -> DeltaStore:
    missing = [n for n in pretrained.names() if n not in finetuned]
    extra = [n for n in finetuned.names() if n not in pretrained]
    if missing or extra:
        raise ParameterSetMismatchError(
            "Fine-tuned and pre-trained parameter sets differ",
            detail={"missing": missing[:5], "unexpected": extra[:5]},
        )
    deltas: Dict[str, np.ndarray] = {}
    for name, pre in pretrained.items():
        ft = finetuned[name]
        if ft.shape != pre.shape:
            raise ShapeMismatchError(
                "Shape differs from pre-trained", parameter=name, detail={"pretrained": pre.shape, "finetuned": ft.shape}
            )
        deltas[name] = ft.astype(np.float64) - pre.astype(np.float64)
    return DeltaStore(deltas)
