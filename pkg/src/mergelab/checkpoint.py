"""Named-tensor checkpoints and the safetensors-layout container they live in.

On disk a container is::

    [u64 little-endian header length N][N bytes JSON header][data buffer]

The header maps tensor name -> {"dtype", "shape", "data_offsets": [begin, end)}
with offsets relative to the start of the data buffer, plus an optional
``"__metadata__"`` string map. Tensors are stored row-major and little-endian.

In memory every tensor is a read-only float32 array, whatever the on-disk dtype.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass
from os import PathLike
from pathlib import Path

import numpy as np

from .errors import DtypeError, FormatError, MismatchError, ValidationError

__all__ = [
    "Checkpoint",
    "ShapeSignature",
    "load_checkpoint",
    "save_checkpoint",
    "check_compatible",
    "compare_signatures",
    "encode_checkpoint",
    "decode_checkpoint",
    "file_digest",
]

# on-disk dtype tag -> bytes per element
_DTYPE_SIZES = {"F32": 4, "F16": 2, "BF16": 2}
_DTYPE_ALIASES = {
    "float32": "F32",
    "f32": "F32",
    "float16": "F16",
    "f16": "F16",
    "half": "F16",
    "bfloat16": "BF16",
    "bf16": "BF16",
}
_MAX_HEADER = 100 * 1024 * 1024
_MAX_MISMATCHES = 10


def _dtype_tag(dtype: str) -> str:
    tag = _DTYPE_ALIASES.get(dtype.lower(), dtype.upper())
    if tag not in _DTYPE_SIZES:
        raise DtypeError(f"unsupported dtype {dtype!r}; expected one of float32, float16, bfloat16")
    return tag


@dataclass(frozen=True)
class ShapeSignature:
    """(name, shape, dtype) for every tensor, in checkpoint order."""

    entries: tuple[tuple[str, tuple[int, ...], str], ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e[0] for e in self.entries)


class Checkpoint:
    """An immutable, lexicographically ordered map of name -> float32 tensor.

    Arrays handed in are copied (when needed) to float32 and frozen, so a
    Checkpoint can be shared between threads without defensive copies.
    """

    __slots__ = ("_tensors", "_metadata")

    def __init__(self, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None):
        frozen: dict[str, np.ndarray] = {}
        for name in sorted(tensors):
            if not isinstance(name, str) or not name:
                raise ValidationError(f"tensor names must be non-empty strings, got {name!r}")
            if name == "__metadata__":
                raise ValidationError("'__metadata__' is reserved and cannot name a tensor")
            arr = np.asarray(tensors[name])
            if arr.dtype != np.float32:
                if not np.issubdtype(arr.dtype, np.number):
                    raise ValidationError(f"tensor {name!r} is not numeric")
                arr = arr.astype(np.float32)
            if arr.dtype.byteorder == ">":
                arr = arr.astype("<f4")
            if any(d <= 0 for d in arr.shape):
                raise ValidationError(f"tensor {name!r} has a non-positive dimension: {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"tensor {name!r} contains non-finite values")
            if arr.flags.writeable:
                arr = np.array(arr, dtype=np.float32, order="C", copy=True)
                arr.flags.writeable = False
            elif not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)
                arr.flags.writeable = False
            frozen[name] = arr
        meta = dict(metadata or {})
        for k, v in meta.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValidationError("metadata must map strings to strings")
        self._tensors = frozen
        self._metadata = meta

    # -- mapping-ish interface -------------------------------------------------
    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    @property
    def metadata(self) -> dict[str, str]:
        return dict(self._metadata)

    @property
    def num_params(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def signature(self) -> ShapeSignature:
        return ShapeSignature(tuple((n, tuple(int(d) for d in t.shape), "F32") for n, t in self._tensors.items()))

    def with_metadata(self, **extra: str) -> "Checkpoint":
        meta = self.metadata
        meta.update(extra)
        return Checkpoint(self._tensors, meta)

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray], metadata: Mapping[str, str] | None = None) -> "Checkpoint":
        """Apply ``fn(name, tensor)`` to every tensor, keeping names and order."""
        return Checkpoint({n: fn(n, t) for n, t in self._tensors.items()}, metadata)

    def flat(self, dtype=np.float64) -> np.ndarray:
        """All parameters concatenated in name order."""
        if not self._tensors:
            return np.zeros(0, dtype=dtype)
        return np.concatenate([t.ravel().astype(dtype) for t in self._tensors.values()])

    def equals(self, other: "Checkpoint") -> bool:
        """Bit-exact equality of names, shapes, and values (metadata ignored)."""
        if self.names() != other.names():
            return False
        for name, t in self._tensors.items():
            o = other[name]
            if t.shape != o.shape or not np.array_equal(t.view(np.uint32), o.view(np.uint32)):
                return False
        return True

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.equals(other) and self._metadata == other._metadata

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Checkpoint({len(self)} tensors, {self.num_params} params)"


def zip_tensors(*ckpts: Checkpoint) -> Iterator[tuple[str, tuple[np.ndarray, ...]]]:
    """Yield ``(name, (t_0, ..., t_k))`` over compatible checkpoints."""
    for c in ckpts[1:]:
        check_compatible(ckpts[0], c)
    for name in ckpts[0]:
        yield name, tuple(c[name] for c in ckpts)


def check_compatible(a: Checkpoint, b: Checkpoint) -> ShapeSignature:
    """Return the shared signature of ``a`` and ``b`` or raise MismatchError."""
    return compare_signatures(a.signature(), b.signature())


def compare_signatures(sa: ShapeSignature, sb: ShapeSignature) -> ShapeSignature:
    if sa == sb:
        return sa
    ea = {n: (s, d) for n, s, d in sa.entries}
    eb = {n: (s, d) for n, s, d in sb.entries}
    problems: list[str] = []
    for name in sorted(set(ea) | set(eb)):
        if name not in eb:
            problems.append(f"{name}: only in first checkpoint")
        elif name not in ea:
            problems.append(f"{name}: only in second checkpoint")
        elif ea[name] != eb[name]:
            (s1, d1), (s2, d2) = ea[name], eb[name]
            problems.append(f"{name}: {list(s1)}/{d1} vs {list(s2)}/{d2}")
    shown = problems[:_MAX_MISMATCHES]
    more = f" (+{len(problems) - len(shown)} more)" if len(problems) > len(shown) else ""
    raise MismatchError("checkpoints are not compatible: " + "; ".join(shown) + more, shown)


# -- encoding -------------------------------------------------------------------

def _to_bf16_bits(x: np.ndarray) -> np.ndarray:
    # round-to-nearest-even on the upper 16 bits of the float32 pattern
    u = np.ascontiguousarray(x, dtype="<f4").view("<u4").astype(np.uint64)
    bias = ((u >> 16) & 1) + 0x7FFF
    return ((u + bias) >> 16).astype("<u2")


def _from_bf16_bits(raw: np.ndarray) -> np.ndarray:
    return (raw.astype("<u4") << 16).view("<f4")


def _encode_tensor(t: np.ndarray, tag: str) -> bytes:
    if tag == "F32":
        return np.ascontiguousarray(t, dtype="<f4").tobytes()
    if tag == "F16":
        with np.errstate(over="ignore"):
            h = t.astype("<f2")
        if not np.all(np.isfinite(h)):
            raise ValidationError("value out of float16 range")
        return h.tobytes()
    bits = _to_bf16_bits(t)
    if not np.all(np.isfinite(_from_bf16_bits(bits))):
        raise ValidationError("value out of bfloat16 range")
    return bits.tobytes()


def _decode_tensor(raw: bytes, tag: str, shape: tuple[int, ...]) -> np.ndarray:
    if tag == "F32":
        arr = np.frombuffer(raw, dtype="<f4")
    elif tag == "F16":
        arr = np.frombuffer(raw, dtype="<f2").astype(np.float32)
    else:
        arr = _from_bf16_bits(np.frombuffer(raw, dtype="<u2"))
    return arr.astype(np.float32, copy=False).reshape(shape)


def encode_checkpoint(ckpt: Checkpoint, dtype: str = "float32") -> bytes:
    """Serialize to container bytes. Tensors are laid out in name order."""
    tag = _dtype_tag(dtype)
    header: dict[str, object] = {}
    if ckpt.metadata:
        header["__metadata__"] = dict(sorted(ckpt.metadata.items()))
    chunks: list[bytes] = []
    offset = 0
    for name, t in ckpt.items():
        data = _encode_tensor(t, tag)
        header[name] = {"dtype": tag, "shape": list(t.shape), "data_offsets": [offset, offset + len(data)]}
        chunks.append(data)
        offset += len(data)
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    hbytes += b" " * (-len(hbytes) % 8)
    return struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 8:
        raise FormatError("file too short for a header length prefix")
    (n,) = struct.unpack("<Q", blob[:8])
    if n > _MAX_HEADER or 8 + n > len(blob):
        raise FormatError(f"header length {n} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object")

    meta = header.pop("__metadata__", None) or {}
    if not isinstance(meta, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in meta.items()):
        raise FormatError("__metadata__ must map strings to strings")

    buf = memoryview(blob)[8 + n :]
    spans: list[tuple[int, int, str]] = []
    tensors: dict[str, np.ndarray] = {}
    for name, info in header.items():
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise FormatError(f"bad header entry for {name!r}")
        dtype, shape, offsets = info["dtype"], info["shape"], info["data_offsets"]
        if not isinstance(dtype, str):
            raise FormatError(f"bad dtype for {name!r}")
        if dtype not in _DTYPE_SIZES:
            raise DtypeError(f"tensor {name!r} has unsupported dtype {dtype!r}")
        if not (isinstance(shape, list) and all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape)):
            raise FormatError(f"bad shape for {name!r}: {shape!r}")
        if not (isinstance(offsets, list) and len(offsets) == 2 and all(isinstance(o, int) for o in offsets)):
            raise FormatError(f"bad data_offsets for {name!r}")
        begin, end = offsets
        if not 0 <= begin <= end:
            raise FormatError(f"bad data_offsets for {name!r}: {offsets}")
        if end > len(buf):
            raise FormatError(f"data section truncated: {name!r} ends at {end}, buffer has {len(buf)} bytes")
        if end - begin != math.prod(shape) * _DTYPE_SIZES[dtype]:
            raise FormatError(f"{name!r}: byte span {end - begin} does not match shape {shape} of {dtype}")
        spans.append((begin, end, name))
        tensors[name] = _decode_tensor(bytes(buf[begin:end]), dtype, tuple(shape))

    cursor = 0
    for begin, end, name in sorted(spans):
        if begin != cursor:
            raise FormatError(f"data section has a gap or overlap at {name!r}")
        cursor = end
    if cursor != len(buf):
        raise FormatError(f"data section has {len(buf) - cursor} trailing bytes")

    for name, t in tensors.items():
        if not np.all(np.isfinite(t)):
            raise ValidationError(f"tensor {name!r} contains non-finite values")
    return Checkpoint(tensors, meta)


def load_checkpoint(path: str | PathLike) -> Checkpoint:
    """Read a container file; tensors come back as float32."""
    return decode_checkpoint(Path(path).read_bytes())


def save_checkpoint(ckpt: Checkpoint, path: str | PathLike, dtype: str = "float32") -> None:
    """Write ``ckpt`` to ``path``; float32 output round-trips bit-exactly."""
    Path(path).write_bytes(encode_checkpoint(ckpt, dtype))


def file_digest(path: str | PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
