"""Binary tensor container, byte-compatible with the safetensors layout.

    [u64 little-endian header length][JSON header, space padded][payload]

The header maps tensor name -> {"dtype", "shape", "data_offsets"}. Keys are
written in lexicographic order and the payload follows the same order, so
equal inputs always produce equal bytes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptContainer, MissingArtifact, StorageError

DTYPE_SIZES = {"BF16": 2, "F32": 4}
_NP_DTYPES = {"BF16": np.dtype("<u2"), "F32": np.dtype("<f4")}
_ALIGN = 8


def bf16_round(x: np.ndarray) -> np.ndarray:
    """Round float32 values to bfloat16 (nearest, ties to even).

    Returns the raw 16-bit patterns as ``uint16``. NaN stays NaN (quieted),
    infinities and signed zeros are preserved.
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    bits = x.view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) >> 16).astype(np.uint16)
    nan = np.isnan(x)
    if nan.any():
        rounded[nan] = ((bits[nan] >> 16) | 0x40).astype(np.uint16)
    return rounded


def bf16_to_f32(bits: np.ndarray) -> np.ndarray:
    return (np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


@dataclass(frozen=True)
class TensorEntry:
    dtype: str
    shape: tuple[int, ...]
    data: bytes

    @classmethod
    def f32(cls, arr: np.ndarray, shape=None) -> TensorEntry:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        return cls("F32", tuple(shape if shape is not None else arr.shape), arr.tobytes())

    @classmethod
    def bf16(cls, bits: np.ndarray, shape=None) -> TensorEntry:
        bits = np.ascontiguousarray(bits, dtype="<u2")
        return cls("BF16", tuple(shape if shape is not None else bits.shape), bits.tobytes())

    def array(self) -> np.ndarray:
        """Flat view: float32 for F32, raw uint16 patterns for BF16."""
        return np.frombuffer(self.data, dtype=_NP_DTYPES[self.dtype]).copy()

    @property
    def nbytes(self) -> int:
        return len(self.data)


def encode_header(meta: dict[str, tuple[str, tuple[int, ...]]]) -> bytes:
    """Length prefix plus padded JSON header for the given (dtype, shape) layout."""
    header = {}
    offset = 0
    for name in sorted(meta):
        dtype, shape = meta[name]
        n = DTYPE_SIZES[dtype] * math.prod(shape)
        header[name] = {"data_offsets": [offset, offset + n], "dtype": dtype, "shape": list(shape)}
        offset += n
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    raw += b" " * (-(8 + len(raw)) % _ALIGN)
    return struct.pack("<Q", len(raw)) + raw


def container_size(meta: dict[str, tuple[str, tuple[int, ...]]]) -> int:
    payload = sum(DTYPE_SIZES[d] * math.prod(s) for d, s in meta.values())
    return len(encode_header(meta)) + payload


def encode_container(entries: dict[str, TensorEntry]) -> bytes:
    meta = {}
    for name, e in entries.items():
        if e.dtype not in DTYPE_SIZES:
            raise ValueError(f"unsupported dtype {e.dtype}")
        if len(e.data) != DTYPE_SIZES[e.dtype] * math.prod(e.shape):
            raise ValueError(f"{name}: {len(e.data)} bytes does not match shape {e.shape}")
        meta[name] = (e.dtype, e.shape)
    parts = [encode_header(meta)]
    parts.extend(entries[name].data for name in sorted(entries))
    return b"".join(parts)


def write_container(path, entries: dict[str, TensorEntry]) -> int:
    blob = encode_container(entries)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return len(blob)


def decode_container(blob: bytes, source="<bytes>") -> dict[str, TensorEntry]:
    if len(blob) < 8:
        raise CorruptContainer(f"{source}: truncated length prefix")
    (hlen,) = struct.unpack_from("<Q", blob, 0)
    if 8 + hlen > len(blob):
        raise CorruptContainer(f"{source}: header length {hlen} exceeds file size")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptContainer(f"{source}: unreadable header ({exc})") from None
    if not isinstance(header, dict):
        raise CorruptContainer(f"{source}: header is not an object")
    header.pop("__metadata__", None)
    payload = memoryview(blob)[8 + hlen:]

    spans = []
    for name, info in header.items():
        try:
            dtype = info["dtype"]
            shape = tuple(int(d) for d in info["shape"])
            begin, end = (int(v) for v in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise CorruptContainer(f"{source}: malformed entry {name!r}") from None
        if dtype not in DTYPE_SIZES:
            raise CorruptContainer(f"{source}: unsupported dtype {dtype!r} for {name!r}")
        if end - begin != DTYPE_SIZES[dtype] * math.prod(shape):
            raise CorruptContainer(f"{source}: byte range of {name!r} disagrees with its shape")
        spans.append((begin, end, name, dtype, shape))
    spans.sort()
    cursor = 0
    for begin, end, name, _, _ in spans:
        if begin != cursor:
            raise CorruptContainer(f"{source}: byte ranges do not tile the payload at {name!r}")
        cursor = end
    if cursor != len(payload):
        raise CorruptContainer(f"{source}: payload is {len(payload)} bytes, header covers {cursor}")
    return {name: TensorEntry(dtype, shape, bytes(payload[b:e])) for b, e, name, dtype, shape in spans}


def read_container(path) -> dict[str, TensorEntry]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise MissingArtifact(path) from None
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    return decode_container(blob, source=str(path))
