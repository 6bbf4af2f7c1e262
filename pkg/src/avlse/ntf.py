"""Named-tensor files.

Layout (little-endian)::

    b"NTF1" | u64 count | count x ( u32 name_len | utf-8 name | u32 rank | rank x u64 extent | f32 payload )

The checkpoint writer reuses the per-tensor records with an extra dtype byte
(see :func:`write_records` with ``tagged=True``) so float64 state survives a
round trip unchanged.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Mapping

import numpy as np

MAGIC = b"NTF1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("truncated file")
    return b


def write_records(f: BinaryIO, tensors: Mapping[str, np.ndarray], tagged: bool = False) -> None:
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        if tagged:
            dt = np.dtype(arr.dtype).newbyteorder("<") if arr.dtype.kind == "f" else np.dtype(arr.dtype)
            if dt not in _CODES:
                raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
            f.write(struct.pack("<B", _CODES[dt]))
        else:
            dt = _DTYPES[0]
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_records(f: BinaryIO, count: int, tagged: bool = False) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        name = _read_exact(f, n).decode("utf-8")
        if tagged:
            (code,) = struct.unpack("<B", _read_exact(f, 1))
            if code not in _DTYPES:
                raise FormatError(f"unknown dtype code {code} for {name}")
            dt = _DTYPES[code]
        else:
            dt = _DTYPES[0]
        (rank,) = struct.unpack("<I", _read_exact(f, 4))
        shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(_read_exact(f, size * dt.itemsize), dtype=dt).reshape(shape)
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        out[name] = data.copy()
    return out


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(tensors)))
    write_records(buf, tensors)
    return buf.getvalue()


def loads(data: bytes) -> Dict[str, np.ndarray]:
    f = io.BytesIO(data)
    if _read_exact(f, 4) != MAGIC:
        raise FormatError("not an NTF1 file")
    (count,) = struct.unpack("<Q", _read_exact(f, 8))
    out = read_records(f, count)
    if f.read(1):
        raise FormatError("trailing bytes after last tensor")
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> Dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
