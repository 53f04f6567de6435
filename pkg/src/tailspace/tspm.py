"""Binary dense-matrix format ("TSPM").

Layout: ``b"TSPM"``, u32 version (=1), u64 rows, u64 cols, followed by
``rows * cols`` little-endian float64 values in row-major order.  Vectors are
stored as single-column matrices.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"TSPM"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class FormatError(ValueError):
    pass


def write_matrix(stream: BinaryIO, m: np.ndarray) -> None:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise FormatError(f"can only store 1-D or 2-D arrays, got ndim={m.ndim}")
    rows, cols = m.shape
    stream.write(_HEADER.pack(MAGIC, VERSION, rows, cols))
    stream.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def read_matrix(stream: BinaryIO) -> np.ndarray:
    head = stream.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise FormatError("truncated TSPM header")
    magic, version, rows, cols = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported TSPM version {version}")
    nbytes = rows * cols * 8
    body = stream.read(nbytes)
    if len(body) != nbytes:
        raise FormatError(f"truncated TSPM body: expected {nbytes} bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(rows, cols)


def to_bytes(m: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_matrix(buf, m)
    return buf.getvalue()


def from_bytes(data: bytes) -> np.ndarray:
    return read_matrix(io.BytesIO(data))


def save(path: str | os.PathLike, m: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_matrix(fh, m)


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_matrix(fh)
