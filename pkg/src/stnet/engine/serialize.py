"""Binary tensor records.

Record layout (all integers u32 little-endian): name length, UTF-8 name,
rank, extents, then the float32 little-endian payload.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable, Tuple

import numpy as np

_U32 = struct.Struct("<I")


class FormatError(ValueError):
    pass


def write_record(fh: BinaryIO, name: str, array: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(array, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
    fh.write(_U32.pack(len(raw)))
    fh.write(raw)
    fh.write(_U32.pack(arr.ndim))
    for n in arr.shape:
        fh.write(_U32.pack(n))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_u32(fh: BinaryIO) -> int:
    return _U32.unpack(_read_exact(fh, 4))[0]


def read_record(fh: BinaryIO) -> Tuple[str, np.ndarray]:
    name = _read_exact(fh, read_u32(fh)).decode("utf-8")
    rank = read_u32(fh)
    shape = tuple(read_u32(fh) for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(fh, 4 * count)
    return name, np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write_records(fh: BinaryIO, items: Iterable[Tuple[str, np.ndarray]]) -> None:
    for name, arr in items:
        write_record(fh, name, arr)
