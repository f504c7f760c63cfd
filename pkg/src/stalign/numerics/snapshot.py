"""Binary named-tensor records used inside checkpoints.

One record is::

    u32 name length | UTF-8 name | u8 dtype tag | u8 rank | u32 extents... | payload

Payload is little-endian float32 (tag 1) or float64 (tag 2).
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from ..errors import FormatError

DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated tensor record: wanted {n} bytes, got {len(raw)}")
    return raw


def write_tensor(fh: BinaryIO, name: str, array: np.ndarray) -> None:
    arr = np.asarray(array)
    dtype = np.dtype("<f8") if arr.dtype == np.float64 else np.dtype("<f4")
    arr = np.ascontiguousarray(arr, dtype=dtype)
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", DTYPE_TAGS[dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, name_len).decode("utf-8")
    tag, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if tag not in TAG_DTYPES:
        raise FormatError(f"tensor {name!r}: unknown dtype tag {tag}")
    dtype = TAG_DTYPES[tag]
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(fh, count * dtype.itemsize)
    return name, np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_table(fh: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        write_tensor(fh, name, arr)


def read_table(fh: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    table = {}
    for _ in range(count):
        name, arr = read_tensor(fh)
        table[name] = arr
    return table


def table_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_table(buf, tensors)
    return buf.getvalue()
