"""Little-endian binary tensor blocks.

Block layout::

    magic    4 bytes  b"VTEN"
    version  uint16
    dtype    uint8    (see DTYPE_CODES)
    rank     uint8
    dims     rank x uint64
    payload  prod(dims) elements, little-endian, row-major
"""
from __future__ import annotations

import io
import struct

import numpy as np

from ..errors import CheckpointVersionError, ParseError

MAGIC = b"VTEN"
VERSION = 1
DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
    np.dtype("bool"): 5,
    np.dtype("<i4"): 6,
    np.dtype("<u4"): 7,
    np.dtype("<u8"): 8,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def write_tensor(stream, array) -> int:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    key = np.dtype(dt.str.replace("=", "<")) if dt.kind not in "bu" or dt.itemsize > 1 else dt
    if key not in DTYPE_CODES:
        raise ValueError(f"cannot serialize dtype {arr.dtype}")
    arr = np.asarray(arr, dtype=key, order="C")  # keeps 0-d arrays 0-d
    header = MAGIC + struct.pack("<HBB", VERSION, DTYPE_CODES[key], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.tobytes(order="C")
    stream.write(header)
    stream.write(payload)
    return len(header) + len(payload)


def read_tensor(stream) -> np.ndarray:
    head = stream.read(8)
    if len(head) < 8 or head[:4] != MAGIC:
        raise ParseError("not a tensor block", offset=_tell(stream))
    version, code, rank = struct.unpack("<HBB", head[4:])
    if version != VERSION:
        raise CheckpointVersionError(f"tensor block version {version}, expected {VERSION}")
    if code not in CODE_DTYPES:
        raise ParseError(f"unknown dtype code {code}", offset=_tell(stream))
    dims = struct.unpack(f"<{rank}Q", stream.read(8 * rank))
    dtype = CODE_DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    raw = stream.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ParseError("truncated tensor payload", offset=_tell(stream))
    return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def tensor_to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def _tell(stream):
    try:
        return stream.tell()
    except (AttributeError, OSError):
        return None
