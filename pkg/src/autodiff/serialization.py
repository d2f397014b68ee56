"""
SWT1 tensor files.

Layout: magic b"SWT1", u8 dtype code, u8 rank, rank × u32 LE dims, then the
row-major little-endian payload.
"""

from pathlib import Path
from typing import Union

import numpy as np

from src.core.errors import FormatError
from src.utils.helpers import atomic_write_bytes

MAGIC = b"SWT1"
DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i2"),
    3: np.dtype("u1"),
}
CODE_FOR_KIND = {(dtype.kind, dtype.itemsize): code for code, dtype in DTYPE_CODES.items()}
HEADER_FIXED = len(MAGIC) + 2


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = CODE_FOR_KIND.get((array.dtype.kind, array.dtype.itemsize))
    if code is None:
        raise FormatError(f"dtype {array.dtype} has no SWT1 code")
    if array.ndim > 255:
        raise FormatError(f"rank {array.ndim} exceeds the SWT1 limit")
    header = MAGIC + bytes([code, array.ndim]) + np.asarray(array.shape, dtype="<u4").tobytes()
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def decode_tensor(buffer: bytes, source: str = None) -> np.ndarray:
    if len(buffer) < HEADER_FIXED:
        raise FormatError("truncated SWT1 header", offset=len(buffer), path=source)
    if buffer[:4] != MAGIC:
        raise FormatError(f"bad magic {buffer[:4]!r}, expected {MAGIC!r}", offset=0, path=source)
    code, rank = buffer[4], buffer[5]
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", offset=4, path=source)
    dims_end = HEADER_FIXED + 4 * rank
    if len(buffer) < dims_end:
        raise FormatError("truncated SWT1 dimensions", offset=len(buffer), path=source)
    dims = np.frombuffer(buffer, dtype="<u4", count=rank, offset=HEADER_FIXED).astype(np.int64)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=object)) * dtype.itemsize
    available = len(buffer) - dims_end
    if expected > available:
        raise FormatError(
            f"payload needs {expected} bytes for shape {tuple(dims)}, {available} present",
            offset=len(buffer), path=source,
        )
    if expected < available:
        raise FormatError(f"{available - expected} trailing bytes after payload", offset=dims_end + expected, path=source)
    data = np.frombuffer(buffer, dtype=dtype, offset=dims_end, count=expected // dtype.itemsize)
    return data.reshape(tuple(int(d) for d in dims)).copy()


def write_tensor(path: Union[str, Path], array: np.ndarray) -> Path:
    return atomic_write_bytes(Path(path), encode_tensor(array))


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), source=str(path))
