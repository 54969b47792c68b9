"""Reader and writer for NPY files, version 1.0 only.

Supported payloads are little-endian float32/float64 in C order, with 1-D,
2-D, or 4-D shapes; 1-D data loads as a single-row matrix and everything is
widened to float64 in memory. Anything else is rejected loudly instead of
being coerced: wrong magic or a truncated file is a FormatError, a declared
feature outside this subset (version, dtype, Fortran order, rank) is an
UnsupportedError, and non-finite or empty payloads are a DataError.
"""

import ast
import struct

import numpy as np

from .errors import DataError, FormatError, UnsupportedError

_MAGIC = b"\x93NUMPY"
_HEADER_ALIGN = 64
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}
_RANKS = (1, 2, 4)


def load_npy(path):
    """Load an NPY v1.0 file as a float64 matrix or 4-D tensor."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 10 or buf[:6] != _MAGIC:
        raise FormatError(f"{path}: not an NPY file (bad magic)")
    major, minor = buf[6], buf[7]
    if (major, minor) != (1, 0):
        raise UnsupportedError(f"{path}: NPY version {major}.{minor}, only 1.0 supported")
    (header_len,) = struct.unpack_from("<H", buf, 8)
    data_start = 10 + header_len
    if len(buf) < data_start:
        raise FormatError(f"{path}: truncated header")
    try:
        header = ast.literal_eval(buf[10:data_start].decode("latin1"))
    except (ValueError, SyntaxError, MemoryError, RecursionError) as exc:
        raise FormatError(f"{path}: unparseable header") from exc
    if not isinstance(header, dict) or {"descr", "fortran_order", "shape"} - set(header):
        raise FormatError(f"{path}: header missing required keys")

    descr = header["descr"]
    if descr not in _DTYPES:
        raise UnsupportedError(f"{path}: dtype {descr!r}, only <f4/<f8 supported")
    if header["fortran_order"] is True:
        raise UnsupportedError(f"{path}: Fortran-order payloads are not supported")
    if header["fortran_order"] is not False:
        raise FormatError(f"{path}: malformed fortran_order flag")
    shape = header["shape"]
    if not (isinstance(shape, tuple) and all(isinstance(d, int) and d >= 0 for d in shape)):
        raise FormatError(f"{path}: malformed shape {shape!r}")
    if len(shape) not in _RANKS:
        raise UnsupportedError(f"{path}: rank-{len(shape)} array, only 1/2/4-D supported")

    dtype = _DTYPES[descr]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 0
    if count == 0:
        raise DataError(f"{path}: empty arrays are not supported")
    expected = count * dtype.itemsize
    payload = buf[data_start:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")

    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: payload contains NaN or Inf")
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return arr


def save_npy(arr, path):
    """Write a matrix or 4-D tensor as NPY v1.0, float64, C order.

    Round trip through load_npy reproduces the float64 data bit-exactly.
    """
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim not in (2, 4):
        raise ValueError(f"only 2-D or 4-D arrays can be saved, got shape {a.shape}")
    if a.size == 0:
        raise DataError("empty arrays are not supported")
    if not np.all(np.isfinite(a)):
        raise DataError("payload contains NaN or Inf")

    header = "{'descr': '<f8', 'fortran_order': False, 'shape': %s, }" % (
        str(tuple(int(d) for d in a.shape)),
    )
    unpadded = len(_MAGIC) + 2 + 2 + len(header) + 1
    pad = (-unpadded) % _HEADER_ALIGN
    header = header + " " * pad + "\n"

    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(b"\x01\x00")
        fh.write(struct.pack("<H", len(header)))
        fh.write(header.encode("latin1"))
        fh.write(np.ascontiguousarray(a).tobytes())
