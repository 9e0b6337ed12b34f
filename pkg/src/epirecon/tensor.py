"""Dense float64 tensors and the lossless binary blob format.

All signal, weight and dual data in this package is carried by C-contiguous
float64 numpy arrays. Blob files are bit-exact round trips: magic "TNSB",
u16 version, u16 rank, rank x u64 dims, then row-major f64 payload, all
little-endian.
"""

import struct

import numpy as np

BLOB_MAGIC = b"TNSB"
BLOB_VERSION = 1


class ShapeMismatchError(ValueError):
    """Raised when an array does not have the shape an operation requires."""

    def __init__(self, expected, actual, context=""):
        self.expected = tuple(int(s) for s in expected)
        self.actual = tuple(int(s) for s in actual)
        self.context = context
        msg = f"shape mismatch: expected {self.expected}, got {self.actual}"
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where finite data is guaranteed."""


class BlobFormatError(ValueError):
    """Raised for malformed tensor blob files."""


def as_tensor(values) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (rank 0 stays rank 0)."""
    arr = np.asarray(values, dtype=np.float64)
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def check_shape(arr: np.ndarray, expected, context: str = "") -> None:
    if tuple(arr.shape) != tuple(expected):
        raise ShapeMismatchError(expected, arr.shape, context)


def ensure_finite(arr: np.ndarray, context: str = "") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr).ravel())[0])
        what = context or "array"
        raise NonFiniteError(f"{what}: non-finite entry at flat index {bad}")
    return arr


def write_tensor(path, arr) -> None:
    """Write a tensor blob (bit-exact, little-endian, row-major)."""
    arr = as_tensor(arr)
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC)
        fh.write(struct.pack("<HH", BLOB_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read a tensor blob written by write_tensor."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != BLOB_MAGIC:
        raise BlobFormatError(f"{path}: bad magic {raw[:4]!r}, expected {BLOB_MAGIC!r}")
    if len(raw) < 8:
        raise BlobFormatError(f"{path}: truncated header")
    version, rank = struct.unpack_from("<HH", raw, 4)
    if version != BLOB_VERSION:
        raise BlobFormatError(f"{path}: unsupported version {version}")
    dims_end = 8 + 8 * rank
    if len(raw) < dims_end:
        raise BlobFormatError(f"{path}: truncated dims")
    shape = struct.unpack_from(f"<{rank}Q", raw, 8) if rank else ()
    count = 1
    for s in shape:
        count *= s
    if len(raw) != dims_end + 8 * count:
        raise BlobFormatError(
            f"{path}: payload holds {(len(raw) - dims_end) // 8} scalars, "
            f"shape {shape} needs {count}"
        )
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=dims_end)
    return as_tensor(data.reshape(shape).copy())  # writable, detached from the buffer
