"""Dense tensor container and the FCT1 binary file format.

Tensors are plain numpy arrays restricted to two roles: ``float32`` for
continuous data (logits, probabilities) and ``int64`` for labels and
indices, with 1 to 4 dimensions and no zero-length axes.

FCT1 layout (all integers little-endian, payload row-major little-endian):

    offset  size        content
    0       4           magic b"FCT1"
    4       1           dtype code: 0 = float32, 1 = int64
    5       1           ndim (1..4)
    6       2           reserved, zero
    8       8 * ndim    dimension sizes as uint64
    ...     prod(shape) * itemsize   payload

The encoding is byte-exact and host-independent: writing the same array
always produces the same bytes, on any machine.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np

MAGIC = b"FCT1"
MAX_NDIM = 4

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.int64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}


class TensorIOError(Exception):
    """Base class for FCT1 read/write failures."""


class BadMagicError(TensorIOError):
    pass


class BadDTypeError(TensorIOError):
    pass


class BadShapeError(TensorIOError):
    pass


class TruncatedFileError(TensorIOError):
    pass


class DatasetValidationError(Exception):
    """A dataset tensor violates the (logits, labels, lead_times) contract."""


class DatasetDims(NamedTuple):
    n_samples: int
    n_classes: int
    height: int
    width: int
    n_lead_times: int


def _check_tensor(t: np.ndarray) -> np.dtype:
    if t.dtype not in _DTYPE_CODES:
        raise BadDTypeError(f"unsupported dtype {t.dtype}; only float32 and int64 are storable")
    if not 1 <= t.ndim <= MAX_NDIM:
        raise BadShapeError(f"ndim must be 1..{MAX_NDIM}, got {t.ndim}")
    if any(d < 1 for d in t.shape):
        raise BadShapeError(f"all dimensions must be >= 1, got shape {t.shape}")
    return t.dtype


def write_tensor(t: np.ndarray, path: str | Path) -> None:
    """Write an array to ``path`` in FCT1 format (deterministic, byte-exact)."""
    dtype = _check_tensor(t)
    header = MAGIC + struct.pack("<BBH", _DTYPE_CODES[dtype], t.ndim, 0)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t).astype(dtype.newbyteorder("<"), copy=False).tobytes()
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload)
    except OSError as exc:
        raise TensorIOError(f"cannot write tensor to {path}: {exc}") from exc


def read_tensor(path: str | Path) -> np.ndarray:
    """Read an FCT1 file back into a numpy array (inverse of write_tensor)."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise TensorIOError(f"cannot read tensor from {path}: {exc}") from exc

    if len(data) < 8:
        raise TruncatedFileError(f"{path}: file shorter than the 8-byte fixed header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    code, ndim, _reserved = struct.unpack_from("<BBH", data, 4)
    if code not in _CODE_DTYPES:
        raise BadDTypeError(f"{path}: unknown dtype code {code}")
    if not 1 <= ndim <= MAX_NDIM:
        raise BadShapeError(f"{path}: ndim {ndim} outside 1..{MAX_NDIM}")
    dims_end = 8 + 8 * ndim
    if len(data) < dims_end:
        raise TruncatedFileError(f"{path}: header truncated in dimension list")
    shape = struct.unpack_from(f"<{ndim}Q", data, 8)
    if any(d < 1 for d in shape):
        raise BadShapeError(f"{path}: zero-length dimension in shape {shape}")
    dtype = _CODE_DTYPES[code]
    n_bytes = int(np.prod(shape)) * dtype.itemsize
    if len(data) - dims_end < n_bytes:
        raise TruncatedFileError(
            f"{path}: payload has {len(data) - dims_end} bytes, expected {n_bytes}"
        )
    arr = np.frombuffer(data[dims_end : dims_end + n_bytes], dtype=dtype).reshape(shape)
    # native byte order, writable copy
    return arr.astype(dtype.newbyteorder("="), copy=True)


def validate_dataset(
    logits: np.ndarray, labels: np.ndarray, lead_times: np.ndarray
) -> DatasetDims:
    """Check the shapes/dtypes/value ranges of a forecast dataset.

    logits must be float32 [N, K, H, W]; labels int64 [N, H, W] with values
    in 0..K-1; lead_times int64 [N] with non-negative values. The number of
    lead times L is inferred as max(lead_times) + 1.
    """
    if logits.dtype != np.float32:
        raise DatasetValidationError(f"logits: expected float32, got {logits.dtype}")
    if logits.ndim != 4:
        raise DatasetValidationError(f"logits: expected 4 dims [N,K,H,W], got shape {logits.shape}")
    n, k, h, w = logits.shape
    if labels.dtype != np.int64:
        raise DatasetValidationError(f"labels: expected int64, got {labels.dtype}")
    if labels.shape != (n, h, w):
        raise DatasetValidationError(
            f"labels: expected shape {(n, h, w)} to match logits, got {labels.shape}"
        )
    if lead_times.dtype != np.int64:
        raise DatasetValidationError(f"lead_times: expected int64, got {lead_times.dtype}")
    if lead_times.shape != (n,):
        raise DatasetValidationError(f"lead_times: expected shape ({n},), got {lead_times.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DatasetValidationError(
            f"labels: values must lie in 0..{k - 1}, found range "
            f"[{labels.min()}, {labels.max()}]"
        )
    if lead_times.min() < 0:
        raise DatasetValidationError("lead_times: negative lead-time index")
    n_lead = int(lead_times.max()) + 1
    return DatasetDims(n, k, h, w, n_lead)
