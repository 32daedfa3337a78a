"""Dense tensor helpers: validation, small algebra, and file formats.

Tensors are plain NumPy arrays of rank 1..4 in the active precision
(float32 by default, see :mod:`musc.precision`). The NTF container is the
on-disk interchange format for images, codes and kernels:

    magic b"NTF1" | uint32 LE rank | rank * uint32 LE dims | float32 LE payload

Payload is row-major (C order). Readers are strict: wrong magic, rank > 4,
empty dims, non-finite values, truncated or trailing bytes all raise
:class:`NtfFormatError`.
"""

import struct

import numpy as np

from . import precision

MAX_RANK = 4
NTF_MAGIC = b"NTF1"


class NtfFormatError(ValueError):
    """Raised for malformed NTF payloads."""


def check_tensor(data, rank: int | None = None, name: str = "tensor") -> np.ndarray:
    """Validate and return ``data`` as an array in the active precision.

    Enforces rank 1..4 (or the exact ``rank`` if given), no zero-sized axes
    and finite entries. Lists are accepted and converted.
    """
    a = precision.asarray(data)
    if not 1 <= a.ndim <= MAX_RANK:
        raise ValueError(f"{name}: rank {a.ndim} outside 1..{MAX_RANK}")
    if rank is not None and a.ndim != rank:
        raise ValueError(f"{name}: expected rank {rank}, got {a.ndim}")
    if any(d < 1 for d in a.shape):
        raise ValueError(f"{name}: zero-sized dimension in shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: non-finite entries")
    return a


def kron(a, b) -> np.ndarray:
    """Kronecker product of two rank-2 tensors."""
    a = check_tensor(a, rank=2, name="a")
    b = check_tensor(b, rank=2, name="b")
    return np.kron(a, b)


def dot(a, b) -> float:
    """Euclidean inner product of two tensors of identical shape."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dot: shape mismatch {a.shape} vs {b.shape}")
    return float(np.vdot(a, b))


def ntf_bytes(t) -> bytes:
    """Serialize a tensor to NTF bytes."""
    a = check_tensor(t)
    header = NTF_MAGIC + struct.pack("<I", a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def ntf_from_bytes(buf: bytes) -> np.ndarray:
    """Parse NTF bytes; returns an array in the active precision."""
    if len(buf) < 8:
        raise NtfFormatError("truncated header")
    if buf[:4] != NTF_MAGIC:
        raise NtfFormatError(f"bad magic {buf[:4]!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if not 1 <= rank <= MAX_RANK:
        raise NtfFormatError(f"rank {rank} outside 1..{MAX_RANK}")
    if len(buf) < 8 + 4 * rank:
        raise NtfFormatError("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    if any(d == 0 for d in dims):
        raise NtfFormatError(f"zero-sized dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
    start = 8 + 4 * rank
    expected = start + 4 * count
    if len(buf) < expected:
        raise NtfFormatError("truncated payload")
    if len(buf) > expected:
        raise NtfFormatError(f"{len(buf) - expected} trailing bytes")
    flat = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    if not np.all(np.isfinite(flat)):
        raise NtfFormatError("non-finite payload values")
    return flat.reshape(dims).astype(precision.active_dtype())


def write_ntf(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(ntf_bytes(t))


def read_ntf(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return ntf_from_bytes(fh.read())


def export_pgm(t, path) -> None:
    """Write a rank-2 tensor as a binary (P5) PGM image.

    Values are min-max normalized to 0..255; a constant image maps to
    mid-gray (128).
    """
    a = check_tensor(t, rank=2, name="image")
    lo = float(a.min())
    hi = float(a.max())
    if hi > lo:
        px = np.rint((a.astype(np.float64) - lo) / (hi - lo) * 255.0)
    else:
        px = np.full(a.shape, 128.0)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.astype(np.uint8).tobytes())
