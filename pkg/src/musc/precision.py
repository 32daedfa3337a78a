"""Floating point precision switch.

Everything numeric runs in float32 by default. Setting the environment
variable MUSC_F64=1 before import (or calling :func:`set_dtype`) switches the
whole package to float64, which is what the finite-difference gradient checks
use.
"""

import os
from contextlib import contextmanager

import numpy as np

_ALLOWED = (np.float32, np.float64)

_active = np.float64 if os.environ.get("MUSC_F64") == "1" else np.float32


def active_dtype():
    """Return the dtype new tensors are created with."""
    return _active


def set_dtype(dtype) -> None:
    dt = np.dtype(dtype).type
    if dt not in _ALLOWED:
        raise ValueError(f"unsupported dtype {dtype!r}, expected float32 or float64")
    global _active
    _active = dt


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the active dtype (used by verification tests)."""
    prev = _active
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(prev)


def asarray(data, dtype=None) -> np.ndarray:
    """np.asarray pinned to the active precision unless overridden."""
    return np.asarray(data, dtype=_active if dtype is None else dtype)
