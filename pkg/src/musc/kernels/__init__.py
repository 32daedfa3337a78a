"""Hot convolution kernels with backend selection.

At import time the compiled Cython core is preferred; if it is missing (no
compiler at install time) or MUSC_PURE_PY=1 is set, the NumPy fallback in
:mod:`musc.kernels.reference` is used. Both backends implement identical
contracts, see reference.py for the layout conventions.
"""

import os

import numpy as np

from . import reference

try:
    from . import _core
except ImportError:
    _core = None

_impl = reference if (_core is None or os.environ.get("MUSC_PURE_PY") == "1") else _core


def backend() -> str:
    """Name of the active backend: 'compiled' or 'numpy'."""
    return "numpy" if _impl is reference else "compiled"


def have_compiled() -> bool:
    return _core is not None


def _prep(a: np.ndarray, b: np.ndarray, ranks=(4, 4)):
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if a.ndim != ranks[0] or b.ndim != ranks[1]:
        raise ValueError(f"expected ranks {ranks}, got {a.ndim}, {b.ndim}")
    if a.dtype != b.dtype:
        raise ValueError(f"dtype mismatch {a.dtype} vs {b.dtype}")
    return a, b


def conv3x3(x, w):
    x, w = _prep(x, w)
    if w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ValueError(f"kernel {w.shape} does not fit input {x.shape}")
    return _impl.conv3x3(x, w)


def conv3x3_grad_kernel(x, dy):
    x, dy = _prep(x, dy)
    if x.shape[0] != dy.shape[0] or x.shape[2:] != dy.shape[2:]:
        raise ValueError(f"input {x.shape} and upstream {dy.shape} disagree")
    return _impl.conv3x3_grad_kernel(x, dy)


def tconv2x2(x, v):
    x, v = _prep(x, v)
    if v.shape[2:] != (2, 2) or v.shape[1] != x.shape[1]:
        raise ValueError(f"kernel {v.shape} does not fit input {x.shape}")
    return _impl.tconv2x2(x, v)


def tconv2x2_adjoint(y, v):
    y, v = _prep(y, v)
    if v.shape[2:] != (2, 2) or v.shape[0] != y.shape[1]:
        raise ValueError(f"kernel {v.shape} does not fit upstream {y.shape}")
    if y.shape[2] % 2 or y.shape[3] % 2:
        raise ValueError(f"odd spatial dims in {y.shape}")
    return _impl.tconv2x2_adjoint(y, v)


def tconv2x2_grad_kernel(x, dy):
    x, dy = _prep(x, dy)
    if (2 * x.shape[2], 2 * x.shape[3]) != dy.shape[2:] or x.shape[0] != dy.shape[0]:
        raise ValueError(f"input {x.shape} and upstream {dy.shape} disagree")
    return _impl.tconv2x2_grad_kernel(x, dy)


# 1x1 mixing stays in NumPy on every backend; it is a single GEMM already.


def conv1x1(x, h):
    x, h = _prep(x, h)
    out = np.tensordot(h[:, :, 0, 0], x, axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv1x1_adjoint(y, h):
    y, h = _prep(y, h)
    out = np.tensordot(h[:, :, 0, 0], y, axes=([0], [1]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv1x1_grad_kernel(x, dy):
    x, dy = _prep(x, dy)
    g = np.tensordot(dy, x, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(g[:, :, None, None])
