"""NumPy fallback for the hot kernels.

Same contracts as the compiled core (musc.kernels._core): batched 3x3
correlation with zero padding, 2x2 stride-2 transposed convolution, and the
kernel-gradient reductions the manual backward pass needs. Implemented with
strided windows plus tensordot so the heavy lifting stays in BLAS.

Layouts: images (B, C, H, W); 3x3 kernels (M, C, 3, 3); 2x2 kernels
(M, C, 2, 2). The 3x3 index (p, q) = (0..2, 0..2) addresses offsets -1..1,
the 2x2 index (0..1, 0..1) addresses offsets 0..1.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _windows3(x: np.ndarray) -> np.ndarray:
    """Zero-padded sliding 3x3 windows, shape (B, C, 3, 3, H, W)."""
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    s = xp.strides
    return as_strided(xp, (b, c, 3, 3, h, w), (s[0], s[1], s[2], s[3], s[2], s[3]))


def conv3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """out[b,m,i,j] = sum_{c,p,q} x[b,c,i+p-1,j+q-1] * w[m,c,p,q]."""
    win = _windows3(x)
    out = np.tensordot(w, win, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv3x3_grad_kernel(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient of <dy, conv3x3(x, w)> with respect to w, shape (M, C, 3, 3)."""
    win = _windows3(x)
    return np.ascontiguousarray(np.tensordot(dy, win, axes=([0, 2, 3], [0, 4, 5])))


def tconv2x2(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Stride-2 transposed convolution doubling H and W.

    out[b,m,2i+a,2j+d] = sum_c x[b,c,i,j] * v[m,c,1-a,1-d], which matches the
    per-channel Kronecker form kron(x_c, flip(v_mc)).
    """
    b, c, h, w = x.shape
    m = v.shape[0]
    vb = v[:, :, ::-1, ::-1]
    t = np.tensordot(x, vb, axes=([1], [1]))  # (B, H, W, M, 2, 2)
    return t.transpose(0, 3, 1, 4, 2, 5).reshape(b, m, 2 * h, 2 * w)


def tconv2x2_adjoint(y: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Adjoint of tconv2x2 in its input: (B, M, 2H, 2W) -> (B, C, H, W)."""
    b, m, h2, w2 = y.shape
    vb = v[:, :, ::-1, ::-1]
    y6 = y.reshape(b, m, h2 // 2, 2, w2 // 2, 2)
    out = np.tensordot(y6, vb, axes=([1, 3, 5], [0, 2, 3]))  # (B, H, W, C)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def tconv2x2_grad_kernel(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient of <dy, tconv2x2(x, v)> with respect to v, shape (M, C, 2, 2)."""
    b, m, h2, w2 = dy.shape
    y6 = dy.reshape(b, m, h2 // 2, 2, w2 // 2, 2)
    g = np.tensordot(y6, x, axes=([0, 2, 4], [0, 2, 3]))  # (M, 2, 2, C) wrt flipped v
    g = g.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(g[:, :, ::-1, ::-1])
