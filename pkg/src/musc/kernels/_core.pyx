# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the hot kernels.

Contracts and layouts are documented in musc.kernels.reference; this module
must stay drop-in interchangeable with it. Fused types cover the float32
production path and the float64 verification path. Inner loops run over raw
row pointers so the C compiler can vectorize them.
"""

import numpy as np

from libc.stdlib cimport free, malloc

ctypedef fused real:
    float
    double


cdef inline void _row_stencil(real* buf, const real* xr, const real* wr,
                              Py_ssize_t w) noexcept nogil:
    """buf[j] += correlation of x row xr with one kernel row wr (3 taps)."""
    cdef Py_ssize_t j
    cdef real w0 = wr[0], w1 = wr[1], w2 = wr[2]
    buf[0] += w1 * xr[0] + w2 * xr[1]
    for j in range(1, w - 1):
        buf[j] += w0 * xr[j - 1] + w1 * xr[j] + w2 * xr[j + 1]
    buf[w - 1] += w0 * xr[w - 2] + w1 * xr[w - 1]


def conv3x3(real[:, :, :, ::1] x, real[:, :, :, ::1] w):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], ww = x.shape[3]
    cdef Py_ssize_t nm = w.shape[0]
    if real is float:
        out_np = np.empty((nb, nm, h, ww), dtype=np.float32)
    else:
        out_np = np.empty((nb, nm, h, ww), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t b, m, c, i, j
    cdef real* buf
    cdef real* orow
    # one output row at a time: accumulate all (channel, tap-row) stencils
    # into a local buffer, then write once
    with nogil:
        buf = <real*> malloc(ww * sizeof(real))
        if buf == NULL:
            with gil:
                raise MemoryError()
        for b in range(nb):
            for m in range(nm):
                for i in range(h):
                    for j in range(ww):
                        buf[j] = 0
                    for c in range(nc):
                        if i > 0:
                            _row_stencil(buf, &x[b, c, i - 1, 0], &w[m, c, 0, 0], ww)
                        _row_stencil(buf, &x[b, c, i, 0], &w[m, c, 1, 0], ww)
                        if i < h - 1:
                            _row_stencil(buf, &x[b, c, i + 1, 0], &w[m, c, 2, 0], ww)
                    orow = &out[b, m, i, 0]
                    for j in range(ww):
                        orow[j] = buf[j]
        free(buf)
    return out_np


cdef inline void _grad_row(const real* dyr, const real* xr, Py_ssize_t w,
                           double* g) noexcept nogil:
    """Accumulate the three horizontal-tap correlations of one row pair.

    Row partials stay in the input precision; the cross-row accumulator is
    double either way.
    """
    cdef Py_ssize_t j
    cdef real a0 = 0, a1 = 0, a2 = 0
    a1 = a1 + dyr[0] * xr[0]
    a2 = a2 + dyr[0] * xr[1]
    for j in range(1, w - 1):
        a0 = a0 + dyr[j] * xr[j - 1]
        a1 = a1 + dyr[j] * xr[j]
        a2 = a2 + dyr[j] * xr[j + 1]
    a0 = a0 + dyr[w - 1] * xr[w - 2]
    a1 = a1 + dyr[w - 1] * xr[w - 1]
    g[0] += a0
    g[1] += a1
    g[2] += a2


def conv3x3_grad_kernel(real[:, :, :, ::1] x, real[:, :, :, ::1] dy):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t nm = dy.shape[1]
    # accumulate in double regardless of input precision; cast on return
    acc_np = np.zeros((nm, nc, 3, 3), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_np
    cdef Py_ssize_t b, m, c, i
    cdef const real* dyr
    with nogil:
        for m in range(nm):
            for c in range(nc):
                for b in range(nb):
                    for i in range(h):
                        dyr = &dy[b, m, i, 0]
                        if i > 0:
                            _grad_row(dyr, &x[b, c, i - 1, 0], w, &acc[m, c, 0, 0])
                        _grad_row(dyr, &x[b, c, i, 0], w, &acc[m, c, 1, 0])
                        if i < h - 1:
                            _grad_row(dyr, &x[b, c, i + 1, 0], w, &acc[m, c, 2, 0])
    if real is float:
        return acc_np.astype(np.float32)
    return acc_np


def tconv2x2(real[:, :, :, ::1] x, real[:, :, :, ::1] v):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t nm = v.shape[0]
    if real is float:
        out_np = np.zeros((nb, nm, 2 * h, 2 * w), dtype=np.float32)
    else:
        out_np = np.zeros((nb, nm, 2 * h, 2 * w), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t b, m, c, i, j
    cdef real v00, v01, v10, v11, xv
    cdef const real* xr
    cdef real* o0
    cdef real* o1
    with nogil:
        for b in range(nb):
            for m in range(nm):
                for c in range(nc):
                    # flipped kernel: out[2i+a, 2j+d] += x[i,j] * v[1-a, 1-d]
                    v11 = v[m, c, 0, 0]
                    v10 = v[m, c, 0, 1]
                    v01 = v[m, c, 1, 0]
                    v00 = v[m, c, 1, 1]
                    for i in range(h):
                        xr = &x[b, c, i, 0]
                        o0 = &out[b, m, 2 * i, 0]
                        o1 = &out[b, m, 2 * i + 1, 0]
                        for j in range(w):
                            xv = xr[j]
                            o0[2 * j] += xv * v00
                            o0[2 * j + 1] += xv * v01
                            o1[2 * j] += xv * v10
                            o1[2 * j + 1] += xv * v11
    return out_np


def tconv2x2_adjoint(real[:, :, :, ::1] y, real[:, :, :, ::1] v):
    cdef Py_ssize_t nb = y.shape[0], nm = y.shape[1]
    cdef Py_ssize_t h = y.shape[2] // 2, w = y.shape[3] // 2
    cdef Py_ssize_t nc = v.shape[1]
    if real is float:
        out_np = np.zeros((nb, nc, h, w), dtype=np.float32)
    else:
        out_np = np.zeros((nb, nc, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t b, m, c, i, j
    cdef real v00, v01, v10, v11
    cdef const real* y0
    cdef const real* y1
    cdef real* orow
    with nogil:
        for b in range(nb):
            for m in range(nm):
                for c in range(nc):
                    v11 = v[m, c, 0, 0]
                    v10 = v[m, c, 0, 1]
                    v01 = v[m, c, 1, 0]
                    v00 = v[m, c, 1, 1]
                    for i in range(h):
                        y0 = &y[b, m, 2 * i, 0]
                        y1 = &y[b, m, 2 * i + 1, 0]
                        orow = &out[b, c, i, 0]
                        for j in range(w):
                            orow[j] += (
                                y0[2 * j] * v00
                                + y0[2 * j + 1] * v01
                                + y1[2 * j] * v10
                                + y1[2 * j + 1] * v11
                            )
    return out_np


def tconv2x2_grad_kernel(real[:, :, :, ::1] x, real[:, :, :, ::1] dy):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t nm = dy.shape[1]
    acc_np = np.zeros((nm, nc, 2, 2), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_np
    cdef Py_ssize_t b, m, c, i, j
    cdef double g00, g01, g10, g11
    cdef const real* xr
    cdef const real* y0
    cdef const real* y1
    cdef real xv
    with nogil:
        for m in range(nm):
            for c in range(nc):
                g00 = 0
                g01 = 0
                g10 = 0
                g11 = 0
                for b in range(nb):
                    for i in range(h):
                        xr = &x[b, c, i, 0]
                        y0 = &dy[b, m, 2 * i, 0]
                        y1 = &dy[b, m, 2 * i + 1, 0]
                        for j in range(w):
                            xv = xr[j]
                            g00 = g00 + xv * y0[2 * j]
                            g01 = g01 + xv * y0[2 * j + 1]
                            g10 = g10 + xv * y1[2 * j]
                            g11 = g11 + xv * y1[2 * j + 1]
                # accumulated against the flipped kernel; unflip on store
                acc[m, c, 1, 1] = g00
                acc[m, c, 1, 0] = g01
                acc[m, c, 0, 1] = g10
                acc[m, c, 0, 0] = g11
    if real is float:
        return acc_np.astype(np.float32)
    return acc_np
