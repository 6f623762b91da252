# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled bilinear gather kernels.

Layout shared by every kernel (all C-contiguous):

    x      (S, C, H*W)   S independent sampling sets (batch x groups)
    pos_y  (S, P)        row coordinate of every sample point, in pixels
    pos_x  (S, P)        column coordinate
    out    (S, C, P)

Corners falling outside the image contribute zero.
"""

from cython.parallel import prange
from libc.math cimport floor
from libc.stdlib cimport free, malloc

ctypedef fused real:
    float
    double


cdef inline void _corners(real[:, ::1] pos_y, real[:, ::1] pos_x, Py_ssize_t s,
                          Py_ssize_t H, Py_ssize_t W,
                          Py_ssize_t* idx, real* wt, real* fy_out, real* fx_out) noexcept nogil:
    # idx[4p + j] == -1 marks an out-of-bounds corner (its weight is 0)
    cdef Py_ssize_t p, P = pos_y.shape[1]
    cdef Py_ssize_t y0, x0
    cdef real y, x, fy, fx
    cdef bint vy0, vy1, vx0, vx1
    for p in range(P):
        y = pos_y[s, p]
        x = pos_x[s, p]
        y0 = <Py_ssize_t> floor(y)
        x0 = <Py_ssize_t> floor(x)
        fy = y - y0
        fx = x - x0
        fy_out[p] = fy
        fx_out[p] = fx
        vy0 = 0 <= y0 < H
        vy1 = 0 <= y0 + 1 < H
        vx0 = 0 <= x0 < W
        vx1 = 0 <= x0 + 1 < W
        wt[4 * p] = (1 - fy) * (1 - fx)
        wt[4 * p + 1] = (1 - fy) * fx
        wt[4 * p + 2] = fy * (1 - fx)
        wt[4 * p + 3] = fy * fx
        idx[4 * p] = y0 * W + x0 if (vy0 and vx0) else -1
        idx[4 * p + 1] = y0 * W + x0 + 1 if (vy0 and vx1) else -1
        idx[4 * p + 2] = (y0 + 1) * W + x0 if (vy1 and vx0) else -1
        idx[4 * p + 3] = (y0 + 1) * W + x0 + 1 if (vy1 and vx1) else -1


cdef inline real _value(real[:, :, ::1] x, Py_ssize_t s, Py_ssize_t c,
                        Py_ssize_t i) noexcept nogil:
    if i < 0:
        return 0
    return x[s, c, i]


def sample_forward(real[:, :, ::1] x, real[:, ::1] pos_y, real[:, ::1] pos_x,
                   real[:, :, ::1] out, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t S = x.shape[0], C = x.shape[1], P = pos_y.shape[1]
    cdef Py_ssize_t s, c, p, j
    cdef Py_ssize_t* idx
    cdef real* wt
    cdef real* fy
    cdef real* fx
    cdef real acc
    for s in prange(S, nogil=True, schedule="static"):
        idx = <Py_ssize_t*> malloc(4 * P * sizeof(Py_ssize_t))
        wt = <real*> malloc(4 * P * sizeof(real))
        fy = <real*> malloc(P * sizeof(real))
        fx = <real*> malloc(P * sizeof(real))
        _corners(pos_y, pos_x, s, H, W, idx, wt, fy, fx)
        for c in range(C):
            for p in range(P):
                # same accumulation order as the torch fallback
                acc = 0
                for j in range(4):
                    if idx[4 * p + j] >= 0:
                        acc = acc + wt[4 * p + j] * x[s, c, idx[4 * p + j]]
                out[s, c, p] = acc
        free(idx)
        free(wt)
        free(fy)
        free(fx)


def sample_backward(real[:, :, ::1] x, real[:, ::1] pos_y, real[:, ::1] pos_x,
                    real[:, :, ::1] grad_out, real[:, :, ::1] grad_x,
                    real[:, ::1] grad_y, real[:, ::1] grad_xpos,
                    Py_ssize_t H, Py_ssize_t W, bint need_x, bint need_pos):
    """Accumulate into zero-initialised ``grad_x``, ``grad_y``, ``grad_xpos``."""
    cdef Py_ssize_t S = x.shape[0], C = x.shape[1], P = pos_y.shape[1]
    cdef Py_ssize_t s, c, p, j
    cdef Py_ssize_t* idx
    cdef real* wt
    cdef real* fy
    cdef real* fx
    cdef real g, v00, v01, v10, v11
    for s in prange(S, nogil=True, schedule="static"):
        idx = <Py_ssize_t*> malloc(4 * P * sizeof(Py_ssize_t))
        wt = <real*> malloc(4 * P * sizeof(real))
        fy = <real*> malloc(P * sizeof(real))
        fx = <real*> malloc(P * sizeof(real))
        _corners(pos_y, pos_x, s, H, W, idx, wt, fy, fx)
        for c in range(C):
            for p in range(P):
                g = grad_out[s, c, p]
                if need_x:
                    for j in range(4):
                        if idx[4 * p + j] >= 0:
                            grad_x[s, c, idx[4 * p + j]] += wt[4 * p + j] * g
                if need_pos:
                    v00 = _value(x, s, c, idx[4 * p])
                    v01 = _value(x, s, c, idx[4 * p + 1])
                    v10 = _value(x, s, c, idx[4 * p + 2])
                    v11 = _value(x, s, c, idx[4 * p + 3])
                    grad_y[s, p] += g * ((v10 - v00) * (1 - fx[p]) + (v11 - v01) * fx[p])
                    grad_xpos[s, p] += g * ((v01 - v00) * (1 - fy[p]) + (v11 - v10) * fy[p])
        free(idx)
        free(wt)
        free(fy)
        free(fx)
