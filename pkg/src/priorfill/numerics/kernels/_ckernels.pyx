# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels.

Loops are arranged so the innermost axis walks a contiguous output (or input)
row, which lets the C compiler vectorize the multiply-accumulate. Iteration
order is fixed, so results are deterministic run to run; dtype dispatch
(float32/float64) comes from the fused type.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


BACKEND = "cython"


cdef inline Py_ssize_t _ox_lo(Py_ssize_t kj, Py_ssize_t pad, Py_ssize_t stride) nogil:
    # smallest ox with ox*stride + kj - pad >= 0
    cdef Py_ssize_t num = pad - kj
    if num <= 0:
        return 0
    return (num + stride - 1) // stride


cdef inline Py_ssize_t _ox_hi(Py_ssize_t kj, Py_ssize_t pad, Py_ssize_t stride,
                              Py_ssize_t wd, Py_ssize_t ow) nogil:
    # one past the largest ox with ox*stride + kj - pad <= wd - 1
    cdef Py_ssize_t num = wd - 1 - kj + pad
    if num < 0:
        return 0
    cdef Py_ssize_t hi = num // stride + 1
    return hi if hi < ow else ow


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                   int stride, int pad, int groups):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], cg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t og = o // groups

    if floating is float:
        y_arr = np.zeros((b, o, oh, ow), dtype=np.float32)
    else:
        y_arr = np.zeros((b, o, oh, ow), dtype=np.float64)
    cdef floating[:, :, :, ::1] y = y_arr

    cdef Py_ssize_t ib, g, io, ic, ich, ki, kj, oy, ox, ih, lo, hi, off
    cdef floating wv
    cdef floating *xrow
    cdef floating *yrow
    with nogil:
        for ib in range(b):
            for g in range(groups):
                for io in range(g * og, (g + 1) * og):
                    for ic in range(cg):
                        ich = g * cg + ic
                        for ki in range(kh):
                            for kj in range(kw):
                                wv = w[io, ic, ki, kj]
                                if wv == 0:
                                    continue
                                lo = _ox_lo(kj, pad, stride)
                                hi = _ox_hi(kj, pad, stride, wd, ow)
                                off = kj - pad
                                for oy in range(oh):
                                    ih = oy * stride + ki - pad
                                    if ih < 0 or ih >= h:
                                        continue
                                    xrow = &x[ib, ich, ih, 0]
                                    yrow = &y[ib, io, oy, 0]
                                    if stride == 1:
                                        for ox in range(lo, hi):
                                            yrow[ox] += wv * xrow[ox + off]
                                    else:
                                        for ox in range(lo, hi):
                                            yrow[ox] += wv * xrow[ox * stride + off]
    return y_arr


def conv2d_weight_grad(floating[:, :, :, ::1] x, floating[:, :, :, ::1] dy,
                       int kh, int kw, int stride, int pad, int groups):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = dy.shape[1], oh = dy.shape[2], ow = dy.shape[3]
    cdef Py_ssize_t cg = c // groups, og = o // groups

    if floating is float:
        dw_arr = np.zeros((o, cg, kh, kw), dtype=np.float32)
    else:
        dw_arr = np.zeros((o, cg, kh, kw), dtype=np.float64)
    cdef floating[:, :, :, ::1] dw = dw_arr

    cdef Py_ssize_t ib, g, io, ic, ich, ki, kj, oy, ox, ih, lo, hi, off
    cdef floating acc
    cdef floating *xrow
    cdef floating *dyrow
    with nogil:
        for ib in range(b):
            for g in range(groups):
                for io in range(g * og, (g + 1) * og):
                    for ic in range(cg):
                        ich = g * cg + ic
                        for ki in range(kh):
                            for kj in range(kw):
                                lo = _ox_lo(kj, pad, stride)
                                hi = _ox_hi(kj, pad, stride, wd, ow)
                                off = kj - pad
                                acc = 0
                                for oy in range(oh):
                                    ih = oy * stride + ki - pad
                                    if ih < 0 or ih >= h:
                                        continue
                                    xrow = &x[ib, ich, ih, 0]
                                    dyrow = &dy[ib, io, oy, 0]
                                    if stride == 1:
                                        for ox in range(lo, hi):
                                            acc += dyrow[ox] * xrow[ox + off]
                                    else:
                                        for ox in range(lo, hi):
                                            acc += dyrow[ox] * xrow[ox * stride + off]
                                dw[io, ic, ki, kj] += acc
    return dw_arr


def conv2d_input_grad(floating[:, :, :, ::1] dy, floating[:, :, :, ::1] w,
                      int h, int wd, int stride, int pad, int groups):
    cdef Py_ssize_t b = dy.shape[0], o = dy.shape[1], oh = dy.shape[2], ow = dy.shape[3]
    cdef Py_ssize_t cg = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t c = cg * groups, og = o // groups

    if floating is float:
        dx_arr = np.zeros((b, c, h, wd), dtype=np.float32)
    else:
        dx_arr = np.zeros((b, c, h, wd), dtype=np.float64)
    cdef floating[:, :, :, ::1] dx = dx_arr

    cdef Py_ssize_t ib, g, io, ic, ich, ki, kj, oy, ox, ih, lo, hi, off
    cdef floating wv
    cdef floating *dxrow
    cdef floating *dyrow
    with nogil:
        for ib in range(b):
            for g in range(groups):
                for io in range(g * og, (g + 1) * og):
                    for ic in range(cg):
                        ich = g * cg + ic
                        for ki in range(kh):
                            for kj in range(kw):
                                wv = w[io, ic, ki, kj]
                                if wv == 0:
                                    continue
                                lo = _ox_lo(kj, pad, stride)
                                hi = _ox_hi(kj, pad, stride, wd, ow)
                                off = kj - pad
                                for oy in range(oh):
                                    ih = oy * stride + ki - pad
                                    if ih < 0 or ih >= h:
                                        continue
                                    dxrow = &dx[ib, ich, ih, 0]
                                    dyrow = &dy[ib, io, oy, 0]
                                    if stride == 1:
                                        for ox in range(lo, hi):
                                            dxrow[ox + off] += wv * dyrow[ox]
                                    else:
                                        for ox in range(lo, hi):
                                            dxrow[ox * stride + off] += wv * dyrow[ox]
    return dx_arr
