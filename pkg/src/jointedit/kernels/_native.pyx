# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: direct-loop conv2d forward/backward and batched
bilinear gathers. Same contracts as kernels/reference.py."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

ctypedef fused floating:
    float
    double

BACKEND = "native"


def conv2d_fwd(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    if floating is float:
        out_np = np.zeros((b, o, ho, wo), dtype=np.float32)
    else:
        out_np = np.zeros((b, o, ho, wo), dtype=np.float64)
    cdef floating[:, :, :, ::1] y = out_np
    cdef Py_ssize_t bb, oo, cc, oy, ox, ky, kx, iy, ix
    cdef floating acc, wv
    with nogil:
        for bb in range(b):
            for oo in range(o):
                for cc in range(c):
                    for ky in range(kh):
                        for kx in range(kw):
                            wv = w[oo, cc, ky, kx]
                            if wv == 0:
                                continue
                            for oy in range(ho):
                                iy = oy * stride + ky - pad
                                if iy < 0 or iy >= h:
                                    continue
                                for ox in range(wo):
                                    ix = ox * stride + kx - pad
                                    if ix < 0 or ix >= wd:
                                        continue
                                    y[bb, oo, oy, ox] += wv * x[bb, cc, iy, ix]
    return out_np


def conv2d_bwd_w(floating[:, :, :, ::1] x, floating[:, :, :, ::1] gy, int stride, int pad, w_shape):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w_shape[0], kh = w_shape[2], kw = w_shape[3]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    if floating is float:
        out_np = np.zeros((o, c, kh, kw), dtype=np.float32)
    else:
        out_np = np.zeros((o, c, kh, kw), dtype=np.float64)
    cdef floating[:, :, :, ::1] gw = out_np
    cdef Py_ssize_t bb, oo, cc, oy, ox, ky, kx, iy, ix
    cdef floating acc
    with nogil:
        for oo in range(o):
            for cc in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        acc = 0
                        for bb in range(b):
                            for oy in range(ho):
                                iy = oy * stride + ky - pad
                                if iy < 0 or iy >= h:
                                    continue
                                for ox in range(wo):
                                    ix = ox * stride + kx - pad
                                    if ix < 0 or ix >= wd:
                                        continue
                                    acc += gy[bb, oo, oy, ox] * x[bb, cc, iy, ix]
                        gw[oo, cc, ky, kx] = acc
    return out_np


def conv2d_bwd_x(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] w, int stride, int pad, x_shape):
    cdef Py_ssize_t b = x_shape[0], c = x_shape[1], h = x_shape[2], wd = x_shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    if floating is float:
        out_np = np.zeros((b, c, h, wd), dtype=np.float32)
    else:
        out_np = np.zeros((b, c, h, wd), dtype=np.float64)
    cdef floating[:, :, :, ::1] gx = out_np
    cdef Py_ssize_t bb, oo, cc, oy, ox, ky, kx, iy, ix
    cdef floating g
    with nogil:
        for bb in range(b):
            for oo in range(o):
                for oy in range(ho):
                    for ox in range(wo):
                        g = gy[bb, oo, oy, ox]
                        if g == 0:
                            continue
                        for cc in range(c):
                            for ky in range(kh):
                                iy = oy * stride + ky - pad
                                if iy < 0 or iy >= h:
                                    continue
                                for kx in range(kw):
                                    ix = ox * stride + kx - pad
                                    if ix < 0 or ix >= wd:
                                        continue
                                    gx[bb, cc, iy, ix] += g * w[oo, cc, ky, kx]
    return out_np


def bilinear_gather_fwd(floating[:, :, :, ::1] fm, floating[:, :, ::1] pts):
    cdef Py_ssize_t b = fm.shape[0], c = fm.shape[1], h = fm.shape[2], w = fm.shape[3]
    cdef Py_ssize_t n = pts.shape[1]
    if floating is float:
        out_np = np.zeros((b, n, c), dtype=np.float32)
    else:
        out_np = np.zeros((b, n, c), dtype=np.float64)
    cdef floating[:, :, ::1] out = out_np
    cdef Py_ssize_t bb, ii, cc, x0, y0, x1, y1
    cdef floating x, y, fx, fy, w00, w10, w01, w11
    with nogil:
        for bb in range(b):
            for ii in range(n):
                x = pts[bb, ii, 0]
                y = pts[bb, ii, 1]
                x0 = <Py_ssize_t>floor(x)
                y0 = <Py_ssize_t>floor(y)
                fx = x - <floating>x0
                fy = y - <floating>y0
                x1 = x0 + 1
                y1 = y0 + 1
                w00 = (1 - fx) * (1 - fy)
                w10 = fx * (1 - fy)
                w01 = (1 - fx) * fy
                w11 = fx * fy
                for cc in range(c):
                    if 0 <= y0 < h:
                        if 0 <= x0 < w:
                            out[bb, ii, cc] += w00 * fm[bb, cc, y0, x0]
                        if 0 <= x1 < w:
                            out[bb, ii, cc] += w10 * fm[bb, cc, y0, x1]
                    if 0 <= y1 < h:
                        if 0 <= x0 < w:
                            out[bb, ii, cc] += w01 * fm[bb, cc, y1, x0]
                        if 0 <= x1 < w:
                            out[bb, ii, cc] += w11 * fm[bb, cc, y1, x1]
    return out_np


def bilinear_gather_bwd(floating[:, :, :, ::1] fm, floating[:, :, ::1] pts, floating[:, :, ::1] gout):
    cdef Py_ssize_t b = fm.shape[0], c = fm.shape[1], h = fm.shape[2], w = fm.shape[3]
    cdef Py_ssize_t n = pts.shape[1]
    if floating is float:
        gfm_np = np.zeros((b, c, h, w), dtype=np.float32)
        gpts_np = np.zeros((b, n, 2), dtype=np.float32)
    else:
        gfm_np = np.zeros((b, c, h, w), dtype=np.float64)
        gpts_np = np.zeros((b, n, 2), dtype=np.float64)
    cdef floating[:, :, :, ::1] gfm = gfm_np
    cdef floating[:, :, ::1] gpts = gpts_np
    cdef Py_ssize_t bb, ii, cc, x0, y0, x1, y1
    cdef floating x, y, fx, fy, g, v00, v10, v01, v11, gx, gy_
    with nogil:
        for bb in range(b):
            for ii in range(n):
                x = pts[bb, ii, 0]
                y = pts[bb, ii, 1]
                x0 = <Py_ssize_t>floor(x)
                y0 = <Py_ssize_t>floor(y)
                fx = x - <floating>x0
                fy = y - <floating>y0
                x1 = x0 + 1
                y1 = y0 + 1
                gx = 0
                gy_ = 0
                for cc in range(c):
                    g = gout[bb, ii, cc]
                    v00 = 0
                    v10 = 0
                    v01 = 0
                    v11 = 0
                    if 0 <= y0 < h:
                        if 0 <= x0 < w:
                            v00 = fm[bb, cc, y0, x0]
                            gfm[bb, cc, y0, x0] += g * (1 - fx) * (1 - fy)
                        if 0 <= x1 < w:
                            v10 = fm[bb, cc, y0, x1]
                            gfm[bb, cc, y0, x1] += g * fx * (1 - fy)
                    if 0 <= y1 < h:
                        if 0 <= x0 < w:
                            v01 = fm[bb, cc, y1, x0]
                            gfm[bb, cc, y1, x0] += g * (1 - fx) * fy
                        if 0 <= x1 < w:
                            v11 = fm[bb, cc, y1, x1]
                            gfm[bb, cc, y1, x1] += g * fx * fy
                    gx += g * (-(1 - fy) * v00 + (1 - fy) * v10 - fy * v01 + fy * v11)
                    gy_ += g * (-(1 - fx) * v00 - fx * v10 + (1 - fx) * v01 + fx * v11)
                gpts[bb, ii, 0] = gx
                gpts[bb, ii, 1] = gy_
    return gfm_np, gpts_np
