# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core. Mirrors kernels/reference.py exactly, including
the left-cell bilinear convention and zero padding; loops run in a fixed
order so results are deterministic."""

import numpy as np

from libc.math cimport ceil

ctypedef fused floating:
    float
    double


cdef inline object _dtype_of(floating x):
    if floating is float:
        return np.float32
    return np.float64


def conv2d_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] k, floating[::1] b):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = k.shape[0], kk = k.shape[2], p = kk // 2
    out_np = np.empty((B, Co, H, W), dtype=_dtype_of(x[0, 0, 0, 0]))
    cdef floating[:, :, :, ::1] out = out_np
    cdef Py_ssize_t bi, o, c, i, j, u, v, ii, jj
    cdef floating acc
    for bi in range(B):
        for o in range(Co):
            for i in range(H):
                for j in range(W):
                    acc = b[o]
                    for c in range(Ci):
                        for u in range(kk):
                            ii = i + u - p
                            if ii < 0 or ii >= H:
                                continue
                            for v in range(kk):
                                jj = j + v - p
                                if jj < 0 or jj >= W:
                                    continue
                                acc = acc + x[bi, c, ii, jj] * k[o, c, u, v]
                    out[bi, o, i, j] = acc
    return out_np


def conv2d_backward(floating[:, :, :, ::1] dout, floating[:, :, :, ::1] x,
                    floating[:, :, :, ::1] k):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = k.shape[0], kk = k.shape[2], p = kk // 2
    dtype = _dtype_of(x[0, 0, 0, 0])
    dx_np = np.zeros((B, Ci, H, W), dtype=dtype)
    dk_np = np.zeros((Co, Ci, kk, kk), dtype=dtype)
    db_np = np.zeros(Co, dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_np
    cdef floating[:, :, :, ::1] dk = dk_np
    cdef floating[::1] db = db_np
    cdef Py_ssize_t bi, o, c, m, n, u, v, ii, jj
    cdef floating g
    for bi in range(B):
        for o in range(Co):
            for m in range(H):
                for n in range(W):
                    g = dout[bi, o, m, n]
                    db[o] = db[o] + g
                    for c in range(Ci):
                        for u in range(kk):
                            ii = m + u - p
                            if ii < 0 or ii >= H:
                                continue
                            for v in range(kk):
                                jj = n + v - p
                                if jj < 0 or jj >= W:
                                    continue
                                dk[o, c, u, v] = dk[o, c, u, v] + g * x[bi, c, ii, jj]
                                dx[bi, c, ii, jj] = dx[bi, c, ii, jj] + g * k[o, c, u, v]
    return dx_np, dk_np, db_np


def bilinear_forward(floating[:, :, :, ::1] img, floating[:, :, ::1] px,
                     floating[:, :, ::1] py):
    cdef Py_ssize_t B = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3]
    cdef Py_ssize_t h = px.shape[1], w = px.shape[2]
    out_np = np.empty((B, C, h, w), dtype=_dtype_of(img[0, 0, 0, 0]))
    cdef floating[:, :, :, ::1] out = out_np
    cdef Py_ssize_t bi, c, i, j, x0, y0, x1, y1
    cdef floating x, y, fx, fy, w00, w01, w10, w11, acc
    for bi in range(B):
        for i in range(h):
            for j in range(w):
                x = px[bi, i, j]
                y = py[bi, i, j]
                x0 = <Py_ssize_t>ceil(x) - 1
                y0 = <Py_ssize_t>ceil(y) - 1
                x1 = x0 + 1
                y1 = y0 + 1
                fx = x - <floating>x0
                fy = y - <floating>y0
                w00 = (1 - fy) * (1 - fx)
                w01 = (1 - fy) * fx
                w10 = fy * (1 - fx)
                w11 = fy * fx
                for c in range(C):
                    acc = 0
                    if 0 <= y0 < H:
                        if 0 <= x0 < W:
                            acc = acc + w00 * img[bi, c, y0, x0]
                        if 0 <= x1 < W:
                            acc = acc + w01 * img[bi, c, y0, x1]
                    if 0 <= y1 < H:
                        if 0 <= x0 < W:
                            acc = acc + w10 * img[bi, c, y1, x0]
                        if 0 <= x1 < W:
                            acc = acc + w11 * img[bi, c, y1, x1]
                    out[bi, c, i, j] = acc
    return out_np


def bilinear_backward(floating[:, :, :, ::1] dout, floating[:, :, :, ::1] img,
                      floating[:, :, ::1] px, floating[:, :, ::1] py):
    cdef Py_ssize_t B = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3]
    cdef Py_ssize_t h = px.shape[1], w = px.shape[2]
    dtype = _dtype_of(img[0, 0, 0, 0])
    dimg_np = np.zeros((B, C, H, W), dtype=dtype)
    dpx_np = np.zeros((B, h, w), dtype=dtype)
    dpy_np = np.zeros((B, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dimg = dimg_np
    cdef floating[:, :, ::1] dpx = dpx_np
    cdef floating[:, :, ::1] dpy = dpy_np
    cdef Py_ssize_t bi, c, i, j, x0, y0, x1, y1
    cdef floating x, y, fx, fy, g, v00, v01, v10, v11, gx, gy
    for bi in range(B):
        for i in range(h):
            for j in range(w):
                x = px[bi, i, j]
                y = py[bi, i, j]
                x0 = <Py_ssize_t>ceil(x) - 1
                y0 = <Py_ssize_t>ceil(y) - 1
                x1 = x0 + 1
                y1 = y0 + 1
                fx = x - <floating>x0
                fy = y - <floating>y0
                gx = 0
                gy = 0
                for c in range(C):
                    g = dout[bi, c, i, j]
                    v00 = 0
                    v01 = 0
                    v10 = 0
                    v11 = 0
                    if 0 <= y0 < H:
                        if 0 <= x0 < W:
                            v00 = img[bi, c, y0, x0]
                            dimg[bi, c, y0, x0] = dimg[bi, c, y0, x0] + g * (1 - fy) * (1 - fx)
                        if 0 <= x1 < W:
                            v01 = img[bi, c, y0, x1]
                            dimg[bi, c, y0, x1] = dimg[bi, c, y0, x1] + g * (1 - fy) * fx
                    if 0 <= y1 < H:
                        if 0 <= x0 < W:
                            v10 = img[bi, c, y1, x0]
                            dimg[bi, c, y1, x0] = dimg[bi, c, y1, x0] + g * fy * (1 - fx)
                        if 0 <= x1 < W:
                            v11 = img[bi, c, y1, x1]
                            dimg[bi, c, y1, x1] = dimg[bi, c, y1, x1] + g * fy * fx
                    gx = gx + g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10))
                    gy = gy + g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01))
                dpx[bi, i, j] = gx
                dpy[bi, i, j] = gy
    return dimg_np, dpx_np, dpy_np
