"""Numpy reference implementation of the hot kernels.

Same contracts as the compiled core in ``_fast.pyx``; selected as fallback
at import time when the extension is unavailable (see package __init__).

Bilinear convention: pixel centers sit on an integer grid; the base cell of
a coordinate p is [ceil(p)-1, ceil(p)], so at integer p the interpolation
weight is 1 on pixel p and the derivative is the left-cell slope. Reads
outside the image are zero.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, k, b):
    """x [B,Ci,H,W], k [Co,Ci,kk,kk] (kk odd), b [Co] -> [B,Co,H,W]."""
    kk = k.shape[2]
    p = kk // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (kk, kk), axis=(2, 3))
    out = np.einsum("bcxyuv,ocuv->boxy", win, k, optimize=True)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(dout, x, k):
    """Gradients of conv2d_forward w.r.t. (x, k, b)."""
    kk = k.shape[2]
    p = kk // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (kk, kk), axis=(2, 3))
    dk = np.einsum("boxy,bcxyuv->ocuv", dout, win, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    # dx is a same-size conv of dout with the spatially-flipped, channel-
    # transposed kernel
    kt = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx = conv2d_forward(dout, kt, np.zeros(kt.shape[0], dtype=k.dtype))
    return np.ascontiguousarray(dx), np.ascontiguousarray(dk), np.ascontiguousarray(db)


def bilinear_forward(img, px, py):
    """img [B,C,H,W], px/py [B,h,w] pixel coordinates -> [B,C,h,w]."""
    B, C, H, W = img.shape
    x0 = np.ceil(px).astype(np.int64) - 1
    y0 = np.ceil(py).astype(np.int64) - 1
    fx = px - x0
    fy = py - y0
    imgT = img.transpose(0, 2, 3, 1)  # [B,H,W,C]
    bb = np.arange(B)[:, None, None]
    out = np.zeros(px.shape + (C,), dtype=img.dtype)
    for dy in (0, 1):
        yi = y0 + dy
        wy = fy if dy else 1.0 - fy
        yv = (yi >= 0) & (yi < H)
        yc = np.clip(yi, 0, H - 1)
        for dx in (0, 1):
            xi = x0 + dx
            wx = fx if dx else 1.0 - fx
            xv = (xi >= 0) & (xi < W)
            xc = np.clip(xi, 0, W - 1)
            w = (wy * wx * (yv & xv)).astype(img.dtype)
            out += imgT[bb, yc, xc] * w[..., None]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def bilinear_backward(dout, img, px, py):
    """Gradients of bilinear_forward w.r.t. (img, px, py)."""
    B, C, H, W = img.shape
    x0 = np.ceil(px).astype(np.int64) - 1
    y0 = np.ceil(py).astype(np.int64) - 1
    fx = px - x0
    fy = py - y0
    imgT = img.transpose(0, 2, 3, 1)
    gT = dout.transpose(0, 2, 3, 1)  # [B,h,w,C]
    bb = np.arange(B)[:, None, None]
    dimgT = np.zeros_like(imgT)
    taps = {}
    for dy in (0, 1):
        yi = y0 + dy
        yv = (yi >= 0) & (yi < H)
        yc = np.clip(yi, 0, H - 1)
        for dx in (0, 1):
            xi = x0 + dx
            xv = (xi >= 0) & (xi < W)
            xc = np.clip(xi, 0, W - 1)
            m = (yv & xv).astype(img.dtype)
            taps[(dy, dx)] = imgT[bb, yc, xc] * m[..., None]
            wy = fy if dy else 1.0 - fy
            wx = fx if dx else 1.0 - fx
            np.add.at(dimgT, (bb, yc, xc), gT * (wy * wx * m)[..., None])
    g_sum = lambda a: (gT * a).sum(axis=-1)
    dpx = g_sum((1.0 - fy)[..., None] * (taps[(0, 1)] - taps[(0, 0)])
                + fy[..., None] * (taps[(1, 1)] - taps[(1, 0)]))
    dpy = g_sum((1.0 - fx)[..., None] * (taps[(1, 0)] - taps[(0, 0)])
                + fx[..., None] * (taps[(1, 1)] - taps[(0, 1)]))
    dimg = np.ascontiguousarray(dimgT.transpose(0, 3, 1, 2))
    return dimg, np.ascontiguousarray(dpx), np.ascontiguousarray(dpy)
