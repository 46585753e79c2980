"""Numba-compiled compute kernels.

Same contract as `_kernels_numpy`; see that module for the semantics. The
matmul halves of the convolutions still go through BLAS (np.dot inside the
jitted body), while patch gather/scatter, pooling and flow accumulation are
explicit loops that numba compiles to tight machine code.

Importing this module raises ImportError when numba is unavailable; the
backend selector falls back to the numpy kernels in that case.
"""

from __future__ import annotations

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def im2col(x, kh, kw, stride, pad):
    c, h, w = x.shape
    h2 = (h + 2 * pad - kh) // stride + 1
    w2 = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c * kh * kw, h2 * w2), dtype=x.dtype)
    for ci in range(c):
        for ky in range(kh):
            for kx in range(kw):
                row = (ci * kh + ky) * kw + kx
                for oy in range(h2):
                    iy = oy * stride + ky - pad
                    if iy < 0 or iy >= h:
                        continue
                    base = oy * w2
                    for ox in range(w2):
                        ix = ox * stride + kx - pad
                        if 0 <= ix < w:
                            out[row, base + ox] = x[ci, iy, ix]
    return out


@njit(cache=True)
def col2im(cols, c, h, w, kh, kw, stride, pad):
    h2 = (h + 2 * pad - kh) // stride + 1
    w2 = (w + 2 * pad - kw) // stride + 1
    x = np.zeros((c, h, w), dtype=cols.dtype)
    # ky outer, kx inner: the per-element accumulation order matches the
    # numpy backend so both produce bit-identical sums.
    for ci in range(c):
        for ky in range(kh):
            for kx in range(kw):
                row = (ci * kh + ky) * kw + kx
                for oy in range(h2):
                    iy = oy * stride + ky - pad
                    if iy < 0 or iy >= h:
                        continue
                    base = oy * w2
                    for ox in range(w2):
                        ix = ox * stride + kx - pad
                        if 0 <= ix < w:
                            x[ci, iy, ix] += cols[row, base + ox]
    return x


@njit(cache=True)
def _conv_fwd(x, k2, o, kh, kw, stride, pad):
    h2 = (x.shape[1] + 2 * pad - kh) // stride + 1
    w2 = (x.shape[2] + 2 * pad - kw) // stride + 1
    cols = im2col(x, kh, kw, stride, pad)
    out = np.dot(k2, cols)
    return out.reshape(o, h2, w2)


def conv2d_forward(x, k, stride, pad):
    o, c, kh, kw = k.shape
    k2 = np.ascontiguousarray(k.reshape(o, c * kh * kw))
    return _conv_fwd(x, k2, o, kh, kw, stride, pad)


@njit(cache=True)
def _conv_bwd_input(gout, k2t, c, h, w, kh, kw, stride, pad):
    g2 = np.ascontiguousarray(gout.reshape(gout.shape[0], gout.shape[1] * gout.shape[2]))
    gcols = np.dot(k2t, g2)
    return col2im(gcols, c, h, w, kh, kw, stride, pad)


def conv2d_backward_input(gout, k, x_shape, stride, pad):
    o, c, kh, kw = k.shape
    k2t = np.ascontiguousarray(k.reshape(o, c * kh * kw).T)
    return _conv_bwd_input(gout, k2t, x_shape[0], x_shape[1], x_shape[2], kh, kw, stride, pad)


@njit(cache=True)
def _conv_bwd_kernel(gout, x, kh, kw, stride, pad):
    o = gout.shape[0]
    g2 = np.ascontiguousarray(gout.reshape(o, gout.shape[1] * gout.shape[2]))
    colst = np.ascontiguousarray(im2col(x, kh, kw, stride, pad).T)
    return np.dot(g2, colst)


def conv2d_backward_kernel(gout, x, k_shape, stride, pad):
    o, c, kh, kw = k_shape
    gk = _conv_bwd_kernel(gout, x, kh, kw, stride, pad)
    return gk.reshape(o, c, kh, kw)


@njit(cache=True)
def maxpool2x_forward(x):
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    out = np.empty((c, h2, w2), dtype=x.dtype)
    idx = np.empty((c, h2, w2), dtype=np.uint8)
    for ci in range(c):
        for oy in range(h2):
            for ox in range(w2):
                iy, ix = 2 * oy, 2 * ox
                best = x[ci, iy, ix]
                bi = 0
                v = x[ci, iy, ix + 1]
                if v > best:
                    best = v
                    bi = 1
                v = x[ci, iy + 1, ix]
                if v > best:
                    best = v
                    bi = 2
                v = x[ci, iy + 1, ix + 1]
                if v > best:
                    best = v
                    bi = 3
                out[ci, oy, ox] = best
                idx[ci, oy, ox] = bi
    return out, idx


@njit(cache=True)
def maxpool2x_backward(gout, idx):
    c, h2, w2 = gout.shape
    gx = np.zeros((c, 2 * h2, 2 * w2), dtype=gout.dtype)
    for ci in range(c):
        for oy in range(h2):
            for ox in range(w2):
                k = idx[ci, oy, ox]
                gx[ci, 2 * oy + k // 2, 2 * ox + k % 2] = gout[ci, oy, ox]
    return gx


@njit(cache=True)
def upsample2x_forward(x):
    c, h, w = x.shape
    out = np.empty((c, 2 * h, 2 * w), dtype=x.dtype)
    for ci in range(c):
        for y in range(h):
            for xx in range(w):
                v = x[ci, y, xx]
                out[ci, 2 * y, 2 * xx] = v
                out[ci, 2 * y, 2 * xx + 1] = v
                out[ci, 2 * y + 1, 2 * xx] = v
                out[ci, 2 * y + 1, 2 * xx + 1] = v
    return out


@njit(cache=True)
def upsample2x_backward(gout):
    c, h, w = gout.shape
    h2, w2 = h // 2, w // 2
    gx = np.empty((c, h2, w2), dtype=gout.dtype)
    for ci in range(c):
        for y in range(h2):
            for xx in range(w2):
                gx[ci, y, xx] = (
                    gout[ci, 2 * y, 2 * xx]
                    + gout[ci, 2 * y, 2 * xx + 1]
                    + gout[ci, 2 * y + 1, 2 * xx]
                    + gout[ci, 2 * y + 1, 2 * xx + 1]
                )
    return gx


@njit(cache=True)
def flow_accumulate(order, recv):
    acc = np.zeros(recv.shape[0], dtype=np.int64)
    for i in range(order.shape[0]):
        c = order[i]
        r = recv[c]
        if r >= 0:
            acc[r] += acc[c] + 1
    return acc
