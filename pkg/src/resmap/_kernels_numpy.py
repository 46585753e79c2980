"""Pure-numpy compute kernels.

Fallback implementations of the hot inner loops. Convolution is expressed as
im2col plus one BLAS matmul; pooling, upsampling and the scatter half of
col2im use vectorized slicing. Numerics match `_kernels_numba` exactly: both
backends feed identical operand layouts to the same BLAS, and the col2im
accumulation order (ky outer, kx inner) is the same.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (C, H, W) into a (C*kh*kw, H_out*W_out) patch matrix."""
    c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h2 = _out_extent(h, kh, stride, pad)
    w2 = _out_extent(w, kw, stride, pad)
    s0, s1, s2 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(c, kh, kw, h2, w2),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
        writeable=False,
    )
    return win.reshape(c * kh * kw, h2 * w2)


def col2im(cols: np.ndarray, c: int, h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Fold a patch matrix back to (C, H, W), summing overlapping entries."""
    hp, wp = h + 2 * pad, w + 2 * pad
    h2 = _out_extent(h, kh, stride, pad)
    w2 = _out_extent(w, kw, stride, pad)
    xp = np.zeros((c, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(c, kh, kw, h2, w2)
    for ky in range(kh):
        for kx in range(kw):
            xp[:, ky : ky + stride * h2 : stride, kx : kx + stride * w2 : stride] += c6[:, ky, kx]
    if pad:
        return np.ascontiguousarray(xp[:, pad : pad + h, pad : pad + w])
    return xp


def conv2d_forward(x: np.ndarray, k: np.ndarray, stride: int, pad: int) -> np.ndarray:
    o, c, kh, kw = k.shape
    h2 = _out_extent(x.shape[1], kh, stride, pad)
    w2 = _out_extent(x.shape[2], kw, stride, pad)
    cols = im2col(x, kh, kw, stride, pad)
    out = k.reshape(o, c * kh * kw) @ cols
    return out.reshape(o, h2, w2)


def conv2d_backward_input(gout: np.ndarray, k: np.ndarray, x_shape: tuple, stride: int, pad: int) -> np.ndarray:
    o, c, kh, kw = k.shape
    g2 = np.ascontiguousarray(gout.reshape(o, -1))
    # materialized transpose: identical BLAS call to the numba backend
    gcols = np.ascontiguousarray(k.reshape(o, c * kh * kw).T) @ g2
    return col2im(gcols, x_shape[0], x_shape[1], x_shape[2], kh, kw, stride, pad)


def conv2d_backward_kernel(gout: np.ndarray, x: np.ndarray, k_shape: tuple, stride: int, pad: int) -> np.ndarray:
    o, c, kh, kw = k_shape
    cols = im2col(x, kh, kw, stride, pad)
    gk = np.ascontiguousarray(gout.reshape(o, -1)) @ np.ascontiguousarray(cols.T)
    return gk.reshape(o, c, kh, kw)


def maxpool2x_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pool. Returns (pooled, argmax) where argmax holds the
    in-window index 0..3 in row-major window order; ties keep the first."""
    c, h, w = x.shape
    blocks = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.uint8)


def maxpool2x_backward(gout: np.ndarray, idx: np.ndarray) -> np.ndarray:
    c, h2, w2 = gout.shape
    gb = np.zeros((c, h2, w2, 4), dtype=gout.dtype)
    np.put_along_axis(gb, idx[..., None].astype(np.intp), gout[..., None], axis=3)
    return np.ascontiguousarray(gb.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2))


def upsample2x_forward(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.repeat(np.repeat(x, 2, axis=1), 2, axis=2))


def upsample2x_backward(gout: np.ndarray) -> np.ndarray:
    c, h, w = gout.shape
    b = gout.reshape(c, h // 2, 2, w // 2, 2)
    # explicit left-to-right sum: same rounding as the numba loop
    return ((b[:, :, 0, :, 0] + b[:, :, 0, :, 1]) + b[:, :, 1, :, 0]) + b[:, :, 1, :, 1]


def flow_accumulate(order: np.ndarray, recv: np.ndarray) -> np.ndarray:
    """Count upslope contributors per cell.

    ``order`` lists flat cell indices from highest to lowest; ``recv[c]`` is
    the flat index of the cell c drains to, or -1 for sinks. Receivers are
    strictly lower than their sources, so a single pass in height order sees
    every contributor before its receiver.
    """
    acc = np.zeros(recv.shape[0], dtype=np.int64)
    for c in order:
        r = recv[c]
        if r >= 0:
            acc[r] += acc[c] + 1
    return acc
