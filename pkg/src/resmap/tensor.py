"""Reverse-mode autodiff over dense channel-first arrays.

Define-by-run: every op appends a node to a :class:`Tape` as it executes, so
the node list is already in topological order and `backward` is a single
reverse sweep. A tape is single-shot; rebuilding the graph each step is the
contract, which also makes gradient accumulation explicit (there is no
cross-step `.grad` state to zero).

Training runs in float32. The same graph code accepts float64 tapes, which
the gradient-check suite uses to keep finite-difference noise below the
comparison tolerances.

Only the gradient accumulation order (fixed reverse node order) and the
kernels in `resmap.backend` determine the result bits, so a given
(graph, seed, backend) triple reproduces gradients exactly.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .backend import kernels as K


class TapeError(RuntimeError):
    """Invalid tape use: double backward, cross-tape mixing, missing grads."""


class Tensor:
    """Array plus optional position on a tape.

    ``nid`` is None for untracked constants; such tensors participate in
    forward arithmetic but receive no gradient.
    """

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data: np.ndarray, tape: "Tape", nid: Optional[int]):
        self.data = data
        self.tape = tape
        self.nid = nid

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        """Gradient of the last backward pass; zeros for unreached leaves."""
        if self.nid is None:
            raise TapeError("constants do not carry gradients")
        if self.tape._grads is None:
            raise TapeError("backward has not run on this tape")
        g = self.tape._grads[self.nid]
        if g is None:
            return np.zeros_like(self.data)
        return g

    def __repr__(self) -> str:
        kind = "const" if self.nid is None else f"node {self.nid}"
        return f"Tensor({kind}, shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    def __init__(self, dtype=np.float32):
        dt = np.dtype(dtype)
        if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"tape dtype must be float32 or float64, got {dt}")
        self.dtype = dt
        self._parents: list[tuple] = []
        self._bwd: list[Optional[Callable]] = []
        self._grads: Optional[list] = None
        self._spent = False

    def _coerce(self, data) -> np.ndarray:
        arr = np.ascontiguousarray(data, dtype=self.dtype)
        if arr.size == 0:
            raise ValueError("zero-size tensors are not allowed")
        return arr

    def leaf(self, data) -> Tensor:
        """Tracked input; backward reports a gradient for it."""
        nid = len(self._parents)
        self._parents.append(())
        self._bwd.append(None)
        return Tensor(self._coerce(data), self, nid)

    def const(self, data) -> Tensor:
        """Untracked input (targets, noise draws, fixed masks)."""
        return Tensor(self._coerce(data), self, None)

    def _record(self, data: np.ndarray, parents: Sequence[Tensor], bwd: Callable) -> Tensor:
        if self._spent:
            raise TapeError("tape already consumed by backward; build a fresh graph")
        nid = len(self._parents)
        self._parents.append(tuple(p.nid for p in parents))
        self._bwd.append(bwd)
        return Tensor(data, self, nid)

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from ``loss``. One call per tape; a second call
        raises TapeError rather than silently reusing stale state."""
        if loss.tape is not self or loss.nid is None:
            raise TapeError("loss is not a tracked tensor of this tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        if self._spent:
            raise TapeError("backward already ran on this tape; rebuild the graph")
        self._spent = True
        grads: list = [None] * len(self._parents)
        grads[loss.nid] = np.ones_like(loss.data)
        for nid in range(len(self._parents) - 1, -1, -1):
            g = grads[nid]
            bwd = self._bwd[nid]
            if g is None or bwd is None:
                continue
            for pid, pg in zip(self._parents[nid], bwd(g)):
                if pid is None or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    # out-of-place: bwd closures may return shared arrays
                    grads[pid] = grads[pid] + pg
        self._grads = grads


# ---- helpers ----


def _shared_tape(*ts: Tensor) -> Tape:
    tape = None
    for t in ts:
        if not isinstance(t, Tensor):
            raise TypeError(f"expected Tensor, got {type(t).__name__}")
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError("tensors belong to different tapes")
    return tape


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---- elementwise and reduction ops ----


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _shared_tape(a, b)
    _same_shape(a, b, "add")
    return tape._record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _shared_tape(a, b)
    _same_shape(a, b, "sub")
    return tape._record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _shared_tape(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return tape._record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    tape = _shared_tape(a)
    s = float(s)
    return tape._record(a.data * np.asarray(s, dtype=tape.dtype), (a,), lambda g: (g * s,))


def exp(a: Tensor) -> Tensor:
    tape = _shared_tape(a)
    out = np.exp(a.data)
    return tape._record(out, (a,), lambda g: (g * out,))


def sum_all(a: Tensor) -> Tensor:
    tape = _shared_tape(a)
    shape = a.data.shape
    out = np.asarray(a.data.sum(), dtype=tape.dtype)
    return tape._record(out, (a,), lambda g: (np.full(shape, g, dtype=g.dtype),))


def mean_all(a: Tensor) -> Tensor:
    tape = _shared_tape(a)
    n = a.data.size
    shape = a.data.shape
    out = np.asarray(a.data.mean(), dtype=tape.dtype)
    return tape._record(out, (a,), lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """max(x, slope*x). Subgradient at 0 is the slope branch."""
    tape = _shared_tape(x)
    slope = float(slope)
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * np.asarray(slope, dtype=tape.dtype))

    def bwd(g):
        factor = np.full(g.shape, slope, dtype=g.dtype)
        factor[pos] = 1.0
        return (g * factor,)

    return tape._record(out.astype(tape.dtype, copy=False), (x,), bwd)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    tape = _shared_tape(x)
    if not lo < hi:
        raise ValueError(f"clamp needs lo < hi, got [{lo}, {hi}]")
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return tape._record(out, (x,), lambda g: (g * inside,))


# ---- structure ops ----


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    tape = _shared_tape(a, b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ValueError("concat_channels expects (C, H, W) tensors")
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ValueError(
            f"concat_channels: spatial mismatch {a.data.shape[1:]} vs {b.data.shape[1:]}"
        )
    ca = a.data.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return tape._record(
        out, (a, b), lambda g: (np.ascontiguousarray(g[:ca]), np.ascontiguousarray(g[ca:]))
    )


def broadcast_chw(v: Tensor, h: int, w: int) -> Tensor:
    """Spread a (C,) vector to (C, H, W); gradient sums over the plane."""
    tape = _shared_tape(v)
    if v.data.ndim != 1:
        raise ValueError("broadcast_chw expects a 1-D tensor")
    out = np.ascontiguousarray(np.broadcast_to(v.data[:, None, None], (v.data.shape[0], h, w)))
    return tape._record(out, (v,), lambda g: (g.sum(axis=(1, 2)),))


def spatial_mean(x: Tensor) -> Tensor:
    """(C, H, W) -> (C,) mean over the plane."""
    tape = _shared_tape(x)
    if x.data.ndim != 3:
        raise ValueError("spatial_mean expects a (C, H, W) tensor")
    c, h, w = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def bwd(g):
        return (np.ascontiguousarray(np.broadcast_to((g / (h * w))[:, None, None], (c, h, w))),)

    return tape._record(out, (x,), bwd)


def slice_vec(v: Tensor, start: int, stop: int) -> Tensor:
    tape = _shared_tape(v)
    if v.data.ndim != 1:
        raise ValueError("slice_vec expects a 1-D tensor")
    n = v.data.shape[0]
    if not (0 <= start < stop <= n):
        raise ValueError(f"slice [{start}:{stop}] out of range for length {n}")
    out = v.data[start:stop].copy()

    def bwd(g):
        gz = np.zeros(n, dtype=g.dtype)
        gz[start:stop] = g
        return (gz,)

    return tape._record(out, (v,), bwd)


# ---- spatial ops ----


def conv2d(x: Tensor, k: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, (C,H,W) x (O,C,Kh,Kw) -> (O,H',W').

    The padded extent must divide exactly by the stride; a remainder is an
    error rather than an implicit crop.
    """
    args = (x, k) if b is None else (x, k, b)
    tape = _shared_tape(*args)
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise ValueError("conv2d expects x:(C,H,W) and k:(O,C,Kh,Kw)")
    if k.data.shape[1] != x.data.shape[0]:
        raise ValueError(
            f"conv2d: kernel expects {k.data.shape[1]} input channels, got {x.data.shape[0]}"
        )
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    o, c, kh, kw = k.data.shape
    h, w = x.data.shape[1:]
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ValueError(
            f"conv2d: non-integral output extent for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    if b is not None and b.data.shape != (o,):
        raise ValueError(f"conv2d bias must have shape ({o},), got {b.data.shape}")

    xd, kd = x.data, k.data
    out = K.conv2d_forward(xd, kd, stride, padding)
    if b is not None:
        out = out + b.data[:, None, None]

    x_shape, k_shape = xd.shape, kd.shape

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx = K.conv2d_backward_input(g, kd, x_shape, stride, padding)
        gk = K.conv2d_backward_kernel(g, xd, k_shape, stride, padding)
        if b is None:
            return (gx, gk)
        return (gx, gk, g.sum(axis=(1, 2)))

    return tape._record(out, args, bwd)


def pool_max2x(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool; ties resolve to the first element in row-major
    window order, and the gradient scatters to exactly that element."""
    tape = _shared_tape(x)
    if x.data.ndim != 3:
        raise ValueError("pool_max2x expects a (C, H, W) tensor")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"pool_max2x needs even spatial dims, got {h}x{w}")
    out, idx = K.maxpool2x_forward(x.data)
    return tape._record(out, (x,), lambda g: (K.maxpool2x_backward(np.ascontiguousarray(g), idx),))


def upsample_nearest2x(x: Tensor) -> Tensor:
    tape = _shared_tape(x)
    if x.data.ndim != 3:
        raise ValueError("upsample_nearest2x expects a (C, H, W) tensor")
    out = K.upsample2x_forward(x.data)
    return tape._record(out, (x,), lambda g: (K.upsample2x_backward(np.ascontiguousarray(g)),))


# ---- probability ops ----


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    tape = _shared_tape(x)
    if x.data.ndim != 3:
        raise ValueError("softmax_channels expects a (K, H, W) tensor")
    shifted = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=0, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=0, keepdims=True)
        return (y * (g - dot),)

    return tape._record(y, (x,), bwd)


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[target].

    ``target`` is a plain (H, W) integer array, not a tensor; labels are data.
    """
    tape = _shared_tape(logits)
    if logits.data.ndim != 3:
        raise ValueError("cross_entropy expects logits of shape (K, H, W)")
    kc, h, w = logits.data.shape
    target = np.asarray(target)
    if target.shape != (h, w):
        raise ValueError(f"cross_entropy: target shape {target.shape} does not match plane {h}x{w}")
    if not np.issubdtype(target.dtype, np.integer):
        raise ValueError("cross_entropy target must be an integer array")
    if target.min() < 0 or target.max() >= kc:
        raise ValueError(f"cross_entropy target values must lie in [0, {kc})")

    t = target.astype(np.intp)
    shifted = logits.data - logits.data.max(axis=0, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    logp = shifted - lse
    loss = np.asarray(-np.take_along_axis(logp, t[None], axis=0)[0].mean(), dtype=tape.dtype)

    p = np.exp(logp)
    npix = h * w

    def bwd(g):
        gx = p.copy()
        flat = gx.reshape(kc, npix)
        flat[t.ravel(), np.arange(npix)] -= 1.0
        return (gx * (g / npix),)

    return tape._record(loss, (logits,), bwd)


def kl_diag_gaussian(mu_q: Tensor, logvar_q: Tensor, mu_p: Tensor, logvar_p: Tensor) -> Tensor:
    """KL(q || p) between diagonal Gaussians given as 1-D mean/logvar vectors."""
    tape = _shared_tape(mu_q, logvar_q, mu_p, logvar_p)
    for t, name in ((mu_q, "mu_q"), (logvar_q, "logvar_q"), (mu_p, "mu_p"), (logvar_p, "logvar_p")):
        if t.data.ndim != 1:
            raise ValueError(f"kl_diag_gaussian: {name} must be 1-D")
    n = mu_q.data.shape[0]
    if not (logvar_q.data.shape[0] == mu_p.data.shape[0] == logvar_p.data.shape[0] == n):
        raise ValueError("kl_diag_gaussian: all four vectors must share one length")

    mq, lq, mp, lp = mu_q.data, logvar_q.data, mu_p.data, logvar_p.data
    elqp = np.exp(lq - lp)
    inv_vp = np.exp(-lp)
    diff = mp - mq
    kl = np.asarray(0.5 * np.sum(elqp + diff * diff * inv_vp - 1.0 + lp - lq), dtype=tape.dtype)

    def bwd(g):
        gmq = g * (mq - mp) * inv_vp
        gmp = -gmq
        glq = g * 0.5 * (elqp - 1.0)
        glp = g * 0.5 * (1.0 - elqp - diff * diff * inv_vp)
        return (gmq, glq, gmp, glp)

    return tape._record(kl, (mu_q, logvar_q, mu_p, logvar_p), bwd)
