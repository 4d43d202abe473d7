"""Differentiable operations.

Shape table (N = batch, C/O = channels, H/W = spatial):

    matmul              [m,k] @ [k,n] -> [m,n]; [k] @ [k,n] -> [n]; [m,k] @ [k] -> [m]
    conv2d              [C,H,W] or [N,C,H,W] (or [C,N,H,W] with layout="CNHW"),
                        weight [O,C,kh,kw] -> [O,H',W'] / [N,O,H',W'] / [O,N,H',W']
    max_pool2d          [..,H,W] -> [..,floor((H-k)/s)+1, floor((W-k)/s)+1]
    global_avg_pool     mean over the last two axes: [C,H,W] -> [C]; [N,C,H,W] -> [N,C]
    concat              along ``axis``; other dims must agree
    add/sub/mul         numpy broadcasting
    square/relu/sigmoid elementwise
    sum/mean            full reduction -> scalar, or along ``axis``
    softmax             same shape, normalized along ``axis``
    cross_entropy       logits [N,K], int targets [N], bool mask [N] -> scalar
    binary_cross_entropy probabilities [N], targets [N] -> scalar
    take_rows           [n,...] indexed by int array [m] -> [m,...]
    reshape             any -> any with equal size
    transpose           permuted axes
    pairwise_relu_mean  p [n,d], bias [d] -> [n,d]
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import DTYPE, ShapeError, Tensor, as_tensor, record

# keeps each im2col buffer below this many float64 entries
_COL_BUDGET = 8_000_000


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(a.data * b.data, (a, b), bw, "mul")


def square(x) -> Tensor:
    x = as_tensor(x)
    return record(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def relu(x) -> Tensor:
    """max(x, 0); the derivative at exactly 0 is taken as 0."""
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def bw(g):
        return (g * (x.data > 0),)

    return record(out, (x,), bw, "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return (g * out * (1.0 - out),)

    return record(out, (x,), bw, "sigmoid")


# ----------------------------------------------------------------- reductions

def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), bw, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty axis")
    out = x.data.mean(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return record(out, (x,), bw, "mean")


# -------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data

    return record(a.data @ b.data, (a, b), bw, "matmul")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return record(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tensors, bw, "concat")


def take_rows(x, index) -> Tensor:
    """Gather along axis 0; repeated indices accumulate in the backward pass."""
    x = as_tensor(x)
    idx = np.asarray(index)
    if idx.dtype == bool:
        idx = np.flatnonzero(idx)
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return record(out, (x,), bw, "take_rows")


# ----------------------------------------------------------- classification

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), bw, "softmax")


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over rows selected by ``mask``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] == 0:
        raise ShapeError(f"cross_entropy needs [N, K>0] logits, got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    mask = np.ones(len(targets), bool) if mask is None else np.asarray(mask, bool)
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ShapeError("cross_entropy over an empty mask")
    k = logits.shape[1]
    if np.any(targets[rows] < 0) or np.any(targets[rows] >= k):
        raise ShapeError("target class out of range")
    logp = log_softmax_np(logits.data[rows])
    loss = -logp[np.arange(rows.size), targets[rows]].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(rows.size), targets[rows]] -= 1.0
        gl = np.zeros_like(logits.data)
        gl[rows] = p * (g / rows.size)
        return (gl,)

    return record(np.asarray(loss), (logits,), bw, "cross_entropy")


_BCE_CLIP = 1e-12


def binary_cross_entropy(p, targets) -> Tensor:
    p = as_tensor(p)
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != p.shape:
        raise ShapeError(f"targets shape {y.shape} does not match {p.shape}")
    if p.size == 0:
        raise ShapeError("binary_cross_entropy over an empty batch")
    pc = np.clip(p.data, _BCE_CLIP, 1.0 - _BCE_CLIP)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean()

    def bw(g):
        return (g * (pc - y) / (pc * (1.0 - pc)) / p.size,)

    return record(np.asarray(loss), (p,), bw, "binary_cross_entropy")


# ------------------------------------------------------------- convolution

def _pad_amounts(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    if padding == "valid":
        if size < k:
            raise ShapeError(f"input extent {size} smaller than kernel {k}")
        return 0, 0, (size - k) // stride + 1
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2, out
    raise ValueError(f"unknown padding {padding!r}")


def _conv_cnhw(xd: np.ndarray, wd: np.ndarray, bd, stride: int, padding: str,
               need_x: bool, need_w: bool):
    """Core convolution on channel-major [C, N, H, W] data.

    Returns the output and a closure mapping its gradient to (gx, gw, gb).
    """
    c, n, h, w = xd.shape
    o, wc, kh, kw = wd.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {wc}")
    top, bottom, oh = _pad_amounts(h, kh, stride, padding)
    left, right, ow = _pad_amounts(w, kw, stride, padding)
    if top + bottom + left + right:
        xp = np.zeros((c, n, h + top + bottom, w + left + right), dtype=DTYPE)
        xp[:, :, top:top + h, left:left + w] = xd
    else:
        xp = xd
    wm = wd.reshape(o, c * kh * kw)
    chunk = max(1, _COL_BUDGET // max(c * kh * kw * oh * ow, 1))
    rs, cs = (oh - 1) * stride + 1, (ow - 1) * stride + 1

    def cols_for(s: int, e: int) -> np.ndarray:
        cols = np.empty((c, kh, kw, e - s, oh, ow), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, s:e, i:i + rs:stride, j:j + cs:stride]
        return cols.reshape(c * kh * kw, -1)

    out = np.empty((o, n, oh, ow), dtype=DTYPE)
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        out[:, s:e] = (wm @ cols_for(s, e)).reshape(o, e - s, oh, ow)
    if bd is not None:
        out += bd[:, None, None, None]

    def bw(g: np.ndarray):
        gw = np.zeros_like(wm) if need_w else None
        gxp = np.zeros_like(xp) if need_x else None
        for s in range(0, n, chunk):
            e = min(n, s + chunk)
            gm = np.ascontiguousarray(g[:, s:e]).reshape(o, -1)
            if need_w:
                gw += gm @ cols_for(s, e).T
            if need_x:
                gcols = (wm.T @ gm).reshape(c, kh, kw, e - s, oh, ow)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, s:e, i:i + rs:stride, j:j + cs:stride] += gcols[:, i, j]
        gx = None
        if need_x:
            gx = gxp[:, :, top:top + h, left:left + w]
        gb = g.sum(axis=(1, 2, 3)) if bd is not None else None
        return gx, (gw.reshape(wd.shape) if need_w else None), gb

    return out, bw


def conv2d(x, weight, bias=None, stride: int = 1, padding: str = "same",
           layout: str = "NCHW") -> Tensor:
    """2-D cross-correlation (chunked im2col + one GEMM per chunk).

    Rank-3 input is a single [C, H, W] map. Rank-4 input is [N, C, H, W] by
    default; ``layout="CNHW"`` takes and returns channel-major [C, N, H, W],
    which avoids two transposes per layer inside the backbone.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be rank 3 or 4, got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be [O,C,kh,kw], got {weight.shape}")
    if layout not in ("NCHW", "CNHW"):
        raise ValueError(f"unknown layout {layout!r}")
    o = weight.shape[0]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d bias must be [{o}], got {bias.shape}")
    if x.ndim == 3:
        xd = x.data[:, None]
    elif layout == "NCHW":
        xd = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))
    else:
        xd = x.data
    out, core_bw = _conv_cnhw(xd, weight.data, None if bias is None else bias.data, stride,
                              padding, x.requires_grad, weight.requires_grad)
    if x.ndim == 3:
        out = out[:, 0]
    elif layout == "NCHW":
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        if x.ndim == 3:
            g = g[:, None]
        elif layout == "NCHW":
            g = g.transpose(1, 0, 2, 3)
        gx, gw, gb = core_bw(g)
        if gx is not None:
            if x.ndim == 3:
                gx = gx[:, 0]
            elif layout == "NCHW":
                gx = gx.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, bw, "conv2d")


def max_pool2d(x, size: int = 2, stride: int | None = None) -> Tensor:
    """Max over ``size`` x ``size`` windows of the last two axes.

    Ties go to the first maximum in row-major window order, so each window
    routes its gradient to exactly one input.
    """
    x = as_tensor(x)
    stride = size if stride is None else stride
    if x.ndim < 2:
        raise ShapeError("max_pool2d needs at least 2 dims")
    h, w = x.shape[-2:]
    if h < size or w < size:
        raise ShapeError(f"max_pool2d: input {h}x{w} smaller than window {size}")
    oh, ow = (h - size) // stride + 1, (w - size) // stride + 1
    lead = x.shape[:-2]
    out, arg = _kernels.pool_forward(np.ascontiguousarray(x.data).reshape(-1, h, w),
                                     size, stride, oh, ow)

    def bw(g):
        gx = _kernels.pool_backward(np.ascontiguousarray(g).reshape(-1, oh, ow), arg,
                                    size, stride, h, w)
        return (gx.reshape(x.shape),)

    return record(out.reshape(*lead, oh, ow), (x,), bw, "max_pool2d")


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool needs [C,H,W] or [N,C,H,W], got {x.shape}")
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))

    def bw(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),)

    return record(out, (x,), bw, "global_avg_pool")


# ---------------------------------------------------------------- graph ops

def _pairwise_relu_sums(p: np.ndarray, q: np.ndarray):
    """For each column, count and sum of p_j strictly below q_i, via one joint sort.

    Ordering [q; p] with a stable sort puts a q before any equal p, so equal
    values are never counted (relu(0) contributes nothing).
    """
    n = p.shape[0]
    vals = np.concatenate([q, p], axis=0)
    order = np.argsort(vals, axis=0, kind="stable")
    is_p = order >= n
    sorted_vals = np.take_along_axis(vals, order, axis=0)
    cnt = np.cumsum(is_p, axis=0)
    acc = np.cumsum(np.where(is_p, sorted_vals, 0.0), axis=0)
    pos = np.empty_like(order)
    np.put_along_axis(pos, order, np.arange(2 * n)[:, None].repeat(p.shape[1], 1), axis=0)
    k = np.take_along_axis(cnt, pos[:n], axis=0).astype(DTYPE)
    below = np.take_along_axis(acc, pos[:n], axis=0)
    return k, below, order, is_p, pos


def pairwise_relu_mean(p, bias) -> Tensor:
    """out[i] = mean over j != i of relu(p[i] - p[j] + bias).

    Exact and O(n d log n): per column, relu sums reduce to prefix sums over
    the sorted values, so the n*n*d message tensor is never materialized.
    """
    p, bias = as_tensor(p), as_tensor(bias)
    if p.ndim != 2 or bias.shape != (p.shape[1],):
        raise ShapeError(f"pairwise_relu_mean: p {p.shape} and bias {bias.shape} disagree")
    n = p.shape[0]
    if n < 2:
        raise ShapeError("pairwise_relu_mean needs at least 2 rows")
    pd, bd = p.data, bias.data
    q = pd + bd
    k, below, order, is_p, pos = _pairwise_relu_sums(pd, q)
    self_in = pd < q
    k_other = k - self_in
    total = k * q - below - np.where(self_in, q - pd, 0.0)
    out = total / (n - 1)

    def bw(g):
        gi = g / (n - 1)
        active = gi * k_other
        # sum of gi over rows i with q_i > p_j: total minus the q's sorted at or before p_j
        gq_sorted = np.where(is_p, 0.0, np.take_along_axis(np.concatenate([gi, np.zeros_like(gi)]), order, 0))
        upto = np.cumsum(gq_sorted, axis=0)
        gi_le = np.take_along_axis(upto, pos[n:], axis=0)
        gi_gt = gi.sum(axis=0, keepdims=True) - gi_le - np.where(self_in, gi, 0.0)
        return active - gi_gt, active.sum(axis=0)

    return record(out, (p, bias), bw, "pairwise_relu_mean")


def pairwise_relu_mean_dense(p: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Brute-force reference for :func:`pairwise_relu_mean` (materializes n*n*d)."""
    n = p.shape[0]
    m = np.maximum(p[:, None, :] - p[None, :, :] + bias, 0.0)
    m[np.arange(n), np.arange(n)] = 0.0
    return m.sum(axis=1) / (n - 1)
