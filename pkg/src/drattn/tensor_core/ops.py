"""Differentiable operations on :class:`Tensor`.

Every op is a pure function of its inputs (plus an explicit seed for
dropout). Gradients are recorded on the active :class:`Tape` only when some
input requires one.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, record


def _check_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"{op}: expected a non-empty (n, c, h, w) tensor, got {x.shape}")


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Pointwise convolution; ``weight`` is (c_out, c_in), ``bias`` is (c_out,)."""
    _check_rank4(x, "conv1x1")
    n, c, h, w = x.shape
    c_out, c_in = weight.shape
    if c != c_in:
        raise ShapeError(f"conv1x1: input has {c} channels, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1x1: bias shape {bias.shape} != ({c_out},)")
    xf = x.data.reshape(n, c, h * w)
    out = np.matmul(weight.data, xf) + bias.data[None, :, None]

    def backward(g):
        gf = g.reshape(n, c_out, h * w)
        dx = np.matmul(weight.data.T, gf).reshape(x.shape) if x.requires_grad else None
        dw = np.tensordot(gf, xf, axes=([0, 2], [0, 2])) if weight.requires_grad else None
        db = gf.sum(axis=(0, 2)) if bias.requires_grad else None
        return dx, dw, db

    return record("conv1x1", (x, weight, bias), out.reshape(n, c_out, h, w), backward)


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1. ``weight`` is (c_out, c_in, 3, 3)."""
    _check_rank4(x, "conv3x3")
    n, c, h, w = x.shape
    c_out = weight.shape[0]
    if weight.shape != (c_out, c, 3, 3):
        raise ShapeError(f"conv3x3: weight {weight.shape} does not match {c} input channels")
    cols = kernels.im2col3x3(x.data)
    wmat = weight.data.reshape(c_out, c * 9)
    out = np.matmul(wmat, cols) + bias.data[None, :, None]

    def backward(g):
        gf = g.reshape(n, c_out, h * w)
        dx = None
        if x.requires_grad:
            dx = kernels.col2im3x3(np.matmul(wmat.T, gf), h, w)
        dw = None
        if weight.requires_grad:
            dw = np.tensordot(gf, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        db = gf.sum(axis=(0, 2)) if bias.requires_grad else None
        return dx, dw, db

    return record("conv3x3", (x, weight, bias), out.reshape(n, c_out, h, w), backward)


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor`` x ``factor`` average pooling."""
    _check_rank4(x, "avg_pool")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool: {h}x{w} not divisible by {factor}")
    if factor == 1:
        return record("avg_pool", (x,), x.data.copy(), lambda g: (g,))
    ho, wo = h // factor, w // factor
    out = x.data.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))

    def backward(g):
        scaled = g / (factor * factor)
        return (np.repeat(np.repeat(scaled, factor, axis=2), factor, axis=3),)

    return record("avg_pool", (x,), out, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (n, c, h, w) -> (n, c, 1, 1)."""
    _check_rank4(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape),)

    return record("global_avg_pool", (x,), out, backward)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial max; the gradient goes to the first row-major argmax."""
    _check_rank4(x, "global_max_pool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(n, c, 1, 1)

    def backward(g):
        dx = np.zeros((n, c, h * w))
        np.put_along_axis(dx, idx[:, :, None], g.reshape(n, c, 1), axis=2)
        return (dx.reshape(x.shape),)

    return record("global_max_pool", (x,), out, backward)


def cross_channel_avg_pool(x: Tensor) -> Tensor:
    """Per-pixel mean over channels: (n, c, h, w) -> (n, 1, h, w)."""
    _check_rank4(x, "cross_channel_avg_pool")
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / c, x.shape),)

    return record("cross_channel_avg_pool", (x,), out, backward)


def channel_group_mean(x: Tensor, groups: int) -> Tensor:
    """Mean over each run of ``c // groups`` contiguous channels.

    (n, groups*k, h, w) -> (n, groups, h, w).
    """
    _check_rank4(x, "channel_group_mean")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"channel_group_mean: {c} channels not divisible into {groups} groups")
    k = c // groups
    out = x.data.reshape(n, groups, k, h, w).mean(axis=2)

    def backward(g):
        dx = np.broadcast_to((g / k)[:, :, None], (n, groups, k, h, w))
        return (dx.reshape(x.shape),)

    return record("channel_group_mean", (x,), out, backward)


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        return (g * out * (1.0 - out),)

    return record("sigmoid", (x,), out, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def backward(g):
        return (np.where(mask, g, 0.0),)

    return record("relu", (x,), out, backward)


def _broadcast_axes(a_shape, b_shape):
    if a_shape == b_shape:
        return ()
    if len(a_shape) == 4 and len(b_shape) == 4:
        n, c, h, w = a_shape
        if b_shape == (n, c, 1, 1):
            return (2, 3)
        if b_shape == (n, 1, h, w):
            return (1,)
    raise ShapeError(f"broadcast_mul: cannot broadcast {b_shape} against {a_shape}")


def broadcast_mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``a * b``; ``b`` may be a channel map (n,c,1,1) or a spatial map (n,1,h,w)."""
    axes = _broadcast_axes(a.shape, b.shape)
    out = a.data * b.data

    def backward(g):
        da = g * b.data if a.requires_grad else None
        db = None
        if b.requires_grad:
            db = g * a.data
            if axes:
                db = db.sum(axis=axes, keepdims=True)
        return da, db

    return record("broadcast_mul", (a, b), out, backward)


def dropout(x: Tensor, rate: float, training: bool, seed=None) -> Tensor:
    """Inverted dropout. Identity (same values, no copy) when not training or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mult = keep * scale
    out = x.data * mult

    def backward(g):
        return (g * mult,)

    return record("dropout", (x,), out, backward)


def flatten(x: Tensor) -> Tensor:
    """(n, ...) -> (n, d)."""
    n = x.shape[0]
    out = x.data.reshape(n, -1)

    def backward(g):
        return (g.reshape(x.shape),)

    return record("flatten", (x,), out, backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with ``x`` flattened to (n, d) and ``weight`` (L, d)."""
    xf = x.data.reshape(x.shape[0], -1)
    n, d = xf.shape
    n_out, d_w = weight.shape
    if d != d_w:
        raise ShapeError(f"fully_connected: input dim {d} != weight dim {d_w}")
    if bias.shape != (n_out,):
        raise ShapeError(f"fully_connected: bias shape {bias.shape} != ({n_out},)")
    out = xf @ weight.data.T + bias.data

    def backward(g):
        dx = (g @ weight.data).reshape(x.shape) if x.requires_grad else None
        dw = g.T @ xf if weight.requires_grad else None
        db = g.sum(axis=0) if bias.requires_grad else None
        return dx, dw, db

    return record("fully_connected", (x, weight, bias), out, backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, n_cls = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels must lie in [0, {n_cls})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return record("softmax_cross_entropy", (logits,), np.array(loss), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(a: Tensor, factor: float) -> Tensor:
    return record("scale", (a,), a.data * factor, lambda g: (g * factor,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    return record("sum", (a,), np.array(a.data.sum()), lambda g: (np.broadcast_to(g, a.shape),))


def weighted_sum(a: Tensor, weights) -> Tensor:
    """Scalar ``sum(a * weights)`` for a constant ``weights`` array (e.g. a one-hot logit selector)."""
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), a.shape)
    return record("weighted_sum", (a,), np.array((a.data * weights).sum()), lambda g: (g * weights,))
