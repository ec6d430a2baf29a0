"""Differentiable operations used by the two classifiers.

Images are laid out as ``(batch, channels, height, width)``; vectors as
``(batch, features)``. Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, as_tensor, make_result


@dataclass(frozen=True)
class SeluConstants:
    lam: float = 1.0507009873554805
    alpha: float = 1.6732632423543772

    def __post_init__(self):
        if not (self.lam > 1 and self.alpha > 1):
            raise ValueError("SELU constants must satisfy lambda > 1 and alpha > 1")


SELU_DEFAULT = SeluConstants()


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return tuple(int(e) for e in v)
    return (int(v), int(v))


def output_extent(size: int, kernel: int, stride: int, pad_total: int) -> int:
    return (size + pad_total - kernel) // stride + 1


def _pad4(padding) -> tuple:
    """Normalize padding to (top, bottom, left, right)."""
    if isinstance(padding, (tuple, list)):
        if len(padding) == 2:
            ph, pw = padding
            return (int(ph), int(ph), int(pw), int(pw))
        if len(padding) == 4:
            return tuple(int(p) for p in padding)
        raise ShapeError(f"padding must have 1, 2 or 4 entries, got {padding!r}")
    p = int(padding)
    return (p, p, p, p)


def _pad_channels_last(xd, pt, pb, pl, pr, value):
    """Pad H and W; the result is an (N, C, H, W) view over channels-last memory."""
    N, C, H, W = xd.shape
    buf = np.full((N, H + pt + pb, W + pl + pr, C), value, dtype=xd.dtype)
    buf[:, pt : pt + H, pl : pl + W, :] = xd.transpose(0, 2, 3, 1)
    return buf.transpose(0, 3, 1, 2)


def _check_image(x: Tensor, op: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected (N, C, H, W) input, got shape {x.shape}", dim="rank")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv2d(x, weight, bias, stride: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation with per-filter bias.

    ``padding`` may be an int, ``(pad_h, pad_w)`` or
    ``(top, bottom, left, right)``; padded cells are zero.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _check_image(x, "conv2d")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}", dim="stride")
    N, C, H, W = x.shape
    F, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Cw}", dim="channels")
    if bias.shape != (F,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({F},)", dim="filters")
    pt, pb, pl, pr = _pad4(padding)
    Ho = output_extent(H, kh, stride, pt + pb)
    Wo = output_extent(W, kw, stride, pl + pr)
    if Ho < 1:
        raise ShapeError(f"conv2d: output height {Ho} < 1", dim="height")
    if Wo < 1:
        raise ShapeError(f"conv2d: output width {Wo} < 1", dim="width")

    xd = x.data
    if pt or pb or pl or pr:
        xd = _pad_channels_last(xd, pt, pb, pl, pr, 0)
    if kh == 1 and kw == 1:
        cols = xd[:, :, : stride * Ho : stride, : stride * Wo : stride].transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        # (kh, kw, C) ordering keeps channels innermost, matching channels-last memory
        cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(N * Ho * Wo, kh * kw * C)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(F, -1)
    out = cols @ wmat.T
    out += bias.data
    out = out.reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2)

    padded_shape = xd.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
        if weight.requires_grad:
            weight.accumulate((g2.T @ cols).reshape(F, kh, kw, C).transpose(0, 3, 1, 2))
        if bias.requires_grad:
            bias.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(N, Ho, Wo, kh, kw, C)
            dxp = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                        dcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
                    )
            x.accumulate(dxp[:, :, pt : pt + H, pl : pl + W])

    return make_result(out, (x, weight, bias), backward, "conv2d")


def macs_per_output_pixel(kh: int, kw: int, in_channels: int) -> int:
    """Multiplications needed for one output value of one filter."""
    if kh < 1 or kw < 1 or in_channels < 1:
        raise ValueError("kernel extents and channel count must be >= 1")
    return kh * kw * in_channels


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def maxpool2d(x, kh: int, kw: int, stride: int, padding=0) -> Tensor:
    """Windowed maximum; padded cells act as negative infinity.

    Gradient flows to the first maximal element of each window in
    row-major order.
    """
    x = as_tensor(x)
    _check_image(x, "maxpool2d")
    N, C, H, W = x.shape
    pt, pb, pl, pr = _pad4(padding)
    if max(pt, pb) >= kh or max(pl, pr) >= kw:
        raise ShapeError("maxpool2d: padding must be smaller than the window", dim="padding")
    Ho = output_extent(H, kh, stride, pt + pb)
    Wo = output_extent(W, kw, stride, pl + pr)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"maxpool2d: output extent {Ho}x{Wo} < 1", dim="height" if Ho < 1 else "width")

    xd = x.data
    if pt or pb or pl or pr:
        xd = _pad_channels_last(xd, pt, pb, pl, pr, -np.inf)
    # separable: max along width, then along height
    rows = xd[:, :, :, : stride * Wo : stride].copy()
    for j in range(1, kw):
        np.maximum(rows, xd[:, :, :, j : j + stride * Wo : stride], out=rows)
    out = rows[:, :, : stride * Ho : stride].copy()
    for i in range(1, kh):
        np.maximum(out, rows[:, :, i : i + stride * Ho : stride], out=out)

    padded_shape = xd.shape

    def backward(g):
        # route to the first maximal element in row-major window order
        dxp = np.zeros(padded_shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i in range(kh):
            for j in range(kw):
                hit = xd[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] == out
                hit &= ~taken
                taken |= hit
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += np.where(hit, g, 0)
        x.accumulate(dxp[:, :, pt : pt + H, pl : pl + W])

    return make_result(out, (x,), backward, "maxpool2d")


def same_padding(kernel: int) -> tuple:
    """(before, after) padding that keeps a stride-1 extent unchanged."""
    total = kernel - 1
    return (total // 2, total - total // 2)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def selu(x, c: SeluConstants = SELU_DEFAULT) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    neg = np.minimum(xd, 0)
    np.expm1(neg, out=neg)
    neg *= c.alpha                      # alpha * (exp(x) - 1) on the negative side, 0 elsewhere
    out = np.maximum(xd, 0)
    out += neg
    out *= c.lam

    def backward(g):
        # d/dx of lam*alpha*(e^x - 1) is lam*(neg + alpha)
        x.accumulate(g * np.where(xd > 0, c.lam, c.lam * (neg + c.alpha)))

    return make_result(out, (x,), backward, "selu")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        x.accumulate(g * pos)

    return make_result(out, (x,), backward, "relu")


ACTIVATIONS = {"selu": selu, "relu": relu}


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics mutated by train-mode batch normalization."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), **kw)


def batchnorm(x, gamma, beta, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization over every axis except axis 1."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim not in (2, 4):
        raise ShapeError(f"batchnorm: expected rank 2 or 4 input, got {x.shape}", dim="rank")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm: affine parameters must have shape ({C},)", dim="channels")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.data.ndim == 2 else (1, C, 1, 1)
    xd = x.data
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batchnorm: train mode needs a batch of at least 2", dim="batch")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = xd.size // C
        state.mean[:] = (1 - state.momentum) * state.mean + state.momentum * mean
        state.var[:] = (1 - state.momentum) * state.var + state.momentum * var * m / (m - 1)
    elif mode == "eval":
        mean, var = state.mean, state.var
    else:
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
    out = (gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)).astype(xd.dtype, copy=False)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data.reshape(bshape)
            if mode == "train":
                m = xd.size // C
                dx = (inv.reshape(bshape) / m) * (
                    m * gx
                    - gx.sum(axis=axes).reshape(bshape)
                    - xhat * (gx * xhat).sum(axis=axes).reshape(bshape)
                )
            else:
                dx = gx * inv.reshape(bshape)
            x.accumulate(dx)

    return make_result(out, (x, gamma, beta), backward, "batchnorm")


# --------------------------------------------------------------------------
# dense / structural
# --------------------------------------------------------------------------

def linear(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` with weight laid out as (in_features, out_features)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"linear: expected (N, D) input, got {x.shape}", dim="rank")
    D, K = weight.shape
    if x.shape[1] != D:
        raise ShapeError(f"linear: input has {x.shape[1]} features, weight expects {D}", dim="features")
    if bias.shape != (K,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({K},)", dim="outputs")
    out = x.data @ weight.data + bias.data

    def backward(g):
        if weight.requires_grad:
            weight.accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias.accumulate(g.sum(axis=0))
        if x.requires_grad:
            x.accumulate(g @ weight.data.T)

    return make_result(out, (x, weight, bias), backward, "linear")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ", dim="shape")
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return make_result(out, (a, b), backward, "add")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or any(
            s != r for k, (s, r) in enumerate(zip(t.shape, ref)) if k != axis
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} off axis {axis}", dim="shape")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])

    return make_result(out, tensors, backward, "concat")


def flatten(x) -> Tensor:
    """Collapse all but the batch axis, in (C, H, W) row-major order."""
    x = as_tensor(x)
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g):
        x.accumulate(g.reshape(shape))

    return make_result(out, (x,), backward, "flatten")


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (N, 2) logits, got {logits.shape}", dim="classes")
    N = logits.shape[0]
    if labels.shape != (N,):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {N} rows", dim="batch")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(N), labels]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(N), labels] -= 1
        logits.accumulate(p * (g / N))

    return make_result(loss, (logits,), backward, "softmax_cross_entropy")
