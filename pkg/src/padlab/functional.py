"""Differentiable operations on :class:`~padlab.tensor.Tensor`.

Every op computes its forward value with numpy and, if a tape is active and
an input requires a gradient, records a closure computing the input
gradients from the output gradient.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import border
from .border import PadKind, PaddingMode
from .errors import DimensionError, GeometryError
from .tensor import Tensor, maybe_record

__all__ = [
    "conv2d", "relu", "sigmoid", "maxpool2d", "batchnorm2d", "BatchNormState", "linear",
    "global_avg_pool", "bilinear_resize", "interp_matrix", "softmax_cross_entropy",
    "pixelwise_cross_entropy", "mse_loss", "add", "concat", "sum", "mul", "flatten",
]


def _check4(x: Tensor, name: str = "input") -> None:
    if x.data.ndim != 4:
        raise DimensionError(f"{name} must be (n, c, h, w), got shape {x.shape}")


# -- convolution -----------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           mode: PaddingMode = border.NO_PAD, stride: int = 1) -> Tensor:
    """2-D cross-correlation with pluggable border handling.

    Output size per axis is ``(h + 2*pad - k) // stride + 1``.  In partial
    mode the weighted sum (without bias) is multiplied by the border
    module's scale mask before the bias is added.
    """
    _check4(x)
    if weight.data.ndim != 4:
        raise DimensionError(f"weight must be (c_out, c_in, kh, kw), got {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise DimensionError(f"input has {c} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} != ({c_out},)")
    if stride < 1:
        raise GeometryError("stride must be positive")
    a = mode.pad
    if h + 2 * a < kh or w + 2 * a < kw:
        raise GeometryError(f"kernel {kh}x{kw} larger than padded input {h + 2 * a}x{w + 2 * a}")

    xp = border.pad_array(x.data, mode)
    oh = (h + 2 * a - kh) // stride + 1
    ow = (w + 2 * a - kw) // stride + 1
    # im2col as (c*kh*kw, n*oh*ow) so the whole layer is one GEMM
    cols = np.empty((c, kh, kw, n, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * (oh - 1) + 1:stride,
                               j:j + stride * (ow - 1) + 1:stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(c * kh * kw, n * oh * ow)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, n, oh, ow).transpose(1, 0, 2, 3)
    scale = None
    if mode.kind is PadKind.PARTIAL and a > 0:
        scale = border.partial_scale_mask(h, w, kh, kw, a, stride).data
        out = out * scale
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = Tensor(out)

    def backward_fn(g):
        gs = g * scale if scale is not None else g
        gmat = gs.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gmat @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, oh, ow)
            gxp = np.zeros((n, c) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (oh - 1) + 1:stride,
                        j:j + stride * (ow - 1) + 1:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = border.pad_adjoint(gxp, h, w, mode)
        return gx, gw, gb

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return maybe_record(inputs, out, backward_fn, "conv2d")


# -- pointwise ---------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))
    return maybe_record([x], out, lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    out = Tensor(y)
    return maybe_record([x], out, lambda g: (g * y * (1.0 - y),), "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)
    return maybe_record([a, b], out, lambda g: (g, g), "add")


def mul(x: Tensor, c) -> Tensor:
    """Multiply by a constant (scalar or array broadcastable to ``x``)."""
    c = np.asarray(c, dtype=np.float64)
    out = Tensor(x.data * c)
    return maybe_record([x], out, lambda g: (g * c,), "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    out = Tensor(np.array(x.data.sum()))
    shape = x.shape
    return maybe_record([x], out, lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def concat(xs: list[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise DimensionError("concat of an empty list")
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return maybe_record(xs, out, backward_fn, "concat")


def flatten(x: Tensor) -> Tensor:
    """(n, c, 1, 1) or (n, ...) -> (n, d)."""
    shape = x.shape
    out = Tensor(x.data.reshape(shape[0], -1))
    return maybe_record([x], out, lambda g: (g.reshape(shape),), "flatten")


# -- pooling / normalisation -------------------------------------------------

def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first element in scan order."""
    _check4(x)
    n, c, h, w = x.shape
    if h % window or w % window:
        raise GeometryError(f"maxpool{window} needs spatial dims divisible by {window}, got {h}x{w}")
    oh, ow = h // window, w // window
    blocks = x.data.reshape(n, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, -1)
    arg = blocks.argmax(axis=-1)
    out = Tensor(np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0])

    def backward_fn(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return maybe_record([x], out, backward_fn, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    _check4(x)
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))
    return maybe_record([x], out, lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),), "gap")


class BatchNormState:
    """Running mean / variance buffers of a batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalisation over (n, h, w) per channel.

    Training mode normalises with the (biased) batch variance and blends the
    unbiased batch variance into the running estimate, as common frameworks do.
    """
    _check4(x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or state.mean.shape != (c,):
        raise DimensionError(f"batchnorm parameters do not match {c} channels")
    m = n * h * w
    if m == 0:
        raise ValueError("batchnorm on an empty batch")
    g4 = gamma.data[None, :, None, None]
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        unbiased = var * m / (m - 1) if m > 1 else var
        state.mean = (1 - state.momentum) * state.mean + state.momentum * mean
        state.var = (1 - state.momentum) * state.var + state.momentum * unbiased
    else:
        mean, var = state.mean, state.var
        xc = x.data - mean[None, :, None, None]
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv[None, :, None, None]
    out = Tensor(xhat * g4 + beta.data[None, :, None, None])

    def backward_fn(gy):
        ggamma = (gy * xhat).sum(axis=(0, 2, 3))
        gbeta = gy.sum(axis=(0, 2, 3))
        gxhat = gy * g4
        if training:
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return maybe_record([x, gamma, beta], out, backward_fn, "batchnorm2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = W x + b for x of shape (n, d, 1, 1) or (n, d); returns (n, k, 1, 1)."""
    xs = x.data.reshape(x.shape[0], -1)
    k, d = weight.shape
    if xs.shape[1] != d:
        raise DimensionError(f"linear expects inner dim {d}, got {xs.shape[1]}")
    y = xs @ weight.data.T
    if bias is not None:
        if bias.shape != (k,):
            raise DimensionError(f"bias shape {bias.shape} != ({k},)")
        y = y + bias.data
    out = Tensor(y.reshape(x.shape[0], k, 1, 1))

    def backward_fn(g):
        g2 = g.reshape(x.shape[0], k)
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ xs
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return maybe_record(inputs, out, backward_fn, "linear")


# -- resampling ----------------------------------------------------------------

@lru_cache(maxsize=512)
def interp_matrix(n_in: int, n_out: int, align_corners: bool = False) -> np.ndarray:
    """(n_out, n_in) linear-interpolation matrix along one axis.

    Centre alignment samples ``s = (t + 0.5) * n_in / n_out - 0.5`` clamped
    to ``[0, n_in - 1]``; corner alignment maps the end samples onto each
    other, ``s = t * (n_in - 1) / (n_out - 1)``.
    """
    t = np.arange(n_out, dtype=np.float64)
    if align_corners:
        s = t * (n_in - 1) / (n_out - 1) if n_out > 1 else np.zeros(1)
    else:
        s = (t + 0.5) * n_in / n_out - 0.5
    s = np.clip(s, 0.0, n_in - 1)
    i0 = np.floor(s).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = s - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    m.setflags(write=False)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    _check4(x)
    if out_h < 1 or out_w < 1:
        raise GeometryError("resize target must be positive")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        out = Tensor(x.data.copy())
        return maybe_record([x], out, lambda g: (g,), "resize")
    rh = interp_matrix(h, out_h, align_corners)
    rw = interp_matrix(w, out_w, align_corners)
    out = Tensor(np.matmul(np.matmul(rh, x.data), rw.T))
    return maybe_record([x], out, lambda g: (np.matmul(np.matmul(rh.T, g), rw),), "resize")


# -- losses ----------------------------------------------------------------------

def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
    return labels


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    z = logits.data.reshape(logits.shape[0], -1)
    n, classes = z.shape
    labels = _check_labels(labels, classes).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {n}")
    logp = _log_softmax(z, axis=1)
    out = Tensor(np.array(-logp[np.arange(n), labels].mean()))

    def backward_fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((g / n) * p).reshape(logits.shape),

    return maybe_record([logits], out, backward_fn, "softmax_ce")


def pixelwise_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over all pixels of the per-pixel cross entropy; labels are (n, 1, h, w)."""
    _check4(logits, "logits")
    n, classes, h, w = logits.shape
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    lab = _check_labels(lab, classes)
    if lab.shape != (n, 1, h, w):
        raise DimensionError(f"labels shape {lab.shape} != {(n, 1, h, w)}")
    logp = _log_softmax(logits.data, axis=1)
    picked = np.take_along_axis(logp, lab, axis=1)
    count = n * h * w
    out = Tensor(np.array(-picked.sum() / count))

    def backward_fn(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, lab, 1.0, axis=1)
        return ((g / count) * (p - onehot),)

    return maybe_record([logits], out, backward_fn, "pixel_ce")


def mse_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Mean squared error; ``target`` broadcasts against ``pred``."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    diff = pred.data - t
    if diff.shape != pred.shape:
        raise DimensionError(f"target shape {t.shape} does not broadcast to {pred.shape}")
    out = Tensor(np.array((diff * diff).mean()))
    return maybe_record([pred], out, lambda g: (g * 2.0 * diff / diff.size,), "mse")
