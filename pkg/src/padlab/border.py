"""Border handling: padding strategies, partial-convolution rescaling and reach maps."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import GeometryError
from .tensor import Tensor, maybe_record


class PadKind(str, enum.Enum):
    ZERO = "zero"
    REFLECT = "reflect"
    REPLICATE = "replicate"
    CIRCULAR = "circular"
    PARTIAL = "partial"
    NONE = "none"


_NP_MODE = {
    PadKind.ZERO: "constant",
    PadKind.PARTIAL: "constant",
    PadKind.REFLECT: "reflect",
    PadKind.REPLICATE: "edge",
    PadKind.CIRCULAR: "wrap",
}


@dataclass(frozen=True)
class PaddingMode:
    kind: PadKind = PadKind.ZERO
    amount: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", PadKind(self.kind))
        if self.amount < 0:
            raise GeometryError(f"pad amount must be >= 0, got {self.amount}")
        if self.kind is PadKind.NONE and self.amount != 0:
            raise GeometryError("padding kind 'none' implies amount 0")

    @classmethod
    def parse(cls, kind: str, amount: int | None = None) -> "PaddingMode":
        """Build from the config spelling, e.g. ``parse("reflect", 1)``."""
        kind = PadKind(kind.strip().lower())
        if kind is PadKind.NONE:
            return cls(kind, 0)
        return cls(kind, 1 if amount is None else int(amount))

    @property
    def pad(self) -> int:
        return 0 if self.kind is PadKind.NONE else self.amount

    def with_amount(self, amount: int) -> "PaddingMode":
        if amount == 0:
            return NO_PAD
        return PaddingMode(self.kind if self.kind is not PadKind.NONE else PadKind.ZERO, amount)

    def __str__(self) -> str:
        return self.kind.value if self.kind is PadKind.NONE else f"{self.kind.value}:{self.amount}"


NO_PAD = PaddingMode(PadKind.NONE, 0)
ZERO_PAD = PaddingMode(PadKind.ZERO, 1)


def _check(h: int, w: int, mode: PaddingMode) -> None:
    if mode.kind is PadKind.REFLECT and (mode.amount >= h or mode.amount >= w):
        raise GeometryError(f"reflect padding {mode.amount} needs spatial extent > amount, got {h}x{w}")
    if mode.kind is PadKind.CIRCULAR and (mode.amount > h or mode.amount > w):
        raise GeometryError(f"circular padding {mode.amount} exceeds spatial extent {h}x{w}")


def pad_array(x: np.ndarray, mode: PaddingMode) -> np.ndarray:
    """Pad the last two axes of ``x``."""
    a = mode.pad
    if a == 0:
        return x
    h, w = x.shape[-2:]
    _check(h, w, mode)
    widths = [(0, 0)] * (x.ndim - 2) + [(a, a), (a, a)]
    return np.pad(x, widths, mode=_NP_MODE[mode.kind])


def pad_rows(r: np.ndarray, mode: PaddingMode) -> np.ndarray:
    """Apply the 1-D padding of ``mode`` along axis 0 (e.g. to a linear operator's rows)."""
    a = mode.pad
    if a == 0:
        return r
    return np.pad(r, ((a, a),) + ((0, 0),) * (r.ndim - 1), mode=_NP_MODE[mode.kind])


@lru_cache(maxsize=256)
def _source_index(h: int, w: int, kind: PadKind, a: int) -> tuple[np.ndarray, np.ndarray]:
    # flat source pixel for each padded cell, -1 where the value is a constant zero
    idx = np.arange(h * w).reshape(h, w)
    if _NP_MODE[kind] == "constant":
        src = np.pad(idx, a, mode="constant", constant_values=-1)
    else:
        src = np.pad(idx, a, mode=_NP_MODE[kind])
    flat = src.reshape(-1)
    valid = flat >= 0
    return flat[valid], np.flatnonzero(valid)


def pad_adjoint(g: np.ndarray, h: int, w: int, mode: PaddingMode) -> np.ndarray:
    """Gradient of :func:`pad_array`: fold padded-cell gradients back onto their sources."""
    a = mode.pad
    if a == 0:
        return g
    if _NP_MODE[mode.kind] == "constant":
        return g[..., a:a + h, a:a + w]
    src, cells = _source_index(h, w, mode.kind, a)
    lead = g.shape[:-2]
    gf = g.reshape(-1, g.shape[-2] * g.shape[-1])[:, cells]
    out = np.zeros((gf.shape[0], h * w), dtype=g.dtype)
    # bincount per row would loop in python; one scatter over a flattened offset index instead
    rows = np.arange(gf.shape[0])[:, None] * (h * w)
    np.add.at(out.reshape(-1), (rows + src[None, :]).reshape(-1), gf.reshape(-1))
    return out.reshape(*lead, h, w)


def pad(x: Tensor, mode: PaddingMode) -> Tensor:
    """Differentiable padding of an (n, c, h, w) tensor."""
    h, w = x.shape[-2:]
    out = Tensor(pad_array(x.data, mode))
    return maybe_record([x], out, lambda g: (pad_adjoint(g, h, w, mode),), "pad")


def conv_output_size(size: int, kernel: int, amount: int, stride: int) -> int:
    padded = size + 2 * amount
    if padded < kernel:
        raise GeometryError(f"kernel {kernel} larger than padded input {padded}")
    return (padded - kernel) // stride + 1


@lru_cache(maxsize=256)
def _partial_mask(h: int, w: int, kh: int, kw: int, amount: int, stride: int) -> np.ndarray:
    oh = conv_output_size(h, kh, amount, stride)
    ow = conv_output_size(w, kw, amount, stride)
    # valid taps factor per axis: count of in-image rows under each window
    rows = np.array([sum(0 <= i * stride - amount + t < h for t in range(kh)) for i in range(oh)], dtype=float)
    cols = np.array([sum(0 <= j * stride - amount + t < w for t in range(kw)) for j in range(ow)], dtype=float)
    valid = rows[:, None] * cols[None, :]
    mask = (kh * kw) / valid
    mask.setflags(write=False)
    return mask


def partial_scale_mask(h: int, w: int, kh: int, kw: int, amount: int, stride: int = 1) -> Tensor:
    """Per-output rescaling factor ``window area / in-image taps`` of a partial convolution.

    Windows that lie entirely in the padding have no valid taps and are
    rejected as invalid geometry.
    """
    if amount >= kh or amount >= kw:
        raise GeometryError(f"partial conv with pad {amount} >= kernel size leaves windows with no valid taps")
    return Tensor(_partial_mask(h, w, kh, kw, amount, stride)[None, None].copy())


def _layer_sources(size_h: int, size_w: int, kh: int, amount: int) -> np.ndarray:
    """Boolean (h+2a, w+2a) map of padded cells."""
    m = np.ones((size_h + 2 * amount, size_w + 2 * amount), dtype=bool)
    m[amount:amount + size_h, amount:amount + size_w] = False
    return m


def positional_reach(layers: Sequence[tuple[int, int, int]], h: int, w: int) -> Tensor:
    """Count, for each position, how many padded cells can influence the final unit there.

    ``layers`` lists ``(kernel, stride, pad_amount)`` for a stack of square
    convolutions.  Each padded cell in every layer is a distinct source; its
    influence is carried forward through the windows of later layers.  Every
    final-layer unit deposits its source count at the input pixel under the
    centre of its receptive field, so the map has the input's shape and, for
    stride-1 stacks, is exactly the per-unit count.
    """
    reach = np.zeros((h, w), dtype=np.int64)
    if not layers:
        return Tensor(reach[None, None])

    # influence[s, y, x]: source s reaches unit (y, x); sources are appended layer by layer
    influence = np.zeros((0, h, w), dtype=bool)
    cur_h, cur_w = h, w
    rf, jump, start = 1, 1, 0.0
    for kernel, stride, amount in layers:
        oh = conv_output_size(cur_h, kernel, amount, stride)
        ow = conv_output_size(cur_w, kernel, amount, stride)
        n_old = influence.shape[0]
        padded_src = _layer_sources(cur_h, cur_w, kernel, amount)
        n_new = int(padded_src.sum())
        full = np.zeros((n_old + n_new, cur_h + 2 * amount, cur_w + 2 * amount), dtype=bool)
        full[:n_old, amount:amount + cur_h, amount:amount + cur_w] = influence
        ys, xs = np.nonzero(padded_src)
        full[n_old + np.arange(n_new), ys, xs] = True
        nxt = np.zeros((n_old + n_new, oh, ow), dtype=bool)
        for dy in range(kernel):
            for dx in range(kernel):
                nxt |= full[:, dy:dy + stride * (oh - 1) + 1:stride, dx:dx + stride * (ow - 1) + 1:stride]
        influence = nxt
        start = start + ((kernel - 1) / 2 - amount) * jump
        rf += (kernel - 1) * jump
        jump *= stride
        cur_h, cur_w = oh, ow

    counts = influence.sum(axis=0)
    for i in range(cur_h):
        cy = int(np.floor(start + i * jump))
        if not 0 <= cy < h:
            continue
        for j in range(cur_w):
            cx = int(np.floor(start + j * jump))
            if 0 <= cx < w:
                reach[cy, cx] += counts[i, j]
    return Tensor(reach[None, None])
