"""Position-map and grid-task metrics, plus per-location and ring aggregations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError
from .synth import GridSpec, Normalization, compose_canvas, seg_label_maps
from .tensor import Tensor, no_tape


def _flat(a) -> np.ndarray:
    return np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of the ranks they span."""
    x = np.asarray(x).reshape(-1)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; 0 when either side has no variance."""
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt((da * da).sum())
    sb = np.sqrt((db * db).sum())
    if sa == 0 or sb == 0:
        return 0.0
    return float(np.clip((da * db).sum() / (sa * sb), -1.0, 1.0))


def spearman(pred, gt) -> float:
    """Spearman rank correlation between two maps (average ranks for ties)."""
    p, g = _flat(pred), _flat(gt)
    if p.shape != g.shape:
        raise DimensionError(f"size mismatch: {p.size} vs {g.size}")
    if p.size < 2:
        raise DimensionError("spearman needs at least 2 values")
    return pearson(average_ranks(p), average_ranks(g))


def mae(pred, gt) -> float:
    p, g = _flat(pred), _flat(gt)
    if p.shape != g.shape:
        raise DimensionError(f"size mismatch: {p.size} vs {g.size}")
    return float(np.abs(p - g).mean())


def accuracy(logits, labels) -> float:
    """Argmax match rate; logits are (n, C, ...) with class on axis 1."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    z = z.reshape(z.shape[0], z.shape[1])
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        return float("nan")
    return float((z.argmax(axis=1) == labels).mean())


def iou_counts(pred, gt, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class intersection and union pixel counts."""
    p = np.asarray(pred).reshape(-1).astype(np.int64)
    g = np.asarray(gt).reshape(-1).astype(np.int64)
    if p.shape != g.shape:
        raise DimensionError(f"size mismatch: {p.size} vs {g.size}")
    for arr in (p, g):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"label out of range [0, {num_classes})")
    inter = np.bincount(g[p == g], minlength=num_classes)
    area_p = np.bincount(p, minlength=num_classes)
    area_g = np.bincount(g, minlength=num_classes)
    return inter, area_p + area_g - inter


def miou_from_counts(inter: np.ndarray, union: np.ndarray) -> float:
    present = union > 0
    if not present.any():
        return float("nan")
    return float((inter[present] / union[present]).mean())


def miou(pred, gt, num_classes: int) -> float:
    """Mean IoU over classes present in pred or gt (background included)."""
    return miou_from_counts(*iou_counts(pred, gt, num_classes))


# -- per-location tables -----------------------------------------------------------

@dataclass
class LocationTable:
    k: int
    values: np.ndarray  # length k*k, index L-1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.k * self.k,):
            raise DimensionError(f"location table needs {self.k * self.k} values")

    @property
    def overall(self) -> float:
        return float(self.values.mean())

    def grid(self) -> np.ndarray:
        return self.values.reshape(self.k, self.k)

    def __getitem__(self, L: int) -> float:
        return float(self.values[L - 1])


@dataclass
class RingReport:
    distances: np.ndarray
    means: np.ndarray
    counts: np.ndarray

    def weighted_mean(self) -> float:
        return float((self.means * self.counts).sum() / self.counts.sum())


def cell_distance(L: int, k: int) -> int:
    r, c = divmod(L - 1, k)
    return min(r, c, k - 1 - r, k - 1 - c)


def distance_rings(table: LocationTable) -> RingReport:
    k = table.k
    d = np.array([cell_distance(L, k) for L in range(1, k * k + 1)])
    dists = np.arange((k - 1) // 2 + 1)
    counts = np.array([(d == i).sum() for i in dists])
    means = np.array([table.values[d == i].mean() for i in dists])
    return RingReport(dists, means, counts)


def _as_predict(model) -> Callable[[np.ndarray], np.ndarray]:
    if not hasattr(model, "eval"):
        return model

    def predict(images: np.ndarray) -> np.ndarray:
        was = model.training
        model.eval()
        try:
            with no_tape():
                return model(Tensor(images)).data
        finally:
            model.train(was)

    return predict


def per_location_eval(model, patches: np.ndarray, labels: np.ndarray, spec: GridSpec,
                      metric: str = "accuracy", batch_size: int = 64,
                      norm: Normalization | None = Normalization(),
                      num_classes: int | None = None) -> LocationTable:
    """Run the whole validation set at every grid location.

    ``model`` is a module or a callable mapping (n, 3, kp, kp) images to
    logits.  ``metric`` is ``accuracy`` (logits (n, C, 1, 1)) or ``miou``
    (per-pixel logits, background = 0); mIoU pools the intersection and
    union counts of all samples at a location.
    """
    predict = _as_predict(model)
    labels = np.asarray(labels)
    values = np.zeros(spec.k * spec.k)
    for L in range(1, spec.k * spec.k + 1):
        correct = 0
        inter = union = None
        for s in range(0, len(labels), batch_size):
            pb, yb = patches[s:s + batch_size], labels[s:s + batch_size]
            imgs = compose_canvas(pb, [L] * len(yb), spec, norm)
            logits = np.asarray(predict(imgs))
            if metric == "accuracy":
                correct += int((logits.reshape(len(yb), -1).argmax(axis=1) == yb).sum())
            elif metric == "miou":
                c = num_classes or logits.shape[1]
                pred = logits.argmax(axis=1)
                gt = seg_label_maps(yb, [L] * len(yb), spec)[:, 0]
                i, u = iou_counts(pred, gt, c)
                inter = i if inter is None else inter + i
                union = u if union is None else union + u
            else:
                raise ValueError(f"unknown metric {metric!r}")
        values[L - 1] = correct / len(labels) if metric == "accuracy" else miou_from_counts(inter, union)
    return LocationTable(spec.k, values)


# -- ring regions ------------------------------------------------------------------------

def border_distance_map(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.minimum(np.minimum(yy, xx), np.minimum(h - 1 - yy, w - 1 - xx))


def band_mask(h: int, w: int, lo: float, hi: float) -> np.ndarray:
    """Pixels whose relative border distance r lies in (lo%, hi%]; a band starting at 0 also takes r = 0.

    r = distance to the nearest border / (min(h, w) / 2), so 100% is the centre.
    Comparisons are done on ``200 * d`` vs ``pct * min(h, w)`` to stay exact.
    """
    if not 0 <= lo <= hi <= 100:
        raise ValueError(f"band ({lo}, {hi}] outside [0, 100]")
    d = border_distance_map(h, w)
    m = min(h, w)
    scaled = 200.0 * d
    upper = scaled <= hi * m
    lower = scaled > lo * m if lo > 0 else np.ones_like(upper)
    return upper & lower


def ring_region_miou(pred, gt, num_classes: int, bands: Sequence[tuple[float, float]]) -> list[float | None]:
    """mIoU restricted to each band of relative border distance; None for an empty band.

    ``pred``/``gt`` are label maps of shape (h, w) or (n, h, w); counts are
    pooled over the batch.
    """
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise DimensionError(f"shape mismatch {p.shape} vs {g.shape}")
    if p.ndim == 2:
        p, g = p[None], g[None]
    h, w = p.shape[-2:]
    out: list[float | None] = []
    for lo, hi in bands:
        mask = band_mask(h, w, lo, hi)
        if not mask.any():
            out.append(None)
            continue
        out.append(miou(p[:, mask], g[:, mask], num_classes))
    return out
