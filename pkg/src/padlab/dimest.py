"""Estimating how many latent dimensions encode location, class and everything else.

Pairs of grid images that share exactly one factor are encoded; the summed
per-dimension correlation between the two sides scores the factor, and a
floored softmax over the scores splits the latent width between factors.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .synth import GridSpec, Normalization, compose_canvas

DEFAULT_CANVASES = ("black", "white", "mean")


class Factor(str, enum.Enum):
    LOCATION = "location"
    CLASS = "class"
    RESIDUAL = "residual"


@dataclass
class PairBatch:
    factor: Factor
    a: np.ndarray  # (n, 3, kp, kp)
    b: np.ndarray
    labels: np.ndarray  # (n, 2)
    locations: np.ndarray  # (n, 2)
    canvases: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


def _pick_other(rng: np.random.Generator, n_options: int, current: int) -> int:
    j = int(rng.integers(n_options - 1))
    return j if j < current else j + 1


def sample_pairs(factor: str | Factor, patches: np.ndarray, labels: np.ndarray, spec: GridSpec, n: int,
                 seed: int, canvases: Sequence[str] = DEFAULT_CANVASES,
                 norm: Normalization | None = Normalization()) -> PairBatch:
    """Draw ``n`` image pairs sharing exactly the named factor.

    Location pairs share L but differ in class and canvas; class pairs share
    the class but differ in L and canvas; residual pairs are independent draws.
    """
    factor = Factor(factor)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    k2 = spec.k * spec.k
    if factor is not Factor.RESIDUAL and len(canvases) < 2:
        raise ValueError("pairs need at least two canvas colours")
    if factor is Factor.LOCATION and len(classes) < 2:
        raise ValueError("location pairs need at least two classes")
    if factor is Factor.CLASS and k2 < 2:
        raise ValueError("class pairs need at least two grid locations")
    rng = np.random.default_rng(seed)
    by_class = {int(c): np.flatnonzero(labels == c) for c in classes}

    idx = np.zeros((n, 2), dtype=np.int64)
    locs = np.zeros((n, 2), dtype=np.int64)
    cv = np.zeros((n, 2), dtype=np.int64)
    for i in range(n):
        ia = int(rng.integers(len(labels)))
        la = int(rng.integers(1, k2 + 1))
        ca = int(rng.integers(len(canvases)))
        if factor is Factor.LOCATION:
            ci = int(np.searchsorted(classes, labels[ia]))
            other = int(classes[_pick_other(rng, len(classes), ci)])
            ib = int(rng.choice(by_class[other]))
            lb = la
            cb = _pick_other(rng, len(canvases), ca)
        elif factor is Factor.CLASS:
            ib = int(rng.choice(by_class[int(labels[ia])]))
            lb = _pick_other(rng, k2, la - 1) + 1
            cb = _pick_other(rng, len(canvases), ca)
        else:
            ib = int(rng.integers(len(labels)))
            lb = int(rng.integers(1, k2 + 1))
            cb = int(rng.integers(len(canvases)))
        idx[i] = ia, ib
        locs[i] = la, lb
        cv[i] = ca, cb

    def render(side: int) -> np.ndarray:
        out = np.empty((n, 3, spec.size, spec.size))
        for ci, name in enumerate(canvases):
            sel = np.flatnonzero(cv[:, side] == ci)
            if sel.size:
                sub = GridSpec(spec.k, spec.patch, name)
                out[sel] = compose_canvas(patches[idx[sel, side]], locs[sel, side], sub, norm)
        return out

    return PairBatch(factor, render(0), render(1), labels[idx], locs,
                     [(canvases[x], canvases[y]) for x, y in cv])


def dimension_correlations(za: np.ndarray, zb: np.ndarray) -> np.ndarray:
    """Per-dimension Pearson correlation between paired latents; 0 where either side is constant."""
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if za.shape != zb.shape or za.ndim != 2:
        raise ValueError(f"paired latents must be equal (n, N) arrays, got {za.shape} and {zb.shape}")
    if za.shape[0] < 2:
        raise ValueError("correlation needs at least 2 pairs")
    da = za - za.mean(axis=0)
    db = zb - zb.mean(axis=0)
    cov = (da * db).mean(axis=0)
    var = (da * da).mean(axis=0) * (db * db).mean(axis=0)
    out = np.zeros(za.shape[1])
    ok = var > 0
    out[ok] = cov[ok] / np.sqrt(var[ok])
    return out


Encoder = Callable[[np.ndarray], np.ndarray]


def encode(encoder: Encoder, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return np.concatenate([np.asarray(encoder(images[s:s + batch_size]))
                           for s in range(0, len(images), batch_size)])


def factor_correlation(encoder: Encoder, batch: PairBatch, batch_size: int = 64) -> float:
    """Sum over latent dimensions of the correlation between the two sides of each pair."""
    if len(batch) < 2:
        raise ValueError("factor correlation needs at least 2 pairs")
    za = encode(encoder, batch.a, batch_size)
    zb = encode(encoder, batch.b, batch_size)
    return float(dimension_correlations(za, zb).sum())


def allocate_dims(scores: Sequence[float], n_dims: int) -> np.ndarray:
    """Floored softmax share of ``n_dims`` per factor score."""
    if n_dims < 1:
        raise ValueError("latent dimension must be >= 1")
    c = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ValueError("scores must be finite")
    e = np.exp(c - c.max())
    return np.floor(e / e.sum() * n_dims).astype(np.int64)


@dataclass
class FactorReport:
    scores: dict[str, float]
    alloc: dict[str, int]
    n_dims: int

    def percent(self, factor: str) -> float:
        return 100.0 * self.alloc[factor] / self.n_dims

    CSV_HEADER = ("run_id", "padding", "canvas", "task", "C_loc", "C_class", "C_res", "pct_loc", "pct_class")

    def csv_row(self, run_id: str, padding: str, canvas: str, task: str) -> list[str]:
        return [run_id, padding, canvas, task,
                f"{self.scores['location']:.6f}", f"{self.scores['class']:.6f}", f"{self.scores['residual']:.6f}",
                f"{self.percent('location'):.4f}", f"{self.percent('class'):.4f}"]


def estimate_dimensions(encoder: Encoder, batches: Mapping[str, PairBatch], n_dims: int) -> FactorReport:
    names = [Factor(f).value for f in batches]
    scores = {name: factor_correlation(encoder, batches[f]) for name, f in zip(names, batches)}
    alloc = allocate_dims([scores[nm] for nm in names], n_dims)
    return FactorReport(scores, dict(zip(names, (int(a) for a in alloc))), n_dims)
