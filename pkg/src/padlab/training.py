"""Seeded training loops for backbones, probes and grid networks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import functional as F
from .metrics import mae, spearman
from .models import BatchNorm2d, GridNet, Module, PosProbe
from .optim import Sgd, SgdConfig
from .synth import GridSpec, Normalization, compose_canvas, seg_label_maps
from .tensor import Tape, Tensor, backward, no_tape

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    sgd: SgdConfig = field(default_factory=SgdConfig)
    # epochs (1-based, exclusive) after which the learning rate is multiplied by 0.1
    lr_steps: tuple[int, ...] = ()
    seed: int = 0
    # batches used to re-estimate batchnorm running statistics after training; 0 keeps the running averages
    bn_refresh: int = 0


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.sgd.learning_rate * 0.1 ** sum(epoch >= s for s in cfg.lr_steps)


def _fit(model: Module, n: int, cfg: TrainConfig, loss_fn: Callable[[np.ndarray], Tensor],
         on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    params = model.trainable()
    opt = Sgd(params, cfg.sgd)
    rng = np.random.default_rng(cfg.seed)
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        opt.set_lr(_lr_at(cfg, epoch))
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            with Tape() as tape:
                loss = loss_fn(idx)
            backward(loss, tape)
            opt.step()
            total += loss.item()
            batches += 1
        history.append(total / max(batches, 1))
        log.info("epoch %d loss %.4f", epoch + 1, history[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, history[-1])
    if cfg.bn_refresh > 0:
        refresh_batchnorm(model, n, cfg, loss_fn, rng)
    model.eval()
    return history


def refresh_batchnorm(model: Module, n: int, cfg: TrainConfig, loss_fn: Callable[[np.ndarray], Tensor],
                      rng: np.random.Generator) -> None:
    """Replace running statistics by the plain mean of ``cfg.bn_refresh`` batch statistics.

    Weights are fixed; only the forward pass of ``loss_fn`` is run.
    """
    states = [m.state for m in model.modules() if isinstance(m, BatchNorm2d)]
    if not states:
        return
    saved = [s.momentum for s in states]
    for s in states:
        s.mean = np.zeros_like(s.mean)
        s.var = np.zeros_like(s.var)
    model.train()
    with no_tape():
        for i in range(cfg.bn_refresh):
            for s in states:
                s.momentum = 1.0 / (i + 1)  # cumulative average
            loss_fn(rng.permutation(n)[:cfg.batch_size])
    for s, mom in zip(states, saved):
        s.momentum = mom


def train_classifier(model: Module, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                     on_epoch=None) -> list[float]:
    """Plain image classification (used to pre-train VGG-5 backbones)."""
    labels = np.asarray(labels)

    def loss_fn(idx):
        return F.softmax_cross_entropy(model(Tensor(images[idx])), labels[idx])

    return _fit(model, len(labels), cfg, loss_fn, on_epoch)


def train_gridnet(model: GridNet, patches: np.ndarray, labels: np.ndarray, spec: GridSpec, cfg: TrainConfig,
                  norm: Normalization | None = Normalization(), on_epoch=None) -> list[float]:
    """Location-dependent classification/segmentation: every sample lands on a fresh random cell."""
    labels = np.asarray(labels)
    loc_rng = np.random.default_rng((cfg.seed, 7))
    k2 = spec.k * spec.k

    def loss_fn(idx):
        locs = loc_rng.integers(1, k2 + 1, size=len(idx))
        imgs = Tensor(compose_canvas(patches[idx], locs, spec, norm))
        out = model(imgs)
        if model.task == "classify":
            return F.softmax_cross_entropy(out, labels[idx])
        return F.pixelwise_cross_entropy(out, seg_label_maps(labels[idx], locs, spec))

    return _fit(model, len(labels), cfg, loss_fn, on_epoch)


ProbeFeatures = list  # one (n, c_t, h_t, w_t) array per tapped stage


def probe_features(probe: PosProbe, images: np.ndarray, batch_size: int = 64) -> ProbeFeatures:
    """Frozen native-resolution tap features for a whole image set."""
    chunks = [probe.features(images[s:s + batch_size]) for s in range(0, len(images), batch_size)]
    return [np.concatenate([c[t] for c in chunks]) for t in range(len(probe.taps))]


def _take(feats: ProbeFeatures, idx) -> ProbeFeatures:
    return [f[idx] for f in feats]


def predict_maps(probe: PosProbe, feats: ProbeFeatures, batch_size: int = 256) -> np.ndarray:
    n = len(feats[0])
    with no_tape():
        return np.concatenate([probe.readout_forward(_take(feats, slice(s, s + batch_size))).data
                               for s in range(0, n, batch_size)])


def evaluate_probe(probe: PosProbe, feats: ProbeFeatures, target: np.ndarray) -> tuple[float, float]:
    """Mean per-image SPC and MAE of predicted maps against one shared target map."""
    maps = predict_maps(probe, feats)
    spc = float(np.mean([spearman(m, target) for m in maps]))
    err = float(np.mean([mae(m, target) for m in maps]))
    return spc, err


def train_probe(probe: PosProbe, train_feats: ProbeFeatures, target: np.ndarray, cfg: TrainConfig,
                on_epoch=None) -> list[float]:
    """Regress the target map from frozen features with a pixel-wise squared error."""
    t = np.asarray(target, dtype=np.float64).reshape(1, 1, *np.shape(target)[-2:])

    def loss_fn(idx):
        pred = probe.readout_forward(_take(train_feats, idx))
        return F.mse_loss(pred, np.broadcast_to(t, pred.shape))

    return _fit(probe, len(train_feats[0]), cfg, loss_fn, on_epoch)
