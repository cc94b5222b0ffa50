"""Experiment runners: each turns a RunConfig into CSV tables, PGM heatmaps and a checkpoint.

Every output byte depends only on the config (seed included).  Wall-clock
information goes to ``run.log`` and nowhere else.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from . import functional as F
from .border import PaddingMode, positional_reach
from .config import RunConfig, echo_config
from .dimest import Factor, PairBatch, estimate_dimensions, sample_pairs
from .errors import DatasetError
from .metrics import (band_mask, cell_distance, distance_rings, iou_counts, miou_from_counts,
                      per_location_eval)
from .models import (GridNet, IdentityBackbone, Module, RfLimit, Vgg5, build_gridnet, build_probe,
                     build_vgg5, latent_of)
from .optim import SgdConfig
from .synth import (GridSpec, Normalization, compose_canvas, gen_position_target, gen_synthetic_patchset,
                    load_cifar10_arrays, seg_label_maps, write_pgm)
from .tensor import Tensor, no_tape
from .training import (TrainConfig, evaluate_probe, predict_maps, probe_features, train_classifier,
                       train_gridnet, train_probe)

log = logging.getLogger(__name__)

DATA_ENV = "PADLAB_DATA"
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
SYNTHETIC_FLAG = "--synthetic"
NORM = Normalization()

# synthetic-data seed offsets per split, so splits never share samples
_SPLIT_IDS = {"train": 1, "probe-train": 2, "val": 3}


# -- output ----------------------------------------------------------------------------

class RunWriter:
    """Owns one run directory: config echo, CSV tables, heatmaps, checkpoints and the log."""

    def __init__(self, out_dir: str | Path, cfg: RunConfig):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.ini").write_text(echo_config(cfg))
        self._handler = logging.FileHandler(self.dir / "run.log", mode="w")
        self._handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        root = logging.getLogger("padlab")
        root.addHandler(self._handler)
        if root.level == logging.NOTSET or root.level > logging.INFO:
            root.setLevel(logging.INFO)

    def csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
        path = self.dir / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows([[_cell(v) for v in row] for row in rows])
        return path

    def pgm(self, name: str, values: np.ndarray, lo: float | None = None, hi: float | None = None) -> Path:
        path = self.dir / name
        write_pgm(path, values, lo, hi)
        return path

    def checkpoint(self, name: str, model: Module, prefix: str = "") -> Path:
        path = self.dir / name
        checkpoint.save(path, {prefix + k: v for k, v in model.state_dict().items()})
        return path

    def close(self) -> None:
        logging.getLogger("padlab").removeHandler(self._handler)
        self._handler.close()


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else f"{float(v):.6f}"
    return str(v)


# -- data ------------------------------------------------------------------------------

def _cifar_dir(root: Path) -> Path | None:
    for cand in (root, root / "cifar-10-batches-bin"):
        if all((cand / f).is_file() for f in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES):
            return cand
    return None


def resize_images(images: np.ndarray, size: int) -> np.ndarray:
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    with no_tape():
        return F.bilinear_resize(Tensor(images), size, size).data


def load_patches(cfg: RunConfig, split: str, size: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """(n, 3, size, size) images in [0, 1] and labels for one split.

    Splits: ``train`` (backbone / grid training), ``probe-train`` (probe
    readout training) and ``val`` (all evaluation).  With
    ``[data] synthetic = true`` the generated patch set is used; otherwise
    the CIFAR-10 binaries under ``$PADLAB_DATA``.
    """
    d = cfg.data
    if d.synthetic:
        ds = gen_synthetic_patchset(n, d.classes, cfg.run.seed * 10 + _SPLIT_IDS[split], size=size, noise=d.noise)
        return ds.images, ds.labels
    root = os.environ.get(DATA_ENV)
    found = _cifar_dir(Path(root)) if root else None
    if found is None:
        where = f"{DATA_ENV}={root}" if root else f"{DATA_ENV} is not set"
        raise DatasetError(f"CIFAR-10 binaries not found ({where}); point {DATA_ENV} at the directory holding "
                           f"data_batch_1..5.bin and test_batch.bin, or pass {SYNTHETIC_FLAG} "
                           f"([data] synthetic = true) to use generated patches")
    files = CIFAR_TEST_FILES if split == "val" else CIFAR_TRAIN_FILES
    images, labels = load_cifar10_arrays([found / f for f in files])
    keep = labels < d.classes
    images, labels = images[keep], labels[keep]
    start = d.train_size if split == "probe-train" else 0
    images, labels = images[start:start + n], labels[start:start + n]
    if len(labels) < n:
        raise DatasetError(f"split {split!r} needs {n} samples from offset {start}, only {len(labels)} available")
    return resize_images(images, size), labels.astype(np.int64)


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.epochs, t.batch_size, SgdConfig(t.learning_rate, t.momentum, t.weight_decay),
                       t.lr_steps, cfg.run.seed, t.bn_refresh)


def probe_train_config(cfg: RunConfig) -> TrainConfig:
    p = cfg.probe
    return TrainConfig(p.epochs, p.batch_size, SgdConfig(p.learning_rate, cfg.train.momentum, cfg.train.weight_decay),
                       (), cfg.run.seed)


# -- probe family ---------------------------------------------------------------------------

@dataclass
class ProbeResult:
    spc: float
    mae: float
    history: list[tuple[int, float, float, float]]  # epoch, loss, spc, mae
    mean_map: np.ndarray
    target: np.ndarray


def train_backbone(cfg: RunConfig, mode: PaddingMode) -> tuple[Module, int]:
    """Train a VGG-5 classifier with ``mode`` (or return the identity backbone) and its input side."""
    if cfg.probe.backbone == "none":
        return IdentityBackbone(), cfg.probe.align
    net = build_vgg5(cfg.data.classes, mode, cfg.run.seed)
    size = net.valid_input_size(cfg.model.image_size)
    if size != cfg.model.image_size:
        log.info("input side %d -> %d so every pooling input is even", cfg.model.image_size, size)
    images, labels = load_patches(cfg, "train", size, cfg.data.train_size)
    train_classifier(net, NORM.apply(images), labels, train_config(cfg))
    return net, size


def run_probe(cfg: RunConfig, backbone: Module, size: int, taps: Sequence[int],
              per_epoch: bool = False) -> tuple[ProbeResult, Module]:
    probe = build_probe(backbone, taps, cfg.probe.align, cfg.run.seed, cfg.readout_mode, cfg.model.align_corners)
    out = probe.out_size
    target = gen_position_target(cfg.probe.pattern, out, out).map.data[0, 0]
    tr, _ = load_patches(cfg, "probe-train", size, cfg.probe.train_size)
    te, _ = load_patches(cfg, "val", size, cfg.probe.test_size)
    # trained encoders expect their training normalisation; without one the probe reads raw [0, 1] pixels
    prep = NORM.apply if isinstance(backbone, Vgg5) else np.asarray
    ftr = probe_features(probe, prep(tr))
    fte = probe_features(probe, prep(te))
    history: list[tuple[int, float, float, float]] = []

    def on_epoch(epoch: int, loss: float) -> None:
        if per_epoch:
            spc, err = evaluate_probe(probe, fte, target)
            history.append((epoch, loss, spc, err))

    train_probe(probe, ftr, target, probe_train_config(cfg), on_epoch)
    spc, err = evaluate_probe(probe, fte, target)
    mean_map = predict_maps(probe, fte).mean(axis=0)[0]
    return ProbeResult(spc, err, history, mean_map, target), probe


def exp_probe(cfg: RunConfig, w: RunWriter) -> None:
    backbone, size = train_backbone(cfg, cfg.padding_mode)
    res, probe = run_probe(cfg, backbone, size, cfg.probe.taps, per_epoch=True)
    w.csv("metrics.csv", ("epoch", "loss", "spc", "mae"), res.history)
    w.pgm("prediction.pgm", res.mean_map, 0.0, 1.0)
    w.pgm("target.pgm", res.target, 0.0, 1.0)
    w.checkpoint("checkpoint.bin", probe.readout, "readout.")


def exp_pad_compare(cfg: RunConfig, w: RunWriter) -> None:
    rows = []
    for kind in cfg.probe.modes:
        mode = PaddingMode.parse(kind, cfg.model.pad_amount)
        backbone, size = train_backbone(cfg, mode)
        res, probe = run_probe(cfg, backbone, size, cfg.probe.taps)
        log.info("%s: spc %.4f mae %.4f", kind, res.spc, res.mae)
        rows.append((kind, res.spc, res.mae))
        w.pgm(f"prediction_{kind}.pgm", res.mean_map, 0.0, 1.0)
        w.checkpoint(f"checkpoint_{kind}.bin", probe.readout, "readout.")
    w.csv("metrics.csv", ("padding", "spc", "mae"), rows)


def exp_stage_sweep(cfg: RunConfig, w: RunWriter) -> None:
    backbone, size = train_backbone(cfg, cfg.padding_mode)
    rows = []
    for stage in range(1, backbone.num_stages + 1):
        res, _ = run_probe(cfg, backbone, size, (stage,))
        rows.append((stage, res.spc, res.mae))
        w.pgm(f"prediction_f{stage}.pgm", res.mean_map, 0.0, 1.0)
    w.csv("metrics.csv", ("stage", "spc", "mae"), rows)
    if isinstance(backbone, Vgg5):
        w.checkpoint("checkpoint.bin", backbone, "backbone.")


# -- grid family ---------------------------------------------------------------------------

def grid_spec(cfg: RunConfig, canvas: str | None = None) -> GridSpec:
    return GridSpec(cfg.grid.k, cfg.grid.patch, canvas or cfg.grid.canvas)


def train_grid_model(cfg: RunConfig, task: str) -> GridNet:
    net = build_gridnet(task, cfg.data.classes, cfg.padding_mode, cfg.model.residual,
                        RfLimit(cfg.model.rf_limit) if cfg.model.rf_limit else None, cfg.run.seed,
                        align_corners=cfg.model.align_corners)
    spec = grid_spec(cfg)
    net.check_input(spec.size)
    patches, labels = load_patches(cfg, "train", cfg.grid.patch, cfg.data.train_size)
    train_gridnet(net, patches, labels, spec, train_config(cfg), NORM)
    return net


def _location_rows(table, k: int) -> list[tuple]:
    return [(L, (L - 1) // k + 1, (L - 1) % k + 1, cell_distance(L, k), table[L]) for L in range(1, k * k + 1)]


def _heat(table) -> np.ndarray:
    return np.kron(table.grid(), np.ones((8, 8)))  # 8 px per cell for viewing


def _grid_eval(cfg: RunConfig, w: RunWriter, task: str):
    net = train_grid_model(cfg, task)
    val, vlab = load_patches(cfg, "val", cfg.grid.patch, cfg.data.val_size)
    metric = "accuracy" if task == "classify" else "miou"
    table = per_location_eval(net, val, vlab, grid_spec(cfg), metric, norm=NORM,
                              num_classes=cfg.data.classes + 1 if task == "segment" else None)
    w.pgm("locations.pgm", _heat(table), 0.0, 1.0)
    w.checkpoint("checkpoint.bin", net)
    return net, table, metric


def exp_grid(cfg: RunConfig, w: RunWriter, task: str) -> None:
    _, table, metric = _grid_eval(cfg, w, task)
    w.csv("metrics.csv", ("location", "row", "col", "distance", metric), _location_rows(table, cfg.grid.k))
    w.csv("summary.csv", ("task", "padding", "canvas", "k", metric),
          [(task, cfg.model.padding, cfg.grid.canvas, cfg.grid.k, table.overall)])


DIST_HEADER = ("distance", "count", "accuracy")


def exp_dist_to_border(cfg: RunConfig, w: RunWriter) -> None:
    _, table, _ = _grid_eval(cfg, w, "classify")
    rings = distance_rings(table)
    w.csv("locations.csv", ("location", "row", "col", "distance", "accuracy"), _location_rows(table, cfg.grid.k))
    w.csv("metrics.csv", DIST_HEADER, list(zip(rings.distances, rings.counts, rings.means)))


def ring_region_scores(predict: Callable[[np.ndarray], np.ndarray], patches: np.ndarray, labels: np.ndarray,
                       spec: GridSpec, num_classes: int, bands: Sequence[tuple[float, float]],
                       batch_size: int = 32) -> list[float | None]:
    """Band mIoU pooled over the validation set placed at every grid location."""
    h = w = spec.size
    masks = [band_mask(h, w, lo, hi) for lo, hi in bands]
    inter = [np.zeros(num_classes, dtype=np.int64) for _ in bands]
    union = [np.zeros(num_classes, dtype=np.int64) for _ in bands]
    for L in range(1, spec.k * spec.k + 1):
        for s in range(0, len(labels), batch_size):
            pb, yb = patches[s:s + batch_size], labels[s:s + batch_size]
            pred = np.asarray(predict(compose_canvas(pb, [L] * len(yb), spec, NORM))).argmax(axis=1)
            gt = seg_label_maps(yb, [L] * len(yb), spec)[:, 0]
            for b, m in enumerate(masks):
                if m.any():
                    i, u = iou_counts(pred[:, m], gt[:, m], num_classes)
                    inter[b] += i
                    union[b] += u
    return [miou_from_counts(inter[b], union[b]) if masks[b].any() else None for b in range(len(bands))]


def exp_ring_region(cfg: RunConfig, w: RunWriter) -> None:
    net = train_grid_model(cfg, "segment")
    val, vlab = load_patches(cfg, "val", cfg.grid.patch, cfg.data.val_size)
    net.eval()

    def predict(images: np.ndarray) -> np.ndarray:
        with no_tape():
            return net(Tensor(images)).data

    scores = ring_region_scores(predict, val, vlab, grid_spec(cfg), cfg.data.classes + 1, cfg.grid.bands)
    w.csv("metrics.csv", ("band_lo", "band_hi", "miou"), [(lo, hi, s) for (lo, hi), s in zip(cfg.grid.bands, scores)])
    spec = grid_spec(cfg)
    rel = np.zeros((spec.size, spec.size))
    for (lo, hi), s in zip(cfg.grid.bands, scores):
        if s is not None and hi - lo < 100:
            rel[band_mask(spec.size, spec.size, lo, hi)] = s
    w.pgm("bands.pgm", rel, 0.0, 1.0)
    w.checkpoint("checkpoint.bin", net)


def dimest_batches(cfg: RunConfig) -> dict[Factor, PairBatch]:
    """Location, class and residual pairs drawn from the validation patches."""
    val, vlab = load_patches(cfg, "val", cfg.grid.patch, cfg.data.val_size)
    spec = grid_spec(cfg)
    return {f: sample_pairs(f, val, vlab, spec, cfg.dimest.pairs, cfg.run.seed * 3 + i, cfg.dimest.canvases, NORM)
            for i, f in enumerate(Factor)}


def exp_dimest(cfg: RunConfig, w: RunWriter) -> None:
    task = cfg.dimest.task
    net = train_grid_model(cfg, task)
    report = estimate_dimensions(lambda x: latent_of(net, x), dimest_batches(cfg), net.width)
    run_id = f"{task}-{cfg.model.padding}-{cfg.grid.canvas}-k{cfg.grid.k}-s{cfg.run.seed}"
    w.csv("metrics.csv", report.CSV_HEADER, [report.csv_row(run_id, cfg.model.padding, cfg.grid.canvas, task)])
    w.checkpoint("checkpoint.bin", net)


def exp_reach_map(cfg: RunConfig, w: RunWriter) -> None:
    s = cfg.reach.size
    reach = positional_reach(cfg.reach.layers, s, s).data[0, 0]
    w.csv("metrics.csv", ("y", "x", "count"), [(y, x, int(reach[y, x])) for y in range(s) for x in range(s)])
    w.pgm("reach.pgm", reach)


EXPERIMENT_RUNNERS: dict[str, Callable[[RunConfig, RunWriter], None]] = {
    "probe": exp_probe,
    "pad-compare": exp_pad_compare,
    "stage-sweep": exp_stage_sweep,
    "grid-classify": lambda cfg, w: exp_grid(cfg, w, "classify"),
    "grid-segment": lambda cfg, w: exp_grid(cfg, w, "segment"),
    "dist-to-border": exp_dist_to_border,
    "ring-region": exp_ring_region,
    "dimest": exp_dimest,
    "reach-map": exp_reach_map,
}


def default_out_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run.out) / f"{cfg.run.experiment}-s{cfg.run.seed}"


def run(cfg: RunConfig, out_dir: str | Path | None = None) -> Path:
    """Run ``cfg.run.experiment`` and return the run directory."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else default_out_dir(cfg)
    w = RunWriter(out, cfg)
    try:
        log.info("start %s seed %d", cfg.run.experiment, cfg.run.seed)
        EXPERIMENT_RUNNERS[cfg.run.experiment](cfg, w)
        log.info("done")
    finally:
        w.close()
    return out
