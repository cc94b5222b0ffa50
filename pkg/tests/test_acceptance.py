"""End-to-end acceptance checks.

Every test records one PASS/FAIL line (printed, and repeated in the pytest
terminal summary) before asserting.  Training runs use the synthetic patch
set at desk scale; the exact budgets are the module constants below.
"""
import hashlib
import time
from functools import lru_cache

import numpy as np
import pytest

from gradtools import GRAD_CASES, GRAD_TOL, check_op, run_case
from oracles import (brute_mae, brute_miou, brute_ranks, brute_ring_region, brute_rings, brute_spearman)
from padlab import functional as F
from padlab import metrics, models
from padlab.border import NO_PAD, PaddingMode
from padlab.config import RunConfig, with_overrides
from padlab.dimest import estimate_dimensions
from padlab.experiments import (NORM, dimest_batches, grid_spec, load_patches, run_probe, train_backbone,
                                train_grid_model)
from padlab.models import latent_of
from padlab.tensor import Tensor, no_tape

SEEDS = (0, 1, 2)

# probe runs: identity backbone for the padding-amount checks, VGG-5 for type and depth
PROBE_BASE = {"data": {"synthetic": True}}
VGG_BASE = {"data": {"synthetic": True, "train_size": 500},
            "model": {"image_size": 56},
            "train": {"epochs": 3, "learning_rate": 0.05}}
VGG_MODES = ("zero", "circular", "reflect", "none")

# grid runs: 16 px patches, k in {3, 7}
GRID_BASE = {"data": {"synthetic": True, "train_size": 350, "val_size": 30},
             "train": {"epochs": 4, "learning_rate": 0.05},
             "grid": {"patch": 16},
             "dimest": {"pairs": 256}}


def _cfg(base: dict, seed: int, **sections) -> RunConfig:
    merged = {name: dict(values) for name, values in base.items()}
    for name, values in sections.items():
        merged.setdefault(name, {}).update(values)
    return with_overrides(RunConfig(), run={"seed": seed}, **merged)


def _mean(xs) -> float:
    return float(np.mean(xs))


# -- 1: gradients ------------------------------------------------------------------

def _mse_case(seed: int) -> float:
    rng = np.random.default_rng(seed)
    target = rng.uniform(size=(2, 1, 4, 3))
    return check_op(lambda p: F.mse_loss(p, target), [rng.normal(size=(2, 1, 4, 3))], rng, scalar_output=True)


def test_criterion_01_gradients(verdict):
    t0 = time.time()
    worst = {name: max(run_case(name, s) for s in range(20)) for name in sorted(GRAD_CASES)}
    worst["mse"] = max(_mse_case(s) for s in range(20))
    bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    secs = time.time() - t0
    ok = not bad and secs < 60
    assert verdict(1, ok, f"{len(worst)} ops x 20 instances, worst rel err {max(worst.values()):.2e}, "
                          f"{secs:.0f}s" + (f", failing {sorted(bad)}" if bad else ""))


# -- 2: metric oracles -------------------------------------------------------------

def test_criterion_02_metric_oracles(verdict):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    misses = []
    for i in range(200):
        n = int(rng.integers(2, 16))
        # small integer alphabets force ties in the ranks
        p = rng.integers(0, 5, size=n).astype(float)
        g = rng.uniform(size=n) if i % 2 else rng.integers(0, 5, size=n).astype(float)
        if metrics.average_ranks(p).tolist() != [float(r) for r in brute_ranks(p)]:
            misses.append(("ranks", i))
        if abs(metrics.spearman(p, g) - brute_spearman(p, g)) > 1e-12:
            misses.append(("spearman", i))
        if abs(metrics.mae(p, g) - brute_mae(p, g)) > 1e-12:
            misses.append(("mae", i))

        c = int(rng.integers(2, 5))
        h, w = (int(v) for v in rng.integers(1, 10, size=2))
        lp, lg = rng.integers(0, c, size=(2, h, w))
        if abs(metrics.miou(lp, lg, c) - brute_miou(lp.ravel(), lg.ravel(), c)) > 1e-12:
            misses.append(("miou", i))

        k = int(rng.choice([1, 3, 5, 7]))
        vals = rng.uniform(size=k * k)
        r = metrics.distance_rings(metrics.LocationTable(k, vals))
        counts, means = brute_rings(vals.tolist(), k)
        if r.counts.tolist() != counts or np.abs(r.means - means).max() > 1e-12:
            misses.append(("rings", i))

        cuts = sorted(rng.choice(np.arange(1, 100), size=3, replace=False).tolist())
        bands = list(zip([0] + cuts, cuts + [100])) + [(0, 100)]
        got = metrics.ring_region_miou(lp, lg, c, bands)
        want = brute_ring_region(lp, lg, c, bands)
        if any((a is None) != (b is None) or (a is not None and abs(a - b) > 1e-12) for a, b in zip(got, want)):
            misses.append(("ring_region", i))
    secs = time.time() - t0
    ok = not misses and secs < 60
    assert verdict(2, ok, f"200 instances x 6 checks, {len(misses)} mismatches, {secs:.1f}s")


# -- 3, 4: identity-backbone probes -------------------------------------------------

def _identity_probe_spc(seed: int, amount: int) -> float:
    cfg = _cfg(PROBE_BASE, seed, probe={"backbone": "none", "readout_padding": "zero" if amount else "none",
                                         "readout_amount": amount})
    backbone, size = train_backbone(cfg, cfg.padding_mode)
    res, _ = run_probe(cfg, backbone, size, (1,))
    return res.spc


@pytest.mark.slow
def test_criterion_03_probe_null_without_padding(verdict):
    t0 = time.time()
    spcs = [_identity_probe_spc(s, 0) for s in SEEDS]
    secs = time.time() - t0
    ok = abs(_mean(spcs)) < 0.2 and secs < 300
    assert verdict(3, ok, f"mean SPC {_mean(spcs):+.3f} (seeds {np.round(spcs, 3).tolist()}), {secs:.0f}s")


@pytest.mark.slow
def test_criterion_04_padding_amount_increases_spc(verdict):
    t0 = time.time()
    means = [_mean([_identity_probe_spc(s, a) for s in SEEDS]) for a in (0, 1, 2)]
    secs = time.time() - t0
    steps = np.diff(means)
    ok = bool((steps >= 0.05).all()) and secs < 600
    assert verdict(4, ok, f"mean SPC for padding 0/1/2: {np.round(means, 3).tolist()}, "
                          f"steps {np.round(steps, 3).tolist()}, {secs:.0f}s")


# -- 5, 6: VGG-5 backbones ----------------------------------------------------------

@lru_cache(maxsize=None)
def _vgg(mode: str, seed: int):
    """(config, trained backbone, input side) for one padding mode."""
    cfg = _cfg(VGG_BASE, seed, model={"padding": mode})
    backbone, size = train_backbone(cfg, cfg.padding_mode)
    return cfg, backbone, size


@lru_cache(maxsize=None)
def _vgg_spc(mode: str, seed: int, stage: int) -> float:
    cfg, backbone, size = _vgg(mode, seed)
    res, _ = run_probe(cfg, backbone, size, (stage,))
    return res.spc


@pytest.mark.slow
def test_criterion_05_padding_type_ordering(verdict):
    t0 = time.time()
    spc = {m: _mean([_vgg_spc(m, s, 4) for s in SEEDS]) for m in VGG_MODES}
    secs = time.time() - t0
    order = " > ".join(f"{m} {spc[m]:.3f}" for m in sorted(spc, key=spc.get, reverse=True))
    ok = spc["zero"] - spc["reflect"] >= 0.05 and spc["zero"] - spc["none"] >= 0.05 and secs < 1800
    assert verdict(5, ok, f"mean SPC {order}; zero-reflect {spc['zero'] - spc['reflect']:+.3f}, "
                          f"zero-none {spc['zero'] - spc['none']:+.3f}, {secs:.0f}s")


@pytest.mark.slow
def test_criterion_06_deeper_stage_more_position(verdict):
    t0 = time.time()
    # reuses the zero-padded backbones from criterion 5 when that ran first
    deep = _mean([_vgg_spc("zero", s, 4) for s in SEEDS])
    shallow = _mean([_vgg_spc("zero", s, 1) for s in SEEDS])
    secs = time.time() - t0
    ok = deep - shallow >= 0.1 and secs < 900
    assert verdict(6, ok, f"mean SPC stage 4 {deep:.3f} vs stage 1 {shallow:.3f}, gap {deep - shallow:+.3f}, "
                          f"{secs:.0f}s")


# -- 7, 8, 9: grid networks ---------------------------------------------------------

@lru_cache(maxsize=None)
def _grid(canvas: str, padding: str, k: int, seed: int):
    """(config, trained classifier, location table)."""
    cfg = _cfg(GRID_BASE, seed, model={"padding": padding}, grid={"k": k, "canvas": canvas})
    net = train_grid_model(cfg, "classify")
    val, vlab = load_patches(cfg, "val", cfg.grid.patch, cfg.data.val_size)
    table = metrics.per_location_eval(net, val, vlab, grid_spec(cfg), "accuracy", norm=NORM)
    return cfg, net, table


def _acc(canvas: str, padding: str, k: int) -> float:
    return 100 * _mean([_grid(canvas, padding, k, s)[2].overall for s in SEEDS])


def _drop(canvas: str, padding: str) -> float:
    return _acc(canvas, padding, 3) - _acc(canvas, padding, 7)


@pytest.mark.slow
def test_criterion_07_canvas_interaction(verdict):
    t0 = time.time()
    white_none, black_none, white_zero = _drop("white", "none"), _drop("black", "none"), _drop("white", "zero")
    secs = time.time() - t0
    accs = "; ".join(f"{c}/{p} {_acc(c, p, 3):.1f}->{_acc(c, p, 7):.1f}"
                     for c, p in (("white", "none"), ("black", "none"), ("white", "zero")))
    ok = white_none - black_none >= 5 and white_zero <= 0.5 * white_none and secs < 3600
    assert verdict(7, ok, f"accuracy k=3->7: {accs}; drops white/none {white_none:+.1f}, black/none "
                          f"{black_none:+.1f}, white/zero {white_zero:+.1f}, {secs:.0f}s")


def _ring_means(canvas: str, padding: str, k: int) -> np.ndarray:
    return np.mean([metrics.distance_rings(_grid(canvas, padding, k, s)[2]).means for s in SEEDS], axis=0)


@pytest.mark.slow
def test_criterion_08_distance_to_border_shape(verdict):
    unpadded = _ring_means("white", "none", 7)
    padded = _ring_means("white", "zero", 7)
    diff = padded - unpadded
    edge_is_min = unpadded[0] == unpadded.min()
    ok = bool(edge_is_min) and diff[0] > diff[-1]
    assert verdict(8, ok, f"white/none k=7 ring accuracy d=0..3 {np.round(100 * unpadded, 1).tolist()}; "
                          f"zero-none difference {np.round(100 * diff, 1).tolist()}")


class _CachedLatents:
    """Encoder that remembers latents per image batch, so rescaled scores reuse the forward passes."""

    def __init__(self, net):
        self.net, self.seen = net, {}

    def __call__(self, x):
        key = hashlib.sha1(np.ascontiguousarray(x).tobytes()).hexdigest()
        if key not in self.seen:
            self.seen[key] = latent_of(self.net, x)
        return self.seen[key]


@pytest.mark.slow
def test_criterion_09_location_dimensions(verdict):
    trained = {(p, s): _grid("black", p, 7, s) for p in ("zero", "none") for s in SEEDS}
    t0 = time.time()  # training is outside the measured budget
    width = trained["zero", 0][1].width
    rng = np.random.default_rng(9)
    scale = rng.uniform(0.1, 10, size=width) * rng.choice([-1, 1], size=width)
    shift = rng.normal(size=width) * 3
    loc = {"zero": [], "none": []}
    affine_same = True
    for (padding, _), (cfg, net, _) in trained.items():
        enc, batches = _CachedLatents(net), dimest_batches(cfg)
        report = estimate_dimensions(enc, batches, width)
        moved = estimate_dimensions(lambda x: enc(x) * scale + shift, batches, width)
        affine_same &= report.alloc == moved.alloc
        loc[padding].append(report.alloc["location"])
    secs = time.time() - t0
    z_loc, n_loc = _mean(loc["zero"]), _mean(loc["none"])
    ok = z_loc > n_loc and affine_same and secs < 600
    assert verdict(9, ok, f"location dims zero {loc['zero']} (mean {z_loc:.1f}) vs none {loc['none']} "
                          f"(mean {n_loc:.1f}) of {width}; affine-invariant {affine_same}, {secs:.0f}s")


# -- 10, 11: exact structural properties --------------------------------------------

def test_criterion_10_partial_conv_constant(verdict):
    rng = np.random.default_rng(10)
    spreads = []
    for _ in range(20):
        k = int(rng.choice([3, 5, 7]))
        amount = int(rng.integers(1, k))
        h, w = (int(v) for v in rng.integers(k, 20, size=2))
        c_in, c_out, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        out = F.conv2d(Tensor(np.ones((1, c_in, h, w))), Tensor(np.ones((c_out, c_in, k, k))),
                       mode=PaddingMode.parse("partial", amount), stride=stride).data
        spreads.append(float(out.max() - out.min()))
    ok = max(spreads) < 1e-9
    assert verdict(10, ok, f"20 geometries, largest max-min {max(spreads):.1e}")


def test_criterion_11_receptive_field_restriction(verdict):
    rng = np.random.default_rng(11)
    size, changed, checked = 32, 0, 0
    nets = {}
    for _ in range(50):
        depth, padding = int(rng.integers(1, 4)), str(rng.choice(["zero", "none"]))
        # unpadded shortcuts are resampled, which has no exact window
        residual = padding == "zero" and bool(rng.integers(2))
        key = (depth, padding, residual)
        if key not in nets:
            mode = PaddingMode.parse("zero", 1) if padding == "zero" else NO_PAD
            net = models.build_gridnet("classify", 10, mode, residual, models.RfLimit(depth), seed=depth)
            net.eval()
            x = rng.normal(size=(1, 3, size, size))
            with no_tape():
                nets[key] = (net, x, net.trunk(Tensor(x)).data)
        net, x, base = nets[key]
        oy, ox = (int(v) for v in rng.integers(0, base.shape[2], size=2))
        y0, y1, x0, x1 = net.receptive_field(oy, ox, size)
        outside = [(py, px) for py in range(size) for px in range(size)
                   if not (y0 <= py <= y1 and x0 <= px <= x1)]
        py, px = outside[int(rng.integers(len(outside)))]
        x2 = x.copy()
        x2[0, :, py, px] += rng.normal(size=3) * 5
        with no_tape():
            out = net.trunk(Tensor(x2)).data
        checked += 1
        changed += int(not np.array_equal(out[0, :, oy, ox], base[0, :, oy, ox]))
    ok = checked == 50 and changed == 0
    assert verdict(11, ok, f"{checked} probes outside the receptive field, {changed} changed their unit")
