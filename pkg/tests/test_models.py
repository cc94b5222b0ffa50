import numpy as np
import pytest

from padlab import functional as F
from padlab import models
from padlab.border import NO_PAD, PaddingMode
from padlab.errors import GeometryError
from padlab.optim import SgdConfig
from padlab.tensor import Tape, Tensor, backward, no_tape
from padlab.training import TrainConfig, probe_features, train_probe

ZERO1 = PaddingMode.parse("zero", 1)


def test_vgg5_stage_geometry():
    net = models.build_vgg5(10, ZERO1, seed=0)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 56, 56)))
    feats = models.stage_features(net, x)
    assert [f.shape[2] for f in feats] == [28, 14, 7, 7]
    assert [f.shape[1] for f in feats] == [32, 64, 128, 256]
    with no_tape():
        assert net(x).shape == (1, 10, 1, 1)


def test_vgg5_no_pad_geometry_errors():
    net = models.build_vgg5(10, NO_PAD, seed=0)
    with pytest.raises(GeometryError):
        net.check_input(56)
    size = net.valid_input_size(56)
    assert size >= 56
    net.check_input(size)
    assert net.stage_sizes(size)[-1] >= 1


def test_vgg5_seed_determinism():
    a = models.build_vgg5(5, ZERO1, seed=3).state_dict()
    b = models.build_vgg5(5, ZERO1, seed=3).state_dict()
    c = models.build_vgg5(5, ZERO1, seed=4).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith("weight"))
    with pytest.raises(ValueError):
        models.build_vgg5(1, ZERO1, seed=0)


def test_stage_features_range_and_finiteness():
    net = models.build_vgg5(10, ZERO1, seed=0)
    with pytest.raises(IndexError):
        models.stage_features(net, np.zeros((1, 3, 56, 56)), [9])
    feats = models.stage_features(net, np.ones((2, 3, 56, 56)), [1, 4])
    assert all(np.isfinite(f.data).all() for f in feats)
    assert net.training


# -- probe ------------------------------------------------------------------------

def test_probe_channels_and_output_size():
    net = models.build_vgg5(10, ZERO1, seed=0)
    p = models.build_probe(net, [4])
    assert p.in_channels == 256 and p.out_size == 26
    p_all = models.build_probe(net, [1, 2, 3, 4])
    assert p_all.in_channels == 32 + 64 + 128 + 256
    out = p(np.zeros((2, 3, 56, 56)))
    assert out.shape == (2, 1, 26, 26)
    assert {id(q) for q in p.trainable()} == {id(p.readout.weight), id(p.readout.bias)}
    with pytest.raises(ValueError):
        models.build_probe(net, [])
    with pytest.raises(IndexError):
        models.build_probe(net, [5])


@pytest.mark.parametrize("readout", ["none", "zero:1", "reflect:1", "partial:1"])
@pytest.mark.parametrize("corners", [False, True])
def test_fused_readout_equals_explicit_resize_and_conv(readout, corners):
    kind, _, amount = readout.partition(":")
    mode = PaddingMode.parse(kind, int(amount or 0))
    net = models.build_vgg5(10, ZERO1, seed=1)
    p = models.build_probe(net, [1, 3, 4], align=20, seed=2, readout_mode=mode, align_corners=corners)
    p.readout.bias.data[:] = 0.3
    x = np.random.default_rng(0).normal(size=(2, 3, 56, 56))
    with no_tape():
        explicit = F.sigmoid(p.readout(p.aligned_features(x))).data
    np.testing.assert_allclose(p(x).data, explicit, rtol=0, atol=1e-12)


def test_fused_readout_gradient_matches_explicit():
    net = models.build_vgg5(10, ZERO1, seed=1)
    p = models.build_probe(net, [2, 4], align=12, seed=2, readout_mode=PaddingMode.parse("partial", 1))
    x = np.random.default_rng(0).normal(size=(2, 3, 56, 56))
    target = np.random.default_rng(1).uniform(size=(2, 1, 12, 12))
    grads = []
    for fused in (True, False):
        for q in p.trainable():
            q.zero_grad()
        with Tape() as t:
            pred = p(x) if fused else F.sigmoid(p.readout(p.aligned_features(x)))
            loss = F.mse_loss(pred, target)
        backward(loss, t)
        grads.append([q.grad.copy() for q in p.trainable()])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_backbone_bit_identical_after_probe_training():
    net = models.build_vgg5(10, ZERO1, seed=0)
    before = net.state_dict()
    p = models.build_probe(net, [2, 4], align=14)
    imgs = np.random.default_rng(0).uniform(size=(8, 3, 56, 56))
    feats = probe_features(p, imgs)
    target = np.linspace(0, 1, 12)[None, :].repeat(12, 0)
    readout_before = p.readout.weight.data.copy()
    cfg = TrainConfig(epochs=2, batch_size=4, sgd=SgdConfig(0.1, 0.9, 0.0))
    train_probe(p, feats, target, cfg)
    after = net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert not np.array_equal(readout_before, p.readout.weight.data)


def test_identity_backbone_probe():
    p = models.build_probe(models.IdentityBackbone(), [1], align=10)
    assert p.in_channels == 3 and p.out_size == 8
    assert p(np.ones((1, 3, 10, 10))).shape == (1, 1, 8, 8)


# -- grid network -----------------------------------------------------------------

def test_gridnet_heads():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 96, 96)))
    cls = models.build_gridnet("classify", 10, ZERO1, residual=True, seed=0)
    seg = models.build_gridnet("segment", 10, ZERO1, residual=True, seed=0)
    with no_tape():
        assert cls(x).shape == (1, 10, 1, 1)
        assert seg(x).shape == (1, 11, 96, 96)
    assert seg.out_channels == 11
    with pytest.raises(ValueError):
        models.build_gridnet("detect", 10, ZERO1)
    with pytest.raises(ValueError):
        models.build_gridnet("classify", 1, ZERO1)


@pytest.mark.parametrize("task", ["classify", "segment"])
def test_padded_and_unpadded_parameter_counts_equal(task):
    a = models.build_gridnet(task, 10, ZERO1, residual=True, seed=0)
    b = models.build_gridnet(task, 10, NO_PAD, residual=True, seed=0)
    assert a.num_parameters() == b.num_parameters()
    sa, sb = a.state_dict(), b.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_unpadded_residual_realigns_shortcut():
    net = models.build_gridnet("classify", 4, NO_PAD, residual=True, seed=0)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 48, 48)))
    with no_tape():
        assert net(x).shape == (2, 4, 1, 1)
    assert net.trunk_sizes(48) == [46, 22, 20, 9, 7, 3]


def test_latent_contract():
    net = models.build_gridnet("classify", 10, ZERO1, residual=True, seed=0)
    x = np.ones((1, 3, 32, 32))
    z = models.latent_of(net, x)
    assert z.shape == (1, 128)
    assert np.isfinite(z).all()
    np.testing.assert_array_equal(z, models.latent_of(net, x))
    assert net.training


def test_translation_equivariance_without_padding():
    net = models.GridNet("classify", 3, NO_PAD, residual=False, seed=0,
                         widths=(4, 5, 6), strides=(1, 1, 1))
    # identity batchnorm: eval mode with zero mean / unit variance and unit scale
    net.eval()
    for m in net.modules():
        if isinstance(m, models.BatchNorm2d):
            m.state.mean[:] = 0
            m.state.var[:] = 1 - 1e-5
    x = np.zeros((1, 3, 24, 24))
    x[0, :, 8:12, 7:11] = np.random.default_rng(0).normal(size=(3, 4, 4))
    shifted = np.roll(x, (3, 5), axis=(2, 3))
    with no_tape():
        a = net.trunk(Tensor(x)).data
        b = net.trunk(Tensor(shifted)).data
    np.testing.assert_allclose(b[..., 3:, 5:], a[..., :-3, :-5], atol=1e-12)


def test_rf_limit_stops_receptive_field_growth():
    full = models.build_gridnet("classify", 10, ZERO1, seed=0)
    lim = models.build_gridnet("classify", 10, ZERO1, rf_limit=models.RfLimit(2), seed=0)
    # two 3x3 layers, the first at stride 1
    assert lim.receptive_field_size() == 1 + 2 + 2
    assert full.receptive_field_size() > lim.receptive_field_size()
    assert all(b.conv.kernel == 1 for b in lim.blocks[2:])
    assert lim.num_parameters() < full.num_parameters()


def test_rf_limit_exact_locality():
    net = models.build_gridnet("classify", 10, ZERO1, rf_limit=models.RfLimit(2), seed=1)
    net.eval()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 3, 32, 32))
    with no_tape():
        base = net.trunk(Tensor(x)).data
    oy, ox = 1, 2
    y0, y1, x0, x1 = net.receptive_field(oy, ox, 32)
    for _ in range(10):
        py, px = rng.integers(0, 32, size=2)
        if y0 <= py <= y1 and x0 <= px <= x1:
            continue
        x2 = x.copy()
        x2[0, :, py, px] += 5.0
        with no_tape():
            out = net.trunk(Tensor(x2)).data
        assert out[0, :, oy, ox].tolist() == base[0, :, oy, ox].tolist()
    x2 = x.copy()
    x2[0, :, y0, x0] += 5.0
    with no_tape():
        assert not np.array_equal(net.trunk(Tensor(x2)).data[0, :, oy, ox], base[0, :, oy, ox])


def test_receptive_field_rejects_non_constant_padding():
    with pytest.raises(ValueError):
        models.build_gridnet("classify", 3, PaddingMode.parse("reflect", 1)).receptive_field(0, 0, 32)
