import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from padlab.border import PadKind
from padlab.config import (ALL_PAD_KINDS, EXPERIMENTS, RunConfig, echo_config, load_config, parse_config,
                           with_overrides)
from padlab.errors import ConfigError


def test_defaults_are_valid_and_documented():
    cfg = RunConfig().validate()
    assert cfg.run.experiment == "probe"
    assert cfg.probe.epochs == 15 and cfg.train.epochs == 10
    assert cfg.grid.patch == 32 and cfg.grid.k == 3
    assert cfg.padding_mode.kind is PadKind.ZERO and cfg.padding_mode.amount == 1
    assert cfg.readout_mode.kind is PadKind.NONE
    assert set(cfg.probe.modes) == set(ALL_PAD_KINDS) and len(ALL_PAD_KINDS) == 6


def test_partial_file_keeps_defaults():
    cfg = parse_config("[run]\nexperiment = grid-classify\nseed = 4\n[grid]\nk = 7\ncanvas = white\n")
    assert (cfg.run.experiment, cfg.run.seed, cfg.grid.k, cfg.grid.canvas) == ("grid-classify", 4, 7, "white")
    assert cfg.train.batch_size == RunConfig().train.batch_size


def test_echo_roundtrip_default():
    cfg = RunConfig()
    assert parse_config(echo_config(cfg)) == cfg


def test_echo_roundtrip_every_field_changed():
    cfg = parse_config("""
[run]
experiment = dimest
seed = 3
out = /tmp/x
[data]
synthetic = yes
train_size = 11
classes = 4
noise = 0.1
[model]
padding = partial
pad_amount = 2
residual = false
rf_limit = 2
align_corners = true
[train]
lr_steps = 3, 6
learning_rate = 0.05
bn_refresh = 0
[probe]
pattern = VS
taps = 1, 3
backbone = none
modes = zero, none
[grid]
k = 5
bands = 0-12.5, 12.5-100
baseline = reflect
[dimest]
pairs = 64
canvases = black, white
[reach]
layers = 3:1:1, 5:2:2
size = 17
""")
    assert cfg.probe.taps == (1, 3) and cfg.train.lr_steps == (3, 6)
    assert cfg.grid.bands == ((0.0, 12.5), (12.5, 100.0))
    assert cfg.reach.layers == ((3, 1, 1), (5, 2, 2))
    assert cfg.data.synthetic is True and cfg.model.residual is False
    assert parse_config(echo_config(cfg)) == cfg


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), k=st.sampled_from([3, 5, 7]), lr=st.floats(1e-5, 1.0),
       exp=st.sampled_from(EXPERIMENTS), pad=st.sampled_from(ALL_PAD_KINDS), amount=st.integers(1, 3),
       taps=st.lists(st.integers(1, 4), min_size=1, max_size=4))
def test_echo_roundtrip_property(seed, k, lr, exp, pad, amount, taps):
    cfg = with_overrides(RunConfig(), run={"seed": seed, "experiment": exp}, grid={"k": k},
                         train={"learning_rate": lr}, model={"padding": pad, "pad_amount": amount},
                         probe={"taps": tuple(taps)})
    assert parse_config(echo_config(cfg)) == cfg


@pytest.mark.parametrize("text,match", [
    ("[run]\ncolour = red\n", "unknown key"),
    ("[runs]\nseed = 1\n", "unknown section"),
    ("[run]\nexperiment = train\n", "unknown experiment"),
    ("[model]\npadding = mirror\n", "unknown padding"),
    ("[grid]\nk = 4\n", "odd"),
    ("[grid]\nk = 9\n", "allow_large_k"),
    ("[grid]\ncanvas = purple\n", "canvas"),
    ("[run]\nseed = abc\n", "seed"),
    ("[data]\nsynthetic = maybe\n", "boolean"),
    ("[probe]\npattern = X\n", "pattern"),
    ("[train]\nbn_refresh = -1\n", "bn_refresh"),
    ("[grid]\nbands = 10-5\n", "band"),
    ("[reach]\nlayers = 3:1\n", "kernel:stride:amount"),
    ("[run\nseed = 1\n", "malformed"),
    ("seed = 1\n", "malformed"),
])
def test_invalid_configs_rejected(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_large_k_behind_flag():
    cfg = parse_config("[grid]\nk = 11\nallow_large_k = true\n")
    assert cfg.grid.k == 11


def test_load_config(tmp_path):
    f = tmp_path / "c.ini"
    f.write_text("[run]\nseed = 9\n")
    assert load_config(f).run.seed == 9
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_with_overrides_validates_and_copies():
    base = RunConfig()
    new = with_overrides(base, run={"seed": 5})
    assert new.run.seed == 5 and base.run.seed == 0
    assert dataclasses.replace(new.run, seed=0) == base.run
    with pytest.raises(ConfigError):
        with_overrides(base, grid={"k": 2})
    with pytest.raises(TypeError):
        with_overrides(base, run={"nope": 1})
