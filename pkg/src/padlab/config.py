"""Run configuration: sectioned ``key = value`` files with typed, documented defaults.

Every key lives in a fixed section and has a default; unknown sections or
keys are rejected.  :func:`echo_config` writes every field back out in the
same format, so parsing an echo reproduces the run.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .border import PaddingMode
from .errors import ConfigError
from .synth import CANVAS_COLORS, Pattern

EXPERIMENTS = ("probe", "pad-compare", "stage-sweep", "grid-classify", "grid-segment",
               "dist-to-border", "ring-region", "dimest", "reach-map")
ALL_PAD_KINDS = ("zero", "partial", "circular", "replicate", "reflect", "none")
STANDARD_K = (3, 5, 7)


@dataclass
class RunSection:
    experiment: str = "probe"  # one of EXPERIMENTS
    seed: int = 0
    out: str = "padlab_runs"  # output directory


@dataclass
class DataSection:
    synthetic: bool = False  # use the generated patch set instead of CIFAR-10 under PADLAB_DATA
    train_size: int = 2000  # samples used for training (cap on CIFAR-10)
    val_size: int = 500
    classes: int = 10
    noise: float = 0.25  # background noise of generated patches


@dataclass
class ModelSection:
    padding: str = "zero"  # zero | partial | circular | replicate | reflect | none
    pad_amount: int = 1
    residual: bool = True  # grid network shortcuts
    rf_limit: int = 0  # grid blocks from this depth use 1x1 kernels; 0 disables
    align_corners: bool = False  # interpolation alignment for realignment and resizing
    image_size: int = 32  # backbone training resolution (raised to the nearest valid size without padding)


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_steps: tuple[int, ...] = ()  # epochs after which the rate drops by 10x
    bn_refresh: int = 20  # batches for re-estimating batchnorm statistics after training; 0 disables


@dataclass
class ProbeSection:
    pattern: str = "H"  # H | V | G | HS | VS
    taps: tuple[int, ...] = (4,)  # backbone stages feeding the readout (1-based)
    backbone: str = "vgg5"  # vgg5 | none
    align: int = 28  # side of the aligned feature map
    train_size: int = 400  # probe training images (disjoint from backbone training data)
    test_size: int = 100
    readout_padding: str = "none"
    readout_amount: int = 0
    epochs: int = 15
    batch_size: int = 16
    learning_rate: float = 0.1
    modes: tuple[str, ...] = ALL_PAD_KINDS  # pad-compare sweep


@dataclass
class GridSection:
    k: int = 3
    patch: int = 32
    canvas: str = "black"  # black | white | mean
    allow_large_k: bool = False  # permit k beyond 3, 5, 7
    # relative border-distance bands (lo, hi] in percent
    bands: tuple[tuple[float, float], ...] = ((0.0, 5.0), (5.0, 10.0), (10.0, 15.0), (15.0, 20.0),
                                              (20.0, 25.0), (0.0, 100.0))
    baseline: str = "zero"  # padded reference for dist-to-border differences


@dataclass
class DimestSection:
    task: str = "classify"  # grid task of the encoder: classify | segment
    pairs: int = 2048
    canvases: tuple[str, ...] = ("black", "white", "mean")


@dataclass
class ReachSection:
    layers: tuple[tuple[int, int, int], ...] = ((3, 1, 1),) * 4  # (kernel, stride, amount) per layer
    size: int = 32


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    grid: GridSection = field(default_factory=GridSection)
    dimest: DimestSection = field(default_factory=DimestSection)
    reach: ReachSection = field(default_factory=ReachSection)

    @property
    def padding_mode(self) -> PaddingMode:
        return PaddingMode.parse(self.model.padding, self.model.pad_amount)

    @property
    def readout_mode(self) -> PaddingMode:
        return PaddingMode.parse(self.probe.readout_padding, self.probe.readout_amount)

    def validate(self) -> "RunConfig":
        r, m, g = self.run, self.model, self.grid
        if r.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {r.experiment!r}; expected one of {', '.join(EXPERIMENTS)}")
        for kind in (m.padding, self.probe.readout_padding, *self.probe.modes):
            if kind not in ALL_PAD_KINDS:
                raise ConfigError(f"unknown padding {kind!r}")
        try:
            self.padding_mode
            self.readout_mode
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        try:
            Pattern(self.probe.pattern)
        except ValueError:
            raise ConfigError(f"unknown pattern {self.probe.pattern!r}") from None
        if self.probe.backbone not in ("vgg5", "none"):
            raise ConfigError(f"probe backbone must be vgg5 or none, got {self.probe.backbone!r}")
        for name in (g.canvas, *self.dimest.canvases):
            if name not in CANVAS_COLORS:
                raise ConfigError(f"unknown canvas {name!r}")
        if g.k % 2 == 0 or g.k < 3:
            raise ConfigError(f"grid k must be odd and >= 3, got {g.k}")
        if g.k not in STANDARD_K and not g.allow_large_k:
            raise ConfigError(f"grid k={g.k} needs allow_large_k = true")
        if self.dimest.task not in ("classify", "segment"):
            raise ConfigError(f"dimest task must be classify or segment, got {self.dimest.task!r}")
        if self.train.bn_refresh < 0:
            raise ConfigError("bn_refresh must be >= 0")
        if r.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.dimest.pairs < 2:
            raise ConfigError("dimest pairs must be >= 2")
        positive = {"train_size": self.data.train_size, "val_size": self.data.val_size,
                    "epochs": self.train.epochs, "batch_size": self.train.batch_size,
                    "probe.epochs": self.probe.epochs, "probe.batch_size": self.probe.batch_size,
                    "patch": g.patch, "reach.size": self.reach.size,
                    "image_size": m.image_size, "align": self.probe.align,
                    "probe.train_size": self.probe.train_size, "probe.test_size": self.probe.test_size}
        for key, value in positive.items():
            if value < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.data.classes < 2:
            raise ConfigError("classes must be >= 2")
        if m.rf_limit < 0:
            raise ConfigError("rf_limit must be >= 0")
        if not self.probe.taps or any(t < 1 for t in self.probe.taps):
            raise ConfigError("probe taps must be 1-based stage indices")
        for lo, hi in g.bands:
            if not 0 <= lo <= hi <= 100:
                raise ConfigError(f"band {lo}-{hi} outside 0..100")
        return self


# -- text form -----------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(("-" if len(v) == 2 else ":").join(_fmt(x) for x in v) for v in value)
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _items(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _parse(default, text: str):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, str):
        return text.strip()
    raise TypeError(type(default))


def _parse_field(section: str, key: str, default, text: str):
    try:
        if section == "grid" and key == "bands":
            return tuple(tuple(float(x) for x in item.split("-")) for item in _items(text))
        if section == "reach" and key == "layers":
            out = tuple(tuple(int(x) for x in item.split(":")) for item in _items(text))
            if any(len(t) != 3 for t in out):
                raise ValueError("layers are kernel:stride:amount")
            return out
        if isinstance(default, tuple):
            conv = int if key in ("taps", "lr_steps") else str
            return tuple(conv(x) for x in _items(text))
        return _parse(default, text)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def parse_config(text: str) -> RunConfig:
    """Parse config text; missing keys keep their defaults."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for name in cp.sections():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
        sec = sections[name]
        known = {f.name for f in fields(sec)}
        for key, text_value in cp.items(name):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            setattr(sec, key, _parse_field(name, key, getattr(sec, key), text_value))
    return cfg.validate()


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def echo_config(cfg: RunConfig) -> str:
    """Full config text, every key written explicitly."""
    lines = []
    for f in fields(cfg):
        lines.append(f"[{f.name}]")
        sec = getattr(cfg, f.name)
        for sf in fields(sec):
            lines.append(f"{sf.name} = {_fmt(getattr(sec, sf.name))}")
        lines.append("")
    return "\n".join(lines)


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """Copy of ``cfg`` with ``section={key: value}`` replacements applied."""
    parts = {}
    for f in fields(cfg):
        sec = getattr(cfg, f.name)
        parts[f.name] = dataclasses.replace(sec, **sections.get(f.name, {}))
    return RunConfig(**parts).validate()

