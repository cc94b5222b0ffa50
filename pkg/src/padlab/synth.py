"""Ground-truth position maps, grid canvases and dataset ingestion."""
from __future__ import annotations

import colorsys
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .tensor import Tensor

CIFAR_MEAN = (0.491, 0.482, 0.446)
# not given alongside the mean; the commonly quoted CIFAR-10 channel stds
CIFAR_STD = (0.247, 0.243, 0.262)
CIFAR_RECORD = 1 + 3 * 32 * 32


class Pattern(str, enum.Enum):
    H = "H"
    V = "V"
    G = "G"
    HS = "HS"
    VS = "VS"


@dataclass
class PositionTarget:
    pattern: Pattern
    map: Tensor


def _ramp(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)


def _stripes(n: int, count: int) -> np.ndarray:
    # `count` back-to-back ramps, each spanning [0, 1]
    if count < 1:
        raise ValueError("stripe count must be >= 1")
    if count == 1:
        return _ramp(n)
    idx = np.arange(n)
    bounds = np.linspace(0, n, count + 1)
    seg = np.minimum(np.searchsorted(bounds, idx, side="right") - 1, count - 1)
    out = np.zeros(n)
    for s in range(count):
        members = idx[seg == s]
        out[members] = _ramp(len(members))
    return out


def _normalise(m: np.ndarray) -> np.ndarray:
    lo, hi = m.min(), m.max()
    return (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)


def gen_position_target(pattern: str | Pattern, h: int, w: int, sigma: float | None = None,
                        stripes: int = 4) -> PositionTarget:
    """Gradient-like ground-truth map in [0, 1].

    H ramps left to right, V top to bottom, G is an isotropic Gaussian bump
    at the image centre (``sigma`` defaults to h/4) and HS/VS repeat the H/V
    ramp ``stripes`` times.
    """
    pattern = Pattern(pattern)
    if pattern in (Pattern.H, Pattern.HS) and w < 2 or pattern in (Pattern.V, Pattern.VS) and h < 2:
        raise DimensionError(f"pattern {pattern.value} needs extent >= 2 along its axis")
    if pattern is Pattern.G and (h < 2 or w < 2):
        raise DimensionError("Gaussian target needs h, w >= 2")
    if pattern in (Pattern.HS, Pattern.VS):
        n = w if pattern is Pattern.HS else h
        if n < 2 * stripes:
            raise DimensionError(f"{stripes} stripes need extent >= {2 * stripes} along the axis, got {n}")
    if pattern is Pattern.H:
        m = np.broadcast_to(_ramp(w)[None, :], (h, w))
    elif pattern is Pattern.V:
        m = np.broadcast_to(_ramp(h)[:, None], (h, w))
    elif pattern is Pattern.HS:
        m = np.broadcast_to(_stripes(w, stripes)[None, :], (h, w))
    elif pattern is Pattern.VS:
        m = np.broadcast_to(_stripes(h, stripes)[:, None], (h, w))
    else:
        sigma = h / 4 if sigma is None else sigma
        yy = np.arange(h) - (h - 1) / 2
        xx = np.arange(w) - (w - 1) / 2
        r2 = yy[:, None] ** 2 + xx[None, :] ** 2
        if r2.max() == r2.min():
            # 2x2: every pixel is equally close to the centre
            raise DimensionError(f"Gaussian target on {h}x{w} is flat; needs h or w >= 3")
        m = _normalise(np.exp(-r2 / (2 * sigma ** 2)))
    return PositionTarget(pattern, Tensor(np.array(m)[None, None]))


# -- grid canvases ----------------------------------------------------------------

CANVAS_COLORS = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "mean": CIFAR_MEAN,
}


def canvas_rgb(canvas: str | Sequence[float]) -> tuple[float, float, float]:
    if isinstance(canvas, str):
        try:
            return CANVAS_COLORS[canvas.lower()]
        except KeyError:
            raise ValueError(f"unknown canvas {canvas!r}; use black, white, mean or an RGB triple") from None
    rgb = tuple(float(v) for v in canvas)
    if len(rgb) != 3 or not all(0.0 <= v <= 1.0 for v in rgb):
        raise ValueError(f"canvas RGB must be three values in [0, 1], got {canvas!r}")
    return rgb


@dataclass(frozen=True)
class GridSpec:
    k: int = 3
    patch: int = 32
    canvas: str | tuple[float, float, float] = "black"

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"grid side k must be odd, got {self.k}")
        if self.patch < 1:
            raise ValueError("patch side must be positive")
        canvas_rgb(self.canvas)

    @property
    def size(self) -> int:
        return self.k * self.patch

    @property
    def rgb(self) -> tuple[float, float, float]:
        return canvas_rgb(self.canvas)

    def cell(self, L: int) -> tuple[int, int]:
        """(row, col) of 1-based row-major location ``L``."""
        if not 1 <= L <= self.k * self.k:
            raise ValueError(f"grid location {L} outside [1, {self.k * self.k}]")
        return divmod(L - 1, self.k)


@dataclass
class GridSample:
    image: Tensor
    class_label: int
    location: int
    seg_labels: Tensor


@dataclass(frozen=True)
class Normalization:
    mean: tuple[float, float, float] = CIFAR_MEAN
    std: tuple[float, float, float] = CIFAR_STD

    def apply(self, patch: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean).reshape(-1, 1, 1)
        s = np.asarray(self.std).reshape(-1, 1, 1)
        return (patch - m) / s


def compose_canvas(patches: np.ndarray, locations: Sequence[int], spec: GridSpec,
                   norm: Normalization | None = Normalization()) -> np.ndarray:
    """Vectorised composer: (n, 3, p, p) patches -> (n, 3, kp, kp) canvases."""
    n = patches.shape[0]
    p = spec.patch
    if patches.shape[1:] != (3, p, p):
        raise DimensionError(f"patches must be (n, 3, {p}, {p}), got {patches.shape}")
    out = np.empty((n, 3, spec.size, spec.size))
    out[:] = np.asarray(spec.rgb).reshape(1, 3, 1, 1)
    body = norm.apply(patches) if norm is not None else patches
    for i, L in enumerate(locations):
        r, c = spec.cell(int(L))
        out[i, :, r * p:(r + 1) * p, c * p:(c + 1) * p] = body[i]
    return out


def seg_label_maps(labels: Sequence[int], locations: Sequence[int], spec: GridSpec) -> np.ndarray:
    """(n, 1, kp, kp) integer maps: 0 background, class+1 on the patch cell."""
    p = spec.patch
    out = np.zeros((len(labels), 1, spec.size, spec.size), dtype=np.int64)
    for i, (y, L) in enumerate(zip(labels, locations)):
        r, c = spec.cell(int(L))
        out[i, 0, r * p:(r + 1) * p, c * p:(c + 1) * p] = int(y) + 1
    return out


def compose_grid_sample(patch: Tensor, label: int, L: int, spec: GridSpec,
                        norm: Normalization | None = Normalization()) -> GridSample:
    """Paste a normalised patch into cell ``L`` of a raw-colour canvas."""
    spec.cell(L)
    img = compose_canvas(patch.data.reshape(1, 3, spec.patch, spec.patch), [L], spec, norm)
    seg = seg_label_maps([label], [L], spec)
    return GridSample(Tensor(img), int(label), int(L), Tensor(seg))


# -- datasets -------------------------------------------------------------------------

def parse_cifar10(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(buf) % CIFAR_RECORD:
        raise ValueError(f"truncated CIFAR-10 file: {len(buf)} bytes is not a multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise ValueError(f"CIFAR-10 label byte {labels.max()} >= 10")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar10(path: str | Path) -> list[tuple[Tensor, int]]:
    """Read a CIFAR-10 binary batch file (label byte + 3072 channel-major pixel bytes per record)."""
    images, labels = parse_cifar10(Path(path).read_bytes())
    return [(Tensor(img[None]), int(y)) for img, y in zip(images, labels)]


def load_cifar10_arrays(paths: Sequence[str | Path]) -> tuple[np.ndarray, np.ndarray]:
    parts = [parse_cifar10(Path(p).read_bytes()) for p in paths]
    return np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts])


def export_cifar10(path: str | Path, images: np.ndarray, labels: Sequence[int]) -> None:
    """Write (n, 3, 32, 32) images in [0, 1] as a CIFAR-10 binary batch."""
    images = np.asarray(images)
    if images.shape[1:] != (3, 32, 32):
        raise DimensionError("CIFAR-10 export needs (n, 3, 32, 32) images")
    px = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).reshape(len(images), -1)
    lab = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.concatenate([lab, px], axis=1).tobytes())


def class_palette(classes: int) -> np.ndarray:
    """Evenly spaced saturated hues, one RGB colour per class."""
    return np.array([colorsys.hsv_to_rgb(c / classes, 0.9, 0.95) for c in range(classes)])


@dataclass
class SyntheticPatchset:
    images: np.ndarray
    labels: np.ndarray
    palette: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def as_list(self) -> list[tuple[Tensor, int]]:
        return [(Tensor(img[None]), int(y)) for img, y in zip(self.images, self.labels)]


def gen_synthetic_patchset(n: int, classes: int, seed: int, size: int = 32,
                           noise: float = 0.25) -> SyntheticPatchset:
    """Class-conditional coloured shapes on noise.

    Sample ``i`` has label ``i % classes``.  The background is grey
    uniform noise in ``[0.5 - noise, 0.5 + noise]``; on it sits a filled
    shape (disc, square or diamond, chosen at random) in the class colour,
    covering roughly 20-50% of the patch at a random position.  The mean
    colour therefore lies on the segment from grey towards the class hue,
    which is what makes the classes linearly separable by mean colour.
    """
    if n < 1 or classes < 1:
        raise ValueError("n and classes must be >= 1")
    rng = np.random.default_rng(seed)
    palette = class_palette(classes)
    labels = np.arange(n) % classes
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    images = np.empty((n, 3, size, size))
    for i in range(n):
        bg = 0.5 + rng.uniform(-noise, noise, size=(3, size, size))
        radius = size * rng.uniform(0.28, 0.42)
        cy, cx = rng.uniform(radius * 0.6, size - radius * 0.6, size=2)
        shape = rng.integers(3)
        dy, dx = yy - cy, xx - cx
        if shape == 0:
            m = dy * dy + dx * dx <= radius * radius
        elif shape == 1:
            m = (np.abs(dy) <= radius * 0.85) & (np.abs(dx) <= radius * 0.85)
        else:
            m = np.abs(dy) + np.abs(dx) <= radius * 1.2
        tint = palette[labels[i]] + rng.uniform(-0.05, 0.05, size=3)
        img = np.where(m[None], np.clip(tint, 0, 1)[:, None, None], bg)
        images[i] = img
    return SyntheticPatchset(images, labels.astype(np.int64), palette)


def synthetic_probe_images(kind: str, n: int, h: int, w: int, seed: int = 0) -> np.ndarray:
    """Black (all 0), white (all 1) or uniform-noise images, (n, 3, h, w)."""
    if kind == "black":
        return np.zeros((n, 3, h, w))
    if kind == "white":
        return np.ones((n, 3, h, w))
    if kind == "noise":
        return np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, 3, h, w))
    raise ValueError(f"unknown probe image kind {kind!r}")


def write_pgm(path: str | Path, values: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """Write a 2-D array as an 8-bit binary PGM (P5), scaled from [lo, hi] to [0, 255]."""
    v = np.asarray(values, dtype=np.float64)
    v = v.reshape(v.shape[-2:])
    lo = float(np.nanmin(v)) if lo is None else lo
    hi = float(np.nanmax(v)) if hi is None else hi
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    px = np.clip(np.rint(np.nan_to_num(scaled) * 255.0), 0, 255).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
