"""Model builders: VGG-5 backbone, position probe, grid-task network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import functional as F
from .border import NO_PAD, PadKind, PaddingMode, conv_output_size, pad_rows, partial_scale_mask
from .errors import GeometryError
from .tensor import Tensor, maybe_record, no_tape


class Parameter(Tensor):
    """A trainable leaf; ``requires_grad`` is cleared when frozen."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, value in self._children():
            if isinstance(value, Parameter):
                out[prefix + name] = value
            else:
                out.update(value.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def trainable(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, value in self._children():
            if isinstance(value, Module):
                out.update(value.named_buffers(f"{prefix}{name}."))
        return out

    def train(self, flag: bool = True) -> "Module":
        for m in self.modules():
            m.training = flag
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        expected = set(params) | set(self.named_buffers())
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise KeyError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]
        for m_name, m in self._bn_modules():
            m.state.mean = state[m_name + "running_mean"].copy()
            m.state.var = state[m_name + "running_var"].copy()

    def _bn_modules(self, prefix: str = "") -> Iterator[tuple[str, "BatchNorm2d"]]:
        for name, value in self._children():
            if isinstance(value, BatchNorm2d):
                yield f"{prefix}{name}.", value
            elif isinstance(value, Module):
                yield from value._bn_modules(f"{prefix}{name}.")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


# -- layers --------------------------------------------------------------------

def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, mode: PaddingMode = NO_PAD, stride: int = 1,
                 bias: bool = True, rng: np.random.Generator | None = None, init: str = "he"):
        rng = rng or np.random.default_rng(0)
        fan_in, fan_out = c_in * kernel * kernel, c_out * kernel * kernel
        shape = (c_out, c_in, kernel, kernel)
        w = he_uniform(rng, shape, fan_in) if init == "he" else xavier_uniform(rng, shape, fan_in, fan_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.mode = mode
        self.stride = stride
        self.kernel = kernel

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.mode, self.stride)

    def out_size(self, size: int) -> int:
        return conv_output_size(size, self.kernel, self.mode.pad, self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.state = F.BatchNormState(channels)

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.state, self.training)

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + "running_mean": self.state.mean, prefix + "running_var": self.state.var}


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(he_uniform(rng, (d_out, d_in), d_in))
        self.bias = Parameter(np.zeros(d_out))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """conv (no bias) -> batchnorm -> relu, with an optional 2x2 max-pool."""

    def __init__(self, c_in: int, c_out: int, mode: PaddingMode, rng: np.random.Generator,
                 kernel: int = 3, stride: int = 1, pool: bool = False):
        self.conv = Conv2d(c_in, c_out, kernel, mode, stride, bias=False, rng=rng)
        self.bn = BatchNorm2d(c_out)
        self.pool = pool

    def forward(self, x: Tensor) -> Tensor:
        y = F.relu(self.bn(self.conv(x)))
        return F.maxpool2d(y, 2) if self.pool else y

    def out_size(self, size: int) -> int:
        size = self.conv.out_size(size)
        if self.pool:
            if size % 2:
                raise GeometryError(f"max-pool input {size} is odd")
            size //= 2
        return size


# -- VGG-5 ---------------------------------------------------------------------

VGG5_WIDTHS = (32, 64, 128, 256)


class Vgg5(Module):
    """Four conv blocks (first three pooled), global average pooling and a linear head."""

    def __init__(self, classes: int, mode: PaddingMode, seed: int = 0):
        if classes < 2:
            raise ValueError("classes must be >= 2")
        rng = np.random.default_rng(seed)
        self.mode = mode
        self.widths = VGG5_WIDTHS
        c_in = 3
        blocks = []
        for i, width in enumerate(VGG5_WIDTHS):
            blocks.append(ConvBlock(c_in, width, mode, rng, pool=i < 3))
            c_in = width
        self.blocks = blocks
        self.fc = Linear(c_in, classes, rng)

    @property
    def num_stages(self) -> int:
        return len(self.blocks)

    def stage_sizes(self, size: int) -> list[int]:
        """Spatial size after each stage; raises GeometryError for unusable input sizes."""
        sizes = []
        for b in self.blocks:
            size = b.out_size(size)
            sizes.append(size)
        return sizes

    def check_input(self, size: int) -> None:
        self.stage_sizes(size)

    def valid_input_size(self, min_size: int) -> int:
        """Smallest input side >= ``min_size`` that passes the geometry check."""
        for size in range(min_size, min_size + 256):
            try:
                self.stage_sizes(size)
                return size
            except GeometryError:
                continue
        raise GeometryError(f"no valid input size near {min_size}")

    def stages(self, x: Tensor) -> list[Tensor]:
        out = []
        for b in self.blocks:
            x = b(x)
            out.append(x)
        return out

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(F.global_avg_pool(self.stages(x)[-1]))

    def latent(self, x: Tensor) -> Tensor:
        return F.global_avg_pool(self.stages(x)[-1])


class IdentityBackbone(Module):
    """Stand-in backbone whose single stage is the input image (probe without encoder)."""

    widths = (3,)
    num_stages = 1

    def stages(self, x: Tensor) -> list[Tensor]:
        return [x]


def build_vgg5(classes: int, mode: PaddingMode, seed: int) -> Vgg5:
    return Vgg5(classes, mode, seed)


def stage_features(backbone: Module, x: Tensor | np.ndarray, taps: Sequence[int] | None = None) -> list[Tensor]:
    """Frozen stage outputs (1-based stage indices), computed in eval mode without recording."""
    taps = list(range(1, backbone.num_stages + 1)) if taps is None else list(taps)
    for t in taps:
        if not 1 <= t <= backbone.num_stages:
            raise IndexError(f"stage {t} outside 1..{backbone.num_stages}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    was_training = backbone.training
    backbone.eval()
    try:
        with no_tape():
            feats = backbone.stages(x)
    finally:
        backbone.train(was_training)
    return [feats[t - 1] for t in taps]


# -- position probe ---------------------------------------------------------------

class PosProbe(Module):
    """Frozen backbone + one 3x3 readout convolution + sigmoid.

    Tapped stage outputs are bilinearly resized to ``align`` x ``align`` and
    concatenated along channels before the readout.  Because the backbone
    is frozen and resizing, padding and the readout are all linear, the
    readout is evaluated directly on the native-resolution features with
    the resize and padding folded into per-axis operators; the result is
    the same as resizing, concatenating and convolving explicitly.
    """

    def __init__(self, backbone: Module, taps: Sequence[int], align: int = 28,
                 readout_mode: PaddingMode = NO_PAD, seed: int = 0, align_corners: bool = False):
        if not taps:
            raise ValueError("probe needs at least one stage tap")
        for t in taps:
            if not 1 <= t <= backbone.num_stages:
                raise IndexError(f"stage {t} outside 1..{backbone.num_stages}")
        backbone.freeze()
        self.backbone = backbone
        self.taps = tuple(taps)
        self.align = align
        self.align_corners = align_corners
        self.readout_mode = readout_mode
        self.tap_widths = tuple(backbone.widths[t - 1] for t in taps)
        self._op_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        rng = np.random.default_rng(seed)
        self.readout = Conv2d(sum(self.tap_widths), 1, 3, readout_mode, bias=True, rng=rng, init="xavier")

    @property
    def in_channels(self) -> int:
        return self.readout.weight.shape[1]

    @property
    def out_size(self) -> int:
        return self.readout.out_size(self.align)

    def features(self, images: Tensor | np.ndarray) -> list[np.ndarray]:
        """Frozen native-resolution features of each tap."""
        return [f.data for f in stage_features(self.backbone, images, self.taps)]

    def aligned_features(self, images: Tensor | np.ndarray) -> Tensor:
        """The explicit resized-and-concatenated readout input."""
        feats = stage_features(self.backbone, images, self.taps)
        with no_tape():
            aligned = [F.bilinear_resize(f, self.align, self.align, self.align_corners) for f in feats]
            return F.concat(aligned, axis=1) if len(aligned) > 1 else aligned[0]

    def _operators(self, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
        key = (h, w)
        cache = self._op_cache
        if key not in cache:
            cache[key] = (pad_rows(_resize_or_eye(h, self.align, self.align_corners), self.readout_mode),
                          pad_rows(_resize_or_eye(w, self.align, self.align_corners), self.readout_mode))
        return cache[key]

    def readout_logits(self, feats: Sequence[np.ndarray]) -> Tensor:
        """Pre-sigmoid readout map from native-resolution tap features."""
        weight, bias = self.readout.weight, self.readout.bias
        mode = self.readout_mode
        kh = kw = self.readout.kernel
        out_n = self.out_size
        n = feats[0].shape[0]
        out = np.zeros((n, out_n, out_n))
        ops, offsets = [], np.cumsum((0,) + self.tap_widths)
        for t, f in enumerate(feats):
            ah, aw = self._operators(f.shape[2], f.shape[3])
            wt = weight.data[0, offsets[t]:offsets[t + 1]]
            ops.append((ah, aw))
            for i in range(kh):
                for j in range(kw):
                    g = np.tensordot(wt[:, i, j], f, axes=([0], [1]))  # (n, h, w)
                    out += ah[i:i + out_n] @ g @ aw[j:j + out_n].T
        scale = None
        if mode.kind is PadKind.PARTIAL and mode.pad > 0:
            scale = partial_scale_mask(self.align, self.align, kh, kw, mode.pad).data[0, 0]
            out = out * scale
        out = out + bias.data[0]
        result = Tensor(out[:, None])

        def backward_fn(g):
            g = g[:, 0]
            gs = g * scale if scale is not None else g
            gw = np.zeros(weight.shape)
            for t, f in enumerate(feats):
                ah, aw = ops[t]
                for i in range(kh):
                    for j in range(kw):
                        back = np.swapaxes(ah[i:i + out_n], 0, 1) @ gs @ aw[j:j + out_n]  # (n, h, w)
                        gw[0, offsets[t]:offsets[t + 1], i, j] = np.tensordot(f, back, axes=([0, 2, 3], [0, 1, 2]))
            return gw, np.array([g.sum()])

        return maybe_record([weight, bias], result, backward_fn, "probe_readout")

    def readout_forward(self, feats: Sequence[np.ndarray]) -> Tensor:
        return F.sigmoid(self.readout_logits(feats))

    def forward(self, images: Tensor | np.ndarray) -> Tensor:
        return self.readout_forward(self.features(images))

    def _children(self):
        # the frozen backbone's parameters are not the probe's
        yield "readout", self.readout


def _resize_or_eye(n_in: int, align: int, align_corners: bool) -> np.ndarray:
    return np.eye(align) if n_in == align else np.array(F.interp_matrix(n_in, align, align_corners))


def build_probe(backbone: Module, taps: Sequence[int], align: int = 28, seed: int = 0,
                readout_mode: PaddingMode = NO_PAD, align_corners: bool = False) -> PosProbe:
    return PosProbe(backbone, taps, align, readout_mode, seed, align_corners)


# -- grid network -------------------------------------------------------------------

GRID_WIDTHS = (32, 32, 64, 64, 128, 128)
GRID_STRIDES = (1, 2, 1, 2, 1, 2)


@dataclass(frozen=True)
class RfLimit:
    """Blocks after ``depth`` use 1x1 kernels, freezing the receptive field."""

    depth: int


class GridBlock(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, mode: PaddingMode,
                 residual: bool, rng: np.random.Generator, align_corners: bool):
        self.conv = Conv2d(c_in, c_out, kernel, mode, stride, bias=False, rng=rng)
        self.bn = BatchNorm2d(c_out)
        self.residual = residual
        self.align_corners = align_corners
        self.shortcut = None
        if residual and (c_in != c_out or stride != 1):
            self.shortcut = Conv2d(c_in, c_out, 1, NO_PAD, stride, bias=False, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        if self.residual:
            s = self.shortcut(x) if self.shortcut is not None else x
            if s.shape[2:] != y.shape[2:]:
                s = F.bilinear_resize(s, y.shape[2], y.shape[3], self.align_corners)
            y = F.add(y, s)
        return F.relu(y)

    def out_size(self, size: int) -> int:
        return self.conv.out_size(size)


class GridNet(Module):
    """Desk-scale trunk of conv blocks with a classification or segmentation head."""

    def __init__(self, task: str, classes: int, mode: PaddingMode, residual: bool = False,
                 rf_limit: RfLimit | None = None, seed: int = 0,
                 widths: Sequence[int] = GRID_WIDTHS, strides: Sequence[int] = GRID_STRIDES,
                 align_corners: bool = False):
        if task not in ("classify", "segment"):
            raise ValueError(f"task must be classify or segment, got {task!r}")
        if classes < 2:
            raise ValueError("classes must be >= 2")
        if len(widths) != len(strides):
            raise ValueError("widths and strides must have equal length")
        rng = np.random.default_rng(seed)
        self.task = task
        self.classes = classes
        self.mode = mode
        self.residual = residual
        self.rf_limit = rf_limit
        self.align_corners = align_corners
        blocks = []
        c_in = 3
        for i, (width, stride) in enumerate(zip(widths, strides)):
            limited = rf_limit is not None and i >= rf_limit.depth
            kernel = 1 if limited else 3
            blocks.append(GridBlock(c_in, width, kernel, stride, NO_PAD if limited else mode,
                                    residual, rng, align_corners))
            c_in = width
        self.blocks = blocks
        self.width = c_in
        if task == "classify":
            self.head = Linear(c_in, classes, rng)
        else:
            self.head = Conv2d(c_in, classes + 1, 1, NO_PAD, bias=True, rng=rng)

    @property
    def out_channels(self) -> int:
        return self.classes if self.task == "classify" else self.classes + 1

    def trunk_sizes(self, size: int) -> list[int]:
        sizes = []
        for b in self.blocks:
            size = b.out_size(size)
            sizes.append(size)
        return sizes

    def check_input(self, size: int) -> None:
        self.trunk_sizes(size)

    def trunk(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x

    def forward(self, x: Tensor) -> Tensor:
        feat = self.trunk(x)
        if self.task == "classify":
            return self.head(F.global_avg_pool(feat))
        logits = self.head(feat)
        return F.bilinear_resize(logits, x.shape[2], x.shape[3], self.align_corners)

    def latent(self, x: Tensor) -> Tensor:
        return F.global_avg_pool(self.trunk(x))

    def receptive_field(self, y: int, x: int, size: int) -> tuple[int, int, int, int]:
        """Inclusive input window ``(y0, y1, x0, x1)`` that can influence trunk unit (y, x).

        Only defined when every padded position is a constant (zero, partial
        or no padding) and no shortcut is resampled.
        """
        if self.mode.kind not in (PadKind.ZERO, PadKind.PARTIAL, PadKind.NONE):
            raise ValueError("receptive field is only exact for constant (zero/partial/none) padding")
        if self.residual and self.mode.pad == 0:
            raise ValueError("resampled shortcuts widen the receptive field; not supported")
        jump, rf, offset = 1, 1, 0
        for b in self.blocks:
            k, s, p = b.conv.kernel, b.conv.stride, b.conv.mode.pad
            offset += p * jump
            rf += (k - 1) * jump
            jump *= s
        y0, x0 = y * jump - offset, x * jump - offset
        return max(y0, 0), min(y0 + rf - 1, size - 1), max(x0, 0), min(x0 + rf - 1, size - 1)

    def receptive_field_size(self) -> int:
        jump, rf = 1, 1
        for b in self.blocks:
            rf += (b.conv.kernel - 1) * jump
            jump *= b.conv.stride
        return rf


def build_gridnet(task: str, classes: int, mode: PaddingMode, residual: bool = False,
                  rf_limit: RfLimit | None = None, seed: int = 0, **kwargs) -> GridNet:
    return GridNet(task, classes, mode, residual, rf_limit, seed, **kwargs)


def latent_of(model: Module, x: Tensor | np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of the last conv stage, (n, N), eval mode, not recorded."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    was_training = model.training
    model.eval()
    try:
        with no_tape():
            z = model.latent(x)
    finally:
        model.train(was_training)
    return z.data.reshape(z.shape[0], -1)
