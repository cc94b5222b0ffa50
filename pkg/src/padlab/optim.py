"""SGD with momentum and L2 weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def sgd_step(params: Sequence[Tensor], cfg: SgdConfig, velocity: dict[int, np.ndarray] | None = None) -> None:
    """One update ``v = momentum*v + grad + wd*param; param -= lr*v``, then zero grads.

    ``velocity`` holds the momentum buffers keyed by ``id(param)``; pass the
    same dict on every step (see :class:`Sgd`).
    """
    if velocity is None:
        velocity = {}
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or p.shape} has no gradient")
    for p in params:
        d = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
        v = velocity.get(id(p))
        v = d.copy() if v is None else cfg.momentum * v + d
        velocity[id(p)] = v
        p.data -= cfg.learning_rate * v
        p.grad = None


@dataclass
class Sgd:
    params: list[Tensor]
    cfg: SgdConfig
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    def step(self) -> None:
        sgd_step(self.params, self.cfg, self.velocity)

    def set_lr(self, lr: float) -> None:
        self.cfg = SgdConfig(lr, self.cfg.momentum, self.cfg.weight_decay)
