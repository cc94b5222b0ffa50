"""Dense float64 tensors and a reverse-mode gradient tape.

Operations in :mod:`padlab.functional` record a node on the active :class:`Tape`
whenever one of their inputs requires a gradient.  With no active tape nothing
is recorded, which is how frozen backbones and evaluation passes run.

    >>> x = Tensor([[1.0, -2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = F.sum(F.relu(x))
    >>> backward(loss, tape)
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError

DTYPE = np.float64

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("padlab_tape", default=None)


class Tensor:
    """A dense array of float64 values with an optional gradient slot.

    Image-like tensors are laid out (n, c, h, w); parameters such as biases
    and fully connected weights keep their natural 1-D / 2-D shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn
    op: str = ""


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager to make it the active tape for the current
    context.  Nodes are appended in execution order, so the list is already
    topologically sorted.
    """

    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn, op: str = "") -> None:
        output.requires_grad = True
        output.is_leaf = False
        self.nodes.append(Node(tuple(inputs), output, backward_fn, op))

    def clear(self) -> None:
        self.nodes.clear()


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


class no_tape:
    """Context manager that suspends recording (for frozen feature extraction)."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def maybe_record(inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn, op: str = "") -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, output, backward_fn, op)
    return output


def backward(loss: Tensor, tape: Tape | None = None, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; clear them with
    :func:`zero_grads` or let :func:`padlab.optim.sgd_step` do it.
    ``grad`` seeds the output gradient and defaults to 1 for a scalar loss.
    """
    tape = tape if tape is not None else _ACTIVE_TAPE.get()
    if tape is None:
        raise ContractError("backward() needs the tape the loss was recorded on")
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    elif grad.shape != loss.shape:
        raise ContractError(f"seed gradient shape {grad.shape} != output shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss
    found = loss.is_leaf
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        found = True
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.is_leaf:
                leaves[key] = t
    if not found:
        raise ContractError("loss was not recorded on this tape")
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
