"""Dense float64 tensors with a tape-based reverse-mode autodiff."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class Tensor:
    """A float64 array plus an optional gradient slot.

    Feature maps are rank-4 ``(n, c, h, w)`` in row-major order; logits and
    weight matrices use lower ranks.
    """

    __slots__ = ("data", "grad", "_requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: Optional[np.ndarray] = None
        self._requires_grad = requires_grad

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def leaf(self) -> "Tensor":
        """A fresh gradient-tracking leaf sharing this tensor's values."""
        return Tensor(self.data, requires_grad=True)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named learnable tensor; ``trainable=False`` freezes it."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data)
        self.name = name
        self.trainable = trainable

    @property
    def requires_grad(self) -> bool:
        return self.trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass
class Node:
    op: str
    inputs: Sequence[Tensor]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable ops executed while the tape is active."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, op, inputs, output, backward) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_ACTIVE: list = []


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` and log the op if any input needs a gradient."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g.reshape(t.shape)


def backward(loss: Tensor, tape: Tape) -> None:
    """Replay ``tape`` in reverse, accumulating d(loss)/d(t) into ``t.grad``.

    Tensors never reached keep ``grad is None``.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    _accumulate(loss, np.ones(loss.shape))
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is not None and t.requires_grad:
                _accumulate(t, gi)
