"""Parameter holders for the three affine layer kinds the model uses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


@dataclass
class Conv1x1:
    weight: Parameter  # (c_out, c_in)
    bias: Parameter  # (c_out,)

    @classmethod
    def create(cls, name: str, c_in: int, c_out: int, rng=None) -> "Conv1x1":
        w = he_normal(rng, (c_out, c_in), c_in) if rng is not None else np.zeros((c_out, c_in))
        return cls(Parameter(w, f"{name}.weight"), Parameter(np.zeros(c_out), f"{name}.bias"))

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1x1(x, self.weight, self.bias)


@dataclass
class Conv3x3:
    weight: Parameter  # (c_out, c_in, 3, 3)
    bias: Parameter

    @classmethod
    def create(cls, name: str, c_in: int, c_out: int, rng=None) -> "Conv3x3":
        shape = (c_out, c_in, 3, 3)
        w = he_normal(rng, shape, 9 * c_in) if rng is not None else np.zeros(shape)
        return cls(Parameter(w, f"{name}.weight"), Parameter(np.zeros(c_out), f"{name}.bias"))

    def parameters(self) -> list:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3x3(x, self.weight, self.bias)


@dataclass
class Linear:
    weight: Parameter  # (n_out, d)
    bias: Parameter

    @classmethod
    def create(cls, name: str, d: int, n_out: int, rng=None, std: float = 0.01) -> "Linear":
        w = rng.standard_normal((n_out, d)) * std if rng is not None else np.zeros((n_out, d))
        return cls(Parameter(w, f"{name}.weight"), Parameter(np.zeros(n_out), f"{name}.bias"))

    def parameters(self) -> list:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)
