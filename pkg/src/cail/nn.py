"""Small parameter helpers shared by the model pieces."""
from __future__ import annotations

import numpy as np

from .diffcore import Tensor, add, matmul, relu


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros(rows: int, cols: int, name: str) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=True, name=name)


class MLP:
    """Fully connected relu stack; the last layer is linear."""

    def __init__(self, sizes, rng: np.random.Generator, name: str):
        self.weights = [glorot(rng, a, b, f"{name}.w{i}") for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]
        self.biases = [zeros(1, b, f"{name}.b{i}") for i, b in enumerate(sizes[1:])]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if frozen:
                w, b = Tensor(w.data), Tensor(b.data)
            x = add(matmul(x, w), b)
            if i < last:
                x = relu(x)
        return x
