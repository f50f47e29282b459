"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, get_dtype


def parameter(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=get_dtype()), requires_grad=True)


class Module:
    """Parameter discovery over attributes, in attribute-definition order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _init(rng, shape, fan_in):
    if rng is None:
        # shape-only construction (calloc keeps untouched pages free)
        return np.zeros(shape, dtype=get_dtype())
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = parameter(_init(rng, (d_in, d_out), d_in))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num, dim, rng):
        self.table = parameter(_init(rng, (num, dim), 1.0))

    def __call__(self, ids):
        return ops.embedding(self.table, ids)


class LSTMCell(Module):
    """Single LSTM layer; gates packed as [input, forget, cell, output]."""

    def __init__(self, d_in, hidden, rng):
        self.hidden = hidden
        self.w_x = parameter(_init(rng, (d_in, 4 * hidden), d_in))
        self.w_h = parameter(_init(rng, (hidden, 4 * hidden), hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget-gate bias
        self.bias = parameter(b)

    def project_inputs(self, x):
        return ops.matmul(x, self.w_x) + self.bias

    def step(self, xw, h, c):
        """One step given the precomputed input projection ``xw``."""
        H = self.hidden
        z = xw + ops.matmul(h, self.w_h)
        i = ops.sigmoid(z[..., :H])
        f = ops.sigmoid(z[..., H:2 * H])
        g = ops.tanh(z[..., 2 * H:3 * H])
        o = ops.sigmoid(z[..., 3 * H:])
        c = f * c + i * g
        h = o * ops.tanh(c)
        return h, c
