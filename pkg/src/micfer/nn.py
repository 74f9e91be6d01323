"""Layers built from tensor primitives.

Weights are Glorot-uniform, biases zero, all drawn from an explicit generator.
A module exposes ``named_parameters()`` as an ordered ``{name: Tensor}`` dict.
"""
from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class Module:
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                out[key] = val
            elif isinstance(val, Module):
                for sub, p in val.named_parameters().items():
                    out[f"{key}.{sub}"] = p
            elif isinstance(val, list) and val and all(isinstance(v, Module) for v in val):
                for i, m in enumerate(val):
                    for sub, p in m.named_parameters().items():
                        out[f"{key}.{i}.{sub}"] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.w = Tensor(glorot(rng, (n_in, n_out), n_in, n_out), requires_grad=True, name="w")
        self.b = Tensor(np.zeros(n_out), requires_grad=True, name="b")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        self.w = Tensor(glorot(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k),
                        requires_grad=True, name="w")
        self.b = Tensor(np.zeros((1, c_out, 1, 1)), requires_grad=True, name="b")
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, stride=self.stride, padding=self.padding) + self.b


class MLP(Module):
    """Fully connected stack with relu between layers and a linear last layer."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class LSTM(Module):
    """Single-layer LSTM; gate order in the packed weights is input, forget, cell, output."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.w = Tensor(glorot(rng, (n_in + hidden, 4 * hidden), n_in + hidden, 4 * hidden),
                        requires_grad=True, name="w")
        self.b = Tensor(np.zeros(4 * hidden), requires_grad=True, name="b")

    def __call__(self, xs: Tensor, lengths: np.ndarray | None = None) -> Tensor:
        """Final hidden state for a ``(n, steps, n_in)`` batch.

        ``lengths`` freezes each row's state after its own last step, so
        padding past a declared length never reaches the output.
        """
        n, steps, _ = xs.shape
        hd = self.hidden
        h = Tensor(np.zeros((n, hd)))
        c = Tensor(np.zeros((n, hd)))
        for t in range(steps):
            z = T.concat([xs[:, t, :], h], axis=1) @ self.w + self.b
            i = T.sigmoid(z[:, :hd])
            f = T.sigmoid(z[:, hd:2 * hd])
            g = T.tanh(z[:, 2 * hd:3 * hd])
            o = T.sigmoid(z[:, 3 * hd:])
            c_new = f * c + i * g
            h_new = o * T.tanh(c_new)
            if lengths is not None and np.any(lengths <= t):
                keep = (np.asarray(lengths) > t).astype(np.float64)[:, None]
                c_new = c_new * keep + c * (1.0 - keep)
                h_new = h_new * keep + h * (1.0 - keep)
            h, c = h_new, c_new
        return h
