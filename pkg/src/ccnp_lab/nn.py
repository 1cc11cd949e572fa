"""Layers built on the tensor core: linear maps, ReLU MLPs, multi-head attention.

Each layer draws its initial weights from a generator derived from
``(seed, dotted module path)``, so two architectures that share a submodule
path also share that submodule's initial weights.
"""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_rng(seed: int, path: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(path.encode())])


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
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
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    """``y = x W + b`` with W ~ U(-sqrt(3 g / fan_in), sqrt(3 g / fan_in)) and zero bias.

    ``gain`` g = 2 (He) for layers followed by a ReLU keeps the activation
    variance constant through deep stacks; g = 1 (LeCun) for linear outputs.
    """

    def __init__(self, fan_in: int, fan_out: int, seed: int, path: str, gain: float = 1.0):
        rng = init_rng(seed, path)
        bound = np.sqrt(3.0 * gain / fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class MLP(Module):
    """Stack of linear layers with ReLU between them (and optionally after the last)."""

    def __init__(self, sizes: list[int], seed: int, path: str, final_relu: bool = False):
        last = len(sizes) - 2
        self.layers = [
            Linear(sizes[i], sizes[i + 1], seed, f"{path}.{i}", gain=2.0 if i < last or final_relu else 1.0)
            for i in range(len(sizes) - 1)
        ]
        self.final_relu = final_relu

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_relu:
                x = T.relu(x)
        return x


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over padded sets.

    Operates on ``(S, n, d)`` inputs where ``S`` indexes independent sets and
    ``mask`` is an additive ``(S, heads, n, n)`` array that blocks padded keys.
    Scores are scaled by ``1/sqrt(d)`` with ``d`` the full model width.
    """

    def __init__(self, width: int, heads: int, seed: int, path: str):
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.query = Linear(width, width, seed, f"{path}.query")
        self.key = Linear(width, width, seed, f"{path}.key")
        self.value = Linear(width, width, seed, f"{path}.value")
        self.fuse = Linear(width, width, seed, f"{path}.fuse")

    def _split(self, t: Tensor) -> Tensor:
        s, n, _ = t.shape
        return T.transpose(T.reshape(t, (s, n, self.heads, self.width // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        s, n, d = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(x))
        v = self._split(self.value(x))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
        attn = T.softmax(T.add(scores, mask), axis=-1)
        out = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (s, n, d))
        return self.fuse(out)
