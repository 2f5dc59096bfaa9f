"""Parameter containers and the small set of layers the network is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class; parameters are discovered by walking attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(values: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 std: float = 0.02):
        self.weight = _param(rng.normal(0.0, std, (d_in, d_out)), dtype)
        self.bias = _param(np.zeros(d_out), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    """He-initialized convolution with optional bias."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True, dtype=np.float32):
        std = np.sqrt(2.0 / (c_in * kernel * kernel))
        self.weight = _param(rng.normal(0.0, std, (c_out, c_in, kernel, kernel)), dtype)
        self.bias = _param(np.zeros(c_out), dtype) if bias else None
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = _param(np.ones(d), dtype)
        self.beta = _param(np.zeros(d), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)
        self.groups = groups
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta, self.eps)


def norm_groups(channels: int, preferred: int = 8) -> int:
    """Largest group count <= ``preferred`` that divides ``channels``."""
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1
