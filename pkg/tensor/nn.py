"""Parameterised layers built on the tensor primitives."""

from __future__ import annotations

import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from exceptions import ConfigurationError, DimensionError
from tensor.core import Tensor, default_dtype, getitem
from tensor.ops import convolve, group_norm, matmul

logger = logging.getLogger(__name__)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def parameter(values, name: Optional[str] = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


class Module:
    """Container that discovers parameters and sub-modules from its attributes.

    Lists of modules are walked in order, so names such as ``blocks.0.qkv.weight``
    are stable across runs. A parameter shared by several sub-modules is
    reported once, under the first name it is reached by.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        seen = set()
        for attr, value in vars(self).items():
            for name, p in _walk(value, f"{prefix}{attr}"):
                if id(p) not in seen:
                    seen.add(id(p))
                    yield name, p

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def cast(self) -> "Module":
        """Re-cast every parameter to the current global precision."""
        for p in self.parameters():
            p.values = p.values.astype(default_dtype())
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigurationError(
                f"checkpoint does not match model: missing={missing[:5]} unexpected={unexpected[:5]}"
            )
        for name, p in own.items():
            values = np.asarray(state[name])
            if values.shape != p.shape:
                raise DimensionError(f"parameter {name}: checkpoint shape {values.shape} != model shape {p.shape}")
            p.values = values.astype(default_dtype())


def _walk(value, name: str) -> Iterator[Tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero_init: bool = False):
        shape = (in_features, out_features)
        self.weight = parameter(np.zeros(shape) if zero_init else uniform_init(rng, shape, in_features))
        self.bias = parameter(np.zeros(out_features) if zero_init else uniform_init(rng, out_features, in_features))

    def forward(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"Linear expects {self.weight.shape[0]} input features, got shape {x.shape}")
        if x.ndim == 1:
            return matmul(x.reshape(1, -1), self.weight).reshape(-1) + self.bias
        return matmul(x, self.weight) + self.bias


class Conv(Module):
    """Same-padded channels-last convolution of rank 2 or 3."""

    def __init__(
        self,
        rank: int,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        zero_init: bool = False,
    ):
        if kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd for same padding, got {kernel_size}")
        self.rank = rank
        self.stride = stride
        self.padding = kernel_size // 2
        shape = (kernel_size,) * rank + (in_channels, out_channels)
        fan_in = in_channels * kernel_size**rank
        self.weight = parameter(np.zeros(shape) if zero_init else uniform_init(rng, shape, fan_in))
        self.bias = parameter(np.zeros(out_channels) if zero_init else uniform_init(rng, out_channels, fan_in))

    def forward(self, x):
        return convolve(x, self.weight, rank=self.rank, stride=self.stride, padding=self.padding, bias=self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        if groups <= 0 or channels % groups:
            raise ConfigurationError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.weight = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))

    def forward(self, x):
        return group_norm(x, self.groups, self.eps, weight=self.weight, bias=self.bias)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        self.table = parameter(rng.uniform(-1.0, 1.0, size=(num_embeddings, dim)))

    @property
    def num_embeddings(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def forward(self, ids: np.ndarray):
        return getitem(self.table, np.asarray(ids, dtype=np.int64))
