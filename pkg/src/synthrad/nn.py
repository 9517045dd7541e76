"""Parameter containers and layers built on :mod:`synthrad.autodiff`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from synthrad import autodiff as ad
from synthrad.autodiff import Tensor
from synthrad.rng import Rng


class Module:
    """Base class; parameters are discovered from attributes in assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            yield from _walk(f"{prefix}{key}", val)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: stored shape {arr.shape}, model expects {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(name: str, val) -> Iterator[tuple[str, Tensor]]:
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(f"{name}.{i}", item)


def param(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


def he_normal(rng: Rng, shape: tuple[int, ...], fan_in: int, gain: float = math.sqrt(2.0)) -> np.ndarray:
    return rng.normal(shape) * np.float32(gain / math.sqrt(fan_in))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, gain: float = math.sqrt(2.0)):
        self.weight = param(he_normal(rng, (n_in, n_out), n_in, gain))
        self.bias = param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_bias(ad.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: Rng, gain: float = math.sqrt(2.0)):
        self.weight = param(he_normal(rng, (c_out, c_in, k, k), c_in * k * k, gain))
        self.bias = param(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int):
        if channels % groups:
            raise ValueError(f"{channels} channels do not split into {groups} groups")
        self.groups = groups
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.group_norm(x, self.gamma, self.beta, self.groups)


def flatten(x: Tensor) -> Tensor:
    return ad.reshape(x, (x.shape[0], -1))
