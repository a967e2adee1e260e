"""Parameter containers: linear maps, convolutions and a learned stride-2 projection."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from .tensor import Tensor, ShapeError, conv2d, pad_edge_even, _windows2

INIT_SCHEMES = ("kaiming", "zeros")


def kaiming(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Base class; parameters are found by walking attributes in definition order."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class LinearMap(Module):
    """y = x @ W (+ b) applied over the last axis.

    ``weight`` has shape (c_in, c_out), so it matches the projection matrices
    written as R^{C x C'}.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = False,
                 init_scheme: str = "kaiming"):
        if init_scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {init_scheme!r}")
        w = kaiming(rng, (c_in, c_out), c_in) if init_scheme == "kaiming" else np.zeros((c_in, c_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.c_in, self.c_out = c_in, c_out
        self.init_scheme = init_scheme

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.c_in:
            raise ShapeError(f"LinearMap expects last dim {self.c_in}, got shape {x.shape}")
        lead = x.shape[:-1]
        y = x.reshape(-1, self.c_in) @ self.weight if x.ndim != 2 else x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(*lead, self.c_out) if x.ndim != 2 else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True):
        self.weight = Tensor(kaiming(rng, (kernel, kernel, c_in, c_out), kernel * kernel * c_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class StridedProjection(Module):
    """Learned 2x2, stride-2 projection C -> C (the ``linear_proj2`` downsampler).

    Odd spatial sizes are edge-padded first, so the output is ceil(s/2) per axis.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.proj = LinearMap(4 * channels, channels, rng)

    def __call__(self, t: Tensor) -> Tensor:
        return self.proj(_windows2(pad_edge_even(t)))
