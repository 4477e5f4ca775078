"""Small parameterized layers shared by the relation operators and heads."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .optim import Parameter
from .tensor import Tensor


class Conv2d:
    """Stride-1 conv with He-normal init; `zero_init` makes it emit zeros."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 name: str, zero_init: bool = False):
        if zero_init:
            w = np.zeros((c_out, c_in, kernel, kernel))
        else:
            std = np.sqrt(2.0 / (c_in * kernel * kernel))
            w = rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel))
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias")

    @classmethod
    def identity(cls, channels: int, kernel: int, rng: np.random.Generator,
                 name: str) -> "Conv2d":
        """Init so the layer passes its input through unchanged."""
        layer = cls(channels, channels, kernel, rng, name, zero_init=True)
        mid = kernel // 2
        w = layer.weight.data
        for c in range(channels):
            w[c, c, mid, mid] = 1.0
        return layer

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight.tensor, self.bias.tensor)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str,
                 zero_init: bool = False, identity_init: bool = False):
        if identity_init:
            if d_in != d_out:
                raise ValueError("identity init needs square weight")
            w = np.eye(d_out)
        elif zero_init:
            w = np.zeros((d_out, d_in))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_out, d_in))
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight.tensor, self.bias.tensor)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class ChannelNorm:
    """Layer norm over the channel axis per spatial location, with a learned
    per-channel affine (gain=1, bias=0 at init)."""

    def __init__(self, channels: int, name: str, eps: float = 1e-5):
        self.gain = Parameter(np.ones(channels), f"{name}.gain")
        self.bias = Parameter(np.zeros(channels), f"{name}.bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        axis = x.ndim - 3
        normed = T.layer_norm(x, axis, eps=self.eps)
        shape = (x.shape[axis],) + (1,) * (x.ndim - axis - 1)
        g = T.reshape(self.gain.tensor, shape)
        b = T.reshape(self.bias.tensor, shape)
        return T.add(T.mul(normed, g), b)

    def parameters(self) -> list[Parameter]:
        return [self.gain, self.bias]
