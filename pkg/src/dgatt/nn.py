"""Trainable layers: dense projections and VGG-style convolution blocks.

Parameters are plain ``Tensor`` objects with ``requires_grad=True``; every
unit exposes ``parameters()`` as (name, tensor) pairs so the optimizer and
the checkpoint writer can address them by stable names.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class InitSpec:
    """Deterministic parameter initialization: same seed, same bits."""

    scheme: str = "uniform_fan_in"
    seed: int = 0
    sigma: float = 0.05

    def __post_init__(self):
        if self.scheme not in ("uniform_fan_in", "normal"):
            raise ValueError(f"unknown init scheme: {self.scheme!r}")


class Initializer:
    """Consumes one seeded RNG in build order; build order is fixed per config."""

    def __init__(self, spec: InitSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self._rng = np.random.Generator(np.random.PCG64(spec.seed))

    def weight(self, shape, fan_in: int) -> Tensor:
        if self.spec.scheme == "uniform_fan_in":
            bound = 1.0 / np.sqrt(fan_in)
            data = self._rng.uniform(-bound, bound, size=shape)
        else:
            data = self._rng.normal(0.0, self.spec.sigma, size=shape)
        return Tensor(data.astype(self.dtype), requires_grad=True)

    def bias(self, width: int) -> Tensor:
        return Tensor(np.zeros(width, dtype=self.dtype), requires_grad=True)


class Dense:
    """y = act(x W + b) along the last axis; leading axes are preserved."""

    def __init__(self, in_width: int, out_width: int, activation: str = "none",
                 *, init: Initializer):
        if in_width < 1 or out_width < 1:
            raise ValueError("dense widths must be positive")
        if activation not in ("none", "tanh", "softmax"):
            raise ValueError(f"unsupported dense activation: {activation!r}")
        self.in_width = in_width
        self.out_width = out_width
        self.activation = activation
        self.weight = init.weight((in_width, out_width), fan_in=in_width)
        self.bias = init.bias(out_width)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_width:
            raise ShapeError(
                f"dense expects trailing width {self.in_width}, got input shape {x.shape}")
        lead = x.shape[:-1]
        flat = x.reshape((-1, self.in_width)) if x.ndim != 2 else x
        y = T.add(T.matmul(flat, self.weight), self.bias)
        if lead and x.ndim != 2:
            y = y.reshape(lead + (self.out_width,))
        if self.activation == "tanh":
            y = T.tanh(y)
        elif self.activation == "softmax":
            y = T.softmax(y, axis=-1)
        return y

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def param_count(self) -> int:
        return self.in_width * self.out_width + self.out_width


class Conv2d:
    """Single 3x3 same-padded convolution layer."""

    def __init__(self, in_channels: int, out_channels: int, *, init: Initializer,
                 kernel: int = 3):
        if out_channels < 1:
            raise ValueError("conv needs at least one output channel")
        fan_in = kernel * kernel * in_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.kernels = init.weight((kernel, kernel, in_channels, out_channels), fan_in=fan_in)
        self.bias = init.bias(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernels, self.bias)

    def parameters(self):
        return [("kernels", self.kernels), ("bias", self.bias)]

    def param_count(self) -> int:
        k = self.kernel
        return k * k * self.in_channels * self.out_channels + self.out_channels


@dataclass
class ConvBlockSpec:
    out_channels: int
    convs: int = 2  # VGG-16 uses (2, 2, 3, 3, 3)


class ConvBlock:
    """convs x (3x3 conv + relu), then a 2x2 max pool: halves the extent once."""

    def __init__(self, in_channels: int, spec: ConvBlockSpec, *, init: Initializer):
        if spec.out_channels < 1:
            raise ValueError("block needs at least one channel")
        if not 1 <= spec.convs <= 3:
            raise ValueError("blocks carry 1-3 convolutions")
        self.spec = spec
        self.convs = []
        cin = in_channels
        for _ in range(spec.convs):
            self.convs.append(Conv2d(cin, spec.out_channels, init=init))
            cin = spec.out_channels

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = T.relu(conv(x))
        return T.maxpool2d(x, 2)

    def parameters(self):
        out = []
        for i, conv in enumerate(self.convs):
            for name, p in conv.parameters():
                out.append((f"conv{i}.{name}", p))
        return out

    def param_count(self) -> int:
        return sum(c.param_count() for c in self.convs)


def count_params(unit) -> int:
    """Exact scalar parameter count of a built unit, biases included."""
    return sum(int(p.size) for _, p in unit.parameters())


def conv_stack_param_count(in_channels: int, widths, convs_per_block) -> int:
    """Closed-form count for a stack of 3x3 conv blocks (no allocation)."""
    total = 0
    cin = in_channels
    for width, n in zip(widths, convs_per_block):
        for _ in range(n):
            total += 3 * 3 * cin * width + width
            cin = width
    return total


def dense_param_count(in_width: int, out_width: int) -> int:
    return in_width * out_width + out_width
