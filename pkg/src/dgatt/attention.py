"""Guidance-driven attention: feature pooling and attention refinement.

Pooling projects both streams to a common width C and combines them
per position: the dot variant multiplies the tanh projections elementwise,
the bilinear variant adds a third projection and tanh on top of the product.
Refinement maps the pooled features through a spatially shared dense layer,
a 1x1 convolution to one channel, and a softmax over the spatial positions,
yielding a strictly positive map that sums to one per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Dense, Initializer
from .tensor import ShapeError, Tensor


@dataclass
class PoolingConfig:
    mode: str = "dot"       # "dot" or "bilinear"
    pooled_channels: int = 64   # C
    shared_width: int = 256     # K

    def __post_init__(self):
        if self.mode not in ("dot", "bilinear"):
            raise ValueError(f"pooling mode must be dot or bilinear, got {self.mode!r}")
        if self.pooled_channels < 1 or self.shared_width < 1:
            raise ValueError("pooled_channels and shared_width must be >= 1")


def _check_spatial(f_rgb: Tensor, f_g: Tensor) -> None:
    if f_rgb.shape[:-1] != f_g.shape[:-1]:
        raise ShapeError(
            f"pooling inputs must share spatial extent, got {f_rgb.shape} and {f_g.shape}")


class FeaturePooling:
    """Projects both feature maps to C channels and pools them per position."""

    def __init__(self, cfg: PoolingConfig, rgb_channels: int, guidance_channels: int,
                 *, init: Initializer):
        self.cfg = cfg
        self.proj_rgb = Dense(rgb_channels, cfg.pooled_channels, activation="tanh", init=init)
        self.proj_guidance = Dense(guidance_channels, cfg.pooled_channels,
                                   activation="tanh", init=init)
        self.bilinear = (Dense(cfg.pooled_channels, cfg.pooled_channels,
                               activation="tanh", init=init)
                         if cfg.mode == "bilinear" else None)

    def __call__(self, f_rgb: Tensor, f_g: Tensor) -> Tensor:
        _check_spatial(f_rgb, f_g)
        pooled = T.mul(self.proj_rgb(f_rgb), self.proj_guidance(f_g))
        if self.bilinear is not None:
            pooled = self.bilinear(pooled)
        return pooled

    def parameters(self):
        out = [(f"proj_rgb.{n}", p) for n, p in self.proj_rgb.parameters()]
        out += [(f"proj_guidance.{n}", p) for n, p in self.proj_guidance.parameters()]
        if self.bilinear is not None:
            out += [(f"bilinear.{n}", p) for n, p in self.bilinear.parameters()]
        return out


def pool_dot(cfg: PoolingConfig, f_rgb: Tensor, f_g: Tensor,
             proj_rgb: Dense, proj_guidance: Dense) -> Tensor:
    """Per-position, per-channel product of the two tanh projections."""
    _check_spatial(f_rgb, f_g)
    return T.mul(proj_rgb(f_rgb), proj_guidance(f_g))


def pool_bilinear(cfg: PoolingConfig, f_rgb: Tensor, f_g: Tensor,
                  proj_rgb: Dense, proj_guidance: Dense, combine: Dense) -> Tensor:
    """tanh projection of the Hadamard-pooled features."""
    return combine(pool_dot(cfg, f_rgb, f_g, proj_rgb, proj_guidance))


class AttentionRefinement:
    """Shared dense layer + 1x1 conv + spatial softmax -> M x M x 1 map."""

    def __init__(self, cfg: PoolingConfig, *, init: Initializer):
        self.cfg = cfg
        self.shared = Dense(cfg.pooled_channels, cfg.shared_width, activation="tanh", init=init)
        self.conv1x1 = Conv2d(cfg.shared_width, 1, init=init, kernel=1)

    def __call__(self, pooled: Tensor) -> Tensor:
        if pooled.shape[-1] != self.cfg.pooled_channels:
            raise ShapeError(
                f"refinement expects {self.cfg.pooled_channels} channels, got {pooled.shape}")
        scores = self.conv1x1(self.shared(pooled))
        return spatial_softmax(scores)

    def parameters(self):
        out = [(f"shared.{n}", p) for n, p in self.shared.parameters()]
        out += [(f"conv1x1.{n}", p) for n, p in self.conv1x1.parameters()]
        return out


def spatial_softmax(scores: Tensor) -> Tensor:
    """Softmax over the M x M positions of an (..., M, M, 1) score map."""
    if scores.shape[-1] != 1:
        raise ShapeError(f"attention scores must have one channel, got {scores.shape}")
    m1, m2 = scores.shape[-3], scores.shape[-2]
    batched = scores.ndim == 4
    flat_shape = (scores.shape[0], m1 * m2) if batched else (m1 * m2,)
    flat = scores.reshape(flat_shape)
    weights = T.softmax(flat, axis=-1)
    return weights.reshape(scores.shape)


def attend(features: Tensor, weights: Tensor) -> Tensor:
    """Attention-weighted sum of a feature map over its spatial positions.

    features (..., M, M, C) with weights (..., M, M, 1) -> (..., C). With the
    weights summing to one this is a weighted average; a one-hot map selects
    the feature vector at the hot position exactly.
    """
    weighted = T.mul(features, weights)
    axes = (1, 2) if features.ndim == 4 else (0, 1)
    return weighted.sum(axis=axes)


def attention_stats(weights: Tensor) -> tuple[float, float]:
    """(max |sum - 1| per sample, min weight): the normalization invariants."""
    w = weights.data
    if w.ndim == 4:
        sums = w.sum(axis=(1, 2, 3))
    else:
        sums = w.sum()
    return float(np.max(np.abs(sums - 1.0))), float(w.min())
