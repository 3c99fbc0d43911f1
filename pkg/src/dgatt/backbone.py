"""Dual-stream convolutional feature extractor.

The RGB stream is a stack of VGG-style blocks whose last output is the RGB
feature map (M x M x phi). The guidance stream (depth, thermal, or any
co-registered single-channel raster) runs its own identically shaped stack;
the output of *every* block is average-pooled down to M x M and concatenated
along channels, giving an M x M x V map with V = sum of the block widths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ConvBlock, ConvBlockSpec, Initializer
from .tensor import ShapeError, Tensor

FULL_SCALE_WIDTHS = (64, 128, 256, 512, 512)
FULL_SCALE_CONVS = (2, 2, 3, 3, 3)


@dataclass
class BackboneConfig:
    input_extent: int = 224
    rgb_channels: int = 3
    guidance_channels: int = 1
    block_widths: tuple[int, ...] = FULL_SCALE_WIDTHS
    convs_per_block: tuple[int, ...] = FULL_SCALE_CONVS

    def __post_init__(self):
        self.block_widths = tuple(self.block_widths)
        self.convs_per_block = tuple(self.convs_per_block)
        if len(self.block_widths) != len(self.convs_per_block):
            raise ValueError("block_widths and convs_per_block must have equal length")
        if self.input_extent % (2 ** len(self.block_widths)) != 0:
            raise ValueError(
                f"input extent {self.input_extent} not divisible by 2^{len(self.block_widths)}")
        if self.guidance_channels < 1:
            raise ValueError("guidance stream needs at least one channel")

    @property
    def blocks(self) -> int:
        return len(self.block_widths)

    @property
    def feature_extent(self) -> int:
        """M: spatial extent shared by both streams' outputs."""
        return self.input_extent // (2 ** self.blocks)

    @property
    def rgb_feature_channels(self) -> int:
        """phi: channel count of the last RGB block."""
        return self.block_widths[-1]

    @property
    def guidance_feature_channels(self) -> int:
        """V: channels of the concatenated multi-block guidance map."""
        return sum(self.block_widths)


def feature_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, int, int]]:
    """Output shapes of both streams, by pure arithmetic (nothing allocated)."""
    m = cfg.feature_extent
    return {
        "f_rgb": (m, m, cfg.rgb_feature_channels),
        "f_guidance": (m, m, cfg.guidance_feature_channels),
    }


class Stream:
    """One stack of conv blocks over a fixed-extent square input."""

    def __init__(self, cfg: BackboneConfig, in_channels: int, *, init: Initializer):
        self.cfg = cfg
        self.in_channels = in_channels
        self.blocks = []
        cin = in_channels
        for width, n in zip(cfg.block_widths, cfg.convs_per_block):
            self.blocks.append(ConvBlock(cin, ConvBlockSpec(width, convs=n), init=init))
            cin = width

    def _check_input(self, image: Tensor) -> None:
        spatial = image.shape[-3:-1]
        want = (self.cfg.input_extent, self.cfg.input_extent)
        if spatial != want:
            raise ShapeError(f"input extent {spatial} does not match configured {want}")
        if image.shape[-1] != self.in_channels:
            raise ShapeError(
                f"input has {image.shape[-1]} channels, stream expects {self.in_channels}")

    def block_outputs(self, image: Tensor) -> list[Tensor]:
        self._check_input(image)
        outs = []
        x = image
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return outs

    def parameters(self):
        out = []
        for i, block in enumerate(self.blocks):
            for name, p in block.parameters():
                out.append((f"block{i}.{name}", p))
        return out


class Backbone:
    """RGB stream + guidance stream with independent parameters."""

    def __init__(self, cfg: BackboneConfig, *, init: Initializer, with_guidance: bool = True):
        self.cfg = cfg
        self.rgb = Stream(cfg, cfg.rgb_channels, init=init)
        self.guidance = Stream(cfg, cfg.guidance_channels, init=init) if with_guidance else None

    def extract_rgb(self, image: Tensor) -> Tensor:
        """Last-block output of the RGB stream: M x M x phi."""
        return self.rgb.block_outputs(image)[-1]

    def extract_guidance(self, image: Tensor) -> Tensor:
        """Every block output pooled to M x M, concatenated: M x M x V."""
        if self.guidance is None:
            raise RuntimeError("backbone was built without a guidance stream")
        outs = self.guidance.block_outputs(image)
        m = self.cfg.feature_extent
        pooled = []
        for out in outs:
            extent = out.shape[-3]
            pooled.append(T.avgpool2d(out, extent // m))
        return T.concat(pooled, axis=-1)

    def extract_pair(self, rgb: Tensor, guidance: Tensor,
                     keep_rgb_blocks: bool = False):
        """Both feature maps at once; optionally the RGB per-block outputs too."""
        rgb_outs = self.rgb.block_outputs(rgb)
        f_g = self.extract_guidance(guidance)
        if keep_rgb_blocks:
            return rgb_outs[-1], f_g, rgb_outs
        return rgb_outs[-1], f_g, None

    def parameters(self):
        out = [(f"rgb.{n}", p) for n, p in self.rgb.parameters()]
        if self.guidance is not None:
            out += [(f"guidance.{n}", p) for n, p in self.guidance.parameters()]
        return out
