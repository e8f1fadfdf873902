"""Spatial branch: restores detail from the reference frame alone.

A strided 3x3 convolution (the shallow feature extractor) maps the RGB
reference frame to C channels at 1/r resolution, then a stack of
local-aware transformer blocks with alternating window shifts refines
the feature map.
"""

from __future__ import annotations

import numpy as np

from .blocks import DownsampleConv, Latb, Module
from .tensor import Tensor

__all__ = ["SpatialBranch"]


class SpatialBranch(Module):
    def __init__(self, channels: int, window: int, heads: int, mlp_ratio: float,
                 blocks_pre: int, downsample: int, rng: np.random.Generator):
        self.sfe = DownsampleConv(3, channels, downsample, rng)
        self.latb = [
            Latb(channels, window, heads, mlp_ratio, shift=bool(i % 2), rng=rng)
            for i in range(blocks_pre)
        ]

    def forward(self, ref_frame: Tensor) -> Tensor:
        """3 x H x W reference frame -> C x ceil(H/r) x ceil(W/r) feature."""
        s = self.sfe.forward(ref_frame)
        for block in self.latb:
            s = block.forward(s)
        return s
