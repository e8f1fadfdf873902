"""Branch fusion and frame reconstruction.

The default fusion is a channel-attention module: the two C-channel
branch features are concatenated to 2C channels, squeezed by global
average pooling, passed through a fully connected layer and a sigmoid
to produce a per-channel gate in (0,1), multiplied back onto the
feature, added residually (still at 2C), and reduced to C channels by
a 1x1 convolution.  Two simpler fusions (concat+1x1, elementwise add)
are available for ablations.

Reconstruction runs trailing transformer blocks, projects to 3*r^2
channels with a zero-initialized 3x3 convolution, pixel-shuffles back
to full resolution, and adds the reference frame, so the untrained
network is exactly the identity.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import Conv2dLayer, Latb, Module, global_avg_pool
from .errors import ConfigurationError, ContractError
from .tensor import Tensor

__all__ = ["FUSION_MODES", "Stfm", "ConcatFusion", "AddFusion",
           "make_fusion", "ReconstructionHead"]

FUSION_MODES = ("stfm", "concat", "add")


def _check_same_shape(s: Tensor, t: Tensor) -> None:
    if s.shape != t.shape:
        raise ContractError(
            f"branch features disagree: spatial {s.shape} vs temporal {t.shape}"
        )


def _sum_init(reduce: Conv2dLayer, channels: int,
              rng: np.random.Generator) -> None:
    """Start a 2C->C reduction as the sum of the two branch features.

    A plain He init mixes the branches with random +-0.2 weights that
    training first has to unlearn, and it also halves the gradient
    magnitude reaching each branch compared with a plain elementwise
    add.  Starting at the summing map (plus a little noise for symmetry
    breaking) means every fusion mode begins from the same function with
    the same branch gradient scale, so differences that emerge are down
    to expressiveness, not initialization luck.
    """
    w = rng.normal(0.0, 0.02, reduce.weight.shape)
    idx = np.arange(channels)
    w[idx, idx, 0, 0] += 1.0
    w[idx, channels + idx, 0, 0] += 1.0
    reduce.weight = Tensor(w, requires_grad=True)


class Stfm(Module):
    """Channel-attention fusion of the spatial and temporal features."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.fc_w = Tensor(rng.normal(0.0, 0.02, (2 * channels, 2 * channels)),
                           requires_grad=True)
        self.fc_b = Tensor(np.zeros(2 * channels), requires_grad=True)
        self.reduce = Conv2dLayer(2 * channels, channels, 1, rng)
        _sum_init(self.reduce, channels, rng)
        self.channels = channels

    def gate(self, f: Tensor) -> Tensor:
        """Per-channel weights in (0,1) from pooled features."""
        pooled = T.reshape(global_avg_pool(f), (1, 2 * self.channels))
        return T.sigmoid(T.add(T.matmul(pooled, self.fc_w), self.fc_b))

    def forward(self, s: Tensor, t: Tensor) -> Tensor:
        _check_same_shape(s, t)
        f = T.concat([s, t], axis=0)  # [2C, H', W']
        w = T.reshape(self.gate(f), (2 * self.channels, 1, 1))
        g = T.add(T.mul(f, w), f)  # residual kept at 2C width
        return self.reduce.forward(g)


class ConcatFusion(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.reduce = Conv2dLayer(2 * channels, channels, 1, rng)
        _sum_init(self.reduce, channels, rng)

    def forward(self, s: Tensor, t: Tensor) -> Tensor:
        _check_same_shape(s, t)
        return self.reduce.forward(T.concat([s, t], axis=0))


class AddFusion(Module):
    def forward(self, s: Tensor, t: Tensor) -> Tensor:
        _check_same_shape(s, t)
        return T.add(s, t)


def make_fusion(mode: str, channels: int, rng: np.random.Generator) -> Module:
    if mode == "stfm":
        return Stfm(channels, rng)
    if mode == "concat":
        return ConcatFusion(channels, rng)
    if mode == "add":
        return AddFusion()
    raise ConfigurationError(
        f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}"
    )


class ReconstructionHead(Module):
    """Trailing blocks + sub-pixel upsampling + global residual."""

    def __init__(self, channels: int, window: int, heads: int, mlp_ratio: float,
                 blocks_post: int, upsample: int, rng: np.random.Generator):
        self.latb = [
            Latb(channels, window, heads, mlp_ratio, shift=bool(i % 2), rng=rng)
            for i in range(blocks_post)
        ]
        self.head = Conv2dLayer(channels, 3 * upsample * upsample, 3, rng,
                                stride=1, padding=1, zero_init=True)
        self.r = upsample

    def forward(self, feature: Tensor, ref_frame: Tensor,
                clamp_output: bool = False) -> Tensor:
        _, h, w = ref_frame.shape
        f = feature
        for block in self.latb:
            f = block.forward(f)
        y = T.pixel_shuffle(self.head.forward(f), self.r)
        if y.shape[-2] < h or y.shape[-1] < w:
            raise ContractError(
                f"upsampled residual {y.shape} smaller than frame {ref_frame.shape}"
            )
        if y.shape[-2:] != (h, w):
            y = T.crop_last2(y, h, w)
        out = T.add(y, ref_frame)
        return T.clamp(out, 0.0, 1.0) if clamp_output else out
