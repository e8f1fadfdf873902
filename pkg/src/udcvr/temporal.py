"""Temporal branch: mines sharp evidence from neighboring frames.

Every frame passes through a shared feature extractor (strided conv,
one transformer block at the bottleneck, one conv).  Cross-frame window
attention then lets each reference-frame window query the same window
position in the neighbor frames: Q comes from the reference feature,
K and V from the neighbors, so the output is a per-window softmax blend
of neighbor information.

Three query/key/value wirings are selectable for ablations:

* ``neighbors_kv``     (default) - Q from reference, K/V from neighbors.
* ``ref_in_kv``        - Q from reference, K/V from all frames
                         including the reference.
* ``neighbors_only_q`` - Q, K and V all from neighbors; the per-frame
                         attention outputs are averaged.

A learnable per-frame bias added to the key inputs lets attention
distinguish neighbor distance; it starts at zero and is on by default.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import (
    Conv2dLayer,
    DownsampleConv,
    Latb,
    Module,
    WindowAttention,
    pad_to_multiple,
    window_merge,
    window_partition,
)
from .errors import ConfigurationError, ContractError
from .tensor import Tensor

__all__ = ["QKV_MODES", "TemporalExtractor", "TemporalAttention", "TemporalBranch"]

QKV_MODES = ("neighbors_kv", "ref_in_kv", "neighbors_only_q")


class TemporalExtractor(Module):
    """Per-frame feature extractor, weights shared across frames."""

    def __init__(self, channels: int, window: int, heads: int, mlp_ratio: float,
                 downsample: int, rng: np.random.Generator):
        self.down = DownsampleConv(3, channels, downsample, rng)
        self.latb = Latb(channels, window, heads, mlp_ratio, shift=False, rng=rng)
        self.out_conv = Conv2dLayer(channels, channels, 3, rng, stride=1, padding=1)

    def forward(self, frame: Tensor) -> Tensor:
        f = self.down.forward(frame)
        f = self.latb.forward(f)
        return self.out_conv.forward(f)


class TemporalAttention(Module):
    """Window-wise cross-frame attention producing the temporal feature."""

    def __init__(self, channels: int, window: int, heads: int, frames: int,
                 rng: np.random.Generator, mode: str = "neighbors_kv",
                 frame_bias: bool = True):
        if mode not in QKV_MODES:
            raise ConfigurationError(
                f"unknown temporal qkv mode {mode!r}; expected one of {QKV_MODES}"
            )
        self.attn = WindowAttention(channels, heads, rng)
        self.frame_bias = (
            [Tensor(np.zeros(channels), requires_grad=True) for _ in range(frames)]
            if frame_bias else None
        )
        self.window = window
        self.mode = mode
        self.frames = frames

    def named_params(self) -> dict[str, Tensor]:
        out = super().named_params()
        if self.frame_bias is not None and self.mode != "ref_in_kv":
            # the reference frame supplies no keys in the neighbor-only
            # modes, so its bias is not a live parameter
            out.pop(f"frame_bias{self.frames // 2}", None)
        return out

    def forward(self, features: list[Tensor], mode: str | None = None) -> Tensor:
        mode = self.mode if mode is None else mode
        if mode not in QKV_MODES:
            raise ConfigurationError(
                f"unknown temporal qkv mode {mode!r}; expected one of {QKV_MODES}"
            )
        k = len(features)
        if k != self.frames:
            raise ContractError(f"expected {self.frames} frame features, got {k}")
        shapes = {f.shape for f in features}
        if len(shapes) > 1:
            raise ContractError(f"inconsistent feature shapes: {sorted(shapes)}")
        ref = k // 2
        neighbors = [i for i in range(k) if i != ref]
        if not neighbors and mode != "ref_in_kv":
            raise ContractError(
                "temporal attention needs neighbor frames "
                f"(K={k}) unless mode is ref_in_kv"
            )
        _, h, w = features[0].shape
        m = self.window

        padded = [pad_to_multiple(f, m) for f in features]
        hp, wp = padded[0].shape[-2], padded[0].shape[-1]
        tokens = [window_partition(f, m) for f in padded]  # each [n, M_t^2, C]

        def keyed(i: int) -> Tensor:
            if self.frame_bias is None:
                return tokens[i]
            return T.add(tokens[i], self.frame_bias[i])

        kv_idx = list(range(k)) if mode == "ref_in_kv" else neighbors
        k_tokens = T.concat([keyed(i) for i in kv_idx], axis=1)
        v_tokens = T.concat([tokens[i] for i in kv_idx], axis=1)

        if mode == "neighbors_only_q":
            outs = [
                self.attn.forward_qkv(tokens[i], k_tokens, v_tokens)
                for i in neighbors
            ]
            acc = outs[0]
            for o in outs[1:]:
                acc = T.add(acc, o)
            merged_tokens = T.scale(acc, 1.0 / len(outs))
        else:
            merged_tokens = self.attn.forward_qkv(tokens[ref], k_tokens, v_tokens)

        out = window_merge(merged_tokens, hp, wp, m)
        if (hp, wp) != (h, w):
            out = T.crop_last2(out, h, w)
        return out


class TemporalBranch(Module):
    def __init__(self, channels: int, window: int, heads: int, mlp_ratio: float,
                 frames: int, downsample: int, rng: np.random.Generator,
                 mode: str = "neighbors_kv", frame_bias: bool = True):
        self.tfe = TemporalExtractor(channels, window, heads, mlp_ratio,
                                     downsample, rng)
        self.attn = TemporalAttention(channels, window, heads, frames, rng,
                                      mode=mode, frame_bias=frame_bias)

    def extract(self, frames: list[Tensor]) -> list[Tensor]:
        shapes = {f.shape for f in frames}
        if len(shapes) > 1:
            raise ContractError(f"inconsistent frame shapes: {sorted(shapes)}")
        return [self.tfe.forward(f) for f in frames]

    def forward(self, frames: list[Tensor], mode: str | None = None) -> Tensor:
        return self.attn.forward(self.extract(frames), mode=mode)
