"""The full two-branch restoration model and its configuration.

The reference frame feeds the spatial branch, all K frames feed the
temporal branch, a fusion module merges the two C-channel feature maps,
and the reconstruction head upsamples the fused feature into a residual
added onto the reference frame.  Either branch can be dropped (with the
fusion skipped) for ablations; ``matched_single_branch_config`` grows
the surviving branch's block count so single- and two-branch models
compare at a similar parameter count.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigurationError, ContractError
from .fusion import FUSION_MODES, ReconstructionHead, make_fusion
from .spatial import SpatialBranch
from .temporal import QKV_MODES, TemporalBranch
from .blocks import Module
from .tensor import Tensor

__all__ = ["ModelConfig", "RestorationModel", "matched_single_branch_config"]

BRANCH_MODES = ("both", "spatial", "temporal")


@dataclass
class ModelConfig:
    channels: int = 32
    heads: int = 4
    window: int = 8          # spatial attention window M
    temporal_window: int = 4  # cross-frame attention window M_t
    frames: int = 5           # temporal context K = 2N+1
    blocks_pre: int = 2       # spatial-branch transformer blocks
    blocks_post: int = 2      # reconstruction transformer blocks
    mlp_ratio: float = 2.0
    downsample: int = 2       # feature-space reduction r
    fusion: str = "stfm"
    temporal_qkv: str = "neighbors_kv"
    frame_bias: bool = True
    branches: str = "both"

    def __post_init__(self):
        if self.channels < 1 or self.channels % self.heads:
            raise ConfigurationError(
                f"channels {self.channels} must be divisible by heads {self.heads}"
            )
        if self.frames < 1 or self.frames % 2 == 0:
            raise ConfigurationError(f"frames must be odd, got {self.frames}")
        if self.window < 1 or self.temporal_window < 1:
            raise ConfigurationError("window sizes must be positive")
        if self.downsample not in (1, 2):
            raise ConfigurationError(f"downsample must be 1 or 2, got {self.downsample}")
        if self.fusion not in FUSION_MODES:
            raise ConfigurationError(f"fusion must be one of {FUSION_MODES}")
        if self.temporal_qkv not in QKV_MODES:
            raise ConfigurationError(f"temporal_qkv must be one of {QKV_MODES}")
        if self.branches not in BRANCH_MODES:
            raise ConfigurationError(f"branches must be one of {BRANCH_MODES}")
        if self.blocks_pre < 0 or self.blocks_post < 0:
            raise ConfigurationError("block counts must be nonnegative")

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ("true" if v else "false") if isinstance(v, bool) else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.type == "bool" or isinstance(f.default, bool):
                kwargs[f.name] = raw.strip().lower() in ("true", "1", "yes")
            elif isinstance(f.default, int):
                kwargs[f.name] = int(raw)
            elif isinstance(f.default, float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


class RestorationModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c, h, ratio, r = cfg.channels, cfg.heads, cfg.mlp_ratio, cfg.downsample
        if cfg.branches in ("both", "spatial"):
            self.spatial = SpatialBranch(c, cfg.window, h, ratio,
                                         cfg.blocks_pre, r, rng)
        if cfg.branches in ("both", "temporal"):
            self.temporal = TemporalBranch(c, cfg.temporal_window, h, ratio,
                                           cfg.frames, r, rng,
                                           mode=cfg.temporal_qkv,
                                           frame_bias=cfg.frame_bias)
        if cfg.branches == "both":
            self.fusion = make_fusion(cfg.fusion, c, rng)
        self.recon = ReconstructionHead(c, cfg.window, h, ratio,
                                        cfg.blocks_post, r, rng)
        self.cfg = cfg

    def forward(self, frames: list[Tensor], clamp_output: bool = False) -> Tensor:
        cfg = self.cfg
        if len(frames) != cfg.frames:
            raise ContractError(
                f"model expects {cfg.frames} frames, got {len(frames)}"
            )
        shapes = {f.shape for f in frames}
        if len(shapes) > 1:
            raise ContractError(f"inconsistent frame shapes: {sorted(shapes)}")
        ref = frames[cfg.frames // 2]
        if cfg.branches == "spatial":
            feature = self.spatial.forward(ref)
        elif cfg.branches == "temporal":
            feature = self.temporal.forward(frames)
        else:
            feature = self.fusion.forward(
                self.spatial.forward(ref), self.temporal.forward(frames)
            )
        return self.recon.forward(feature, ref, clamp_output=clamp_output)


def matched_single_branch_config(cfg: ModelConfig, which: str) -> ModelConfig:
    """Single-branch variant of ``cfg`` with channel width grown until the
    parameter total reaches (without exceeding) the two-branch model's.

    Width scaling at fixed depth keeps the block structure and receptive
    field identical to the corresponding branch of the full model, so
    the comparison isolates what the removed branch contributed; growing
    depth instead would hand the single-branch model a different (and at
    this scale stronger) function class.  The baseline stays at or under
    the full model's budget -- an ablated model that out-budgets the
    original would no longer be a matched baseline.
    """
    if which not in ("spatial", "temporal"):
        raise ConfigurationError(f"which must be spatial or temporal, got {which!r}")
    rng = np.random.default_rng(0)
    target = RestorationModel(cfg, rng).param_count()
    best = None
    for extra in range(0, 12):
        trial = replace(cfg, branches=which,
                        channels=cfg.channels + extra * cfg.heads)
        count = RestorationModel(trial, rng).param_count()
        if count > target:
            break
        best = trial
    return best if best is not None else replace(cfg, branches=which)
