"""Building blocks shared by both restoration branches.

Contains the parameter-owning layer classes (linear, conv, layer norm),
window partition/merge for non-overlapping M x M attention windows, the
multi-head attention core, and the local-aware transformer block (LATB):

    X'  = MHSA(LN(X + PE)) + X
    X'' = FFN(LN(X')) + X'

where PE is a learnable per-window-slot position embedding shared across
windows, MHSA is window-local multi-head self-attention, and the FFN is
two fully connected layers each followed by a GELU.  Blocks alternate a
cyclic half-window shift of the feature map so information propagates
across window borders.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeMismatchError
from .tensor import Tensor

__all__ = [
    "Module",
    "Linear",
    "Conv2dLayer",
    "DownsampleConv",
    "LayerNormLayer",
    "WindowAttention",
    "FeedForward",
    "Latb",
    "window_partition",
    "window_merge",
    "pad_to_multiple",
    "attend",
    "global_avg_pool",
]


class Module:
    """Base class providing path-addressable parameter discovery."""

    def named_params(self) -> dict[str, Tensor]:
        """All trainable tensors reachable from this module, keyed by path."""
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[name] = val
            elif isinstance(val, Module):
                for key, p in val.named_params().items():
                    out[f"{name}.{key}"] = p
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for key, p in item.named_params().items():
                            out[f"{name}{i}.{key}"] = p
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}{i}"] = item
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def param_count(self) -> int:
        return sum(p.size for p in self.params())


class Linear(Module):
    """y = x @ weight + bias over the last axis."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(rng.normal(0.0, 0.02, (in_features, out_features)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class Conv2dLayer(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((cout, cin, k, k))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * k * k)), (cout, cin, k, k))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding)


class DownsampleConv(Module):
    """3x3 stride-r convolution mapping H x W to ceil(H/r) x ceil(W/r).

    The strict convolution contract requires an integral output size, so
    inputs whose padded extent does not stride evenly are reflect-padded
    at the bottom/right and the output is cropped back to ceil(H/r).
    """

    def __init__(self, cin: int, cout: int, r: int, rng: np.random.Generator):
        if r not in (1, 2):
            raise ConfigurationError(f"downsample factor must be 1 or 2, got {r}")
        self.conv = Conv2dLayer(cin, cout, 3, rng, stride=r, padding=1)
        self.r = r

    def forward(self, x: Tensor) -> Tensor:
        _, h, w = x.shape
        r = self.r
        ph = (-(h + 2 - 3)) % r
        pw = (-(w + 2 - 3)) % r
        if ph or pw:
            x = T.pad_end2d(x, ph, pw, "reflect")
        y = self.conv.forward(x)
        ho, wo = -(-h // r), -(-w // r)
        if y.shape[-2:] != (ho, wo):
            y = T.crop_last2(y, ho, wo)
        return y


class LayerNormLayer(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


def window_partition(x: Tensor, m: int) -> Tensor:
    """C x H x W -> n x M^2 x C with n = (H/M)*(W/M) non-overlapping windows."""
    c, h, w = x.shape
    if h % m or w % m:
        raise ShapeMismatchError(
            f"spatial size {h}x{w} not divisible by window {m}"
        )
    t = T.reshape(x, (c, h // m, m, w // m, m))
    t = T.permute(t, (1, 3, 2, 4, 0))  # [H/M, W/M, M, M, C]
    return T.reshape(t, ((h // m) * (w // m), m * m, c))


def window_merge(windows: Tensor, h: int, w: int, m: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    n, m2, c = windows.shape
    if m2 != m * m or n != (h // m) * (w // m):
        raise ShapeMismatchError(
            f"window tensor {windows.shape} inconsistent with {h}x{w}, M={m}"
        )
    t = T.reshape(windows, (h // m, w // m, m, m, c))
    t = T.permute(t, (4, 0, 2, 1, 3))  # [C, H/M, M, W/M, M]
    return T.reshape(t, (c, h, w))


def pad_to_multiple(x: Tensor, m: int) -> Tensor:
    """Reflect-pad the two trailing axes up to the next multiple of m."""
    h, w = x.shape[-2], x.shape[-1]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if (ph < h and pw < w) else "edge"
    return T.pad_end2d(x, ph, pw, mode)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, length, c = x.shape
    return T.permute(T.reshape(x, (n, length, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    n, heads, length, d = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (n, length, heads * d))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int,
           return_weights: bool = False):
    """Scaled dot-product attention: softmax(Q K^T / sqrt(d)) V per head.

    q is [n, Lq, C]; k and v are [n, Lk, C].  Returns [n, Lq, C].
    """
    c = q.shape[-1]
    d = c // heads
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    logits = T.scale(T.matmul(qh, T.swap_last2(kh)), 1.0 / np.sqrt(d))
    weights = T.softmax(logits)
    out = _merge_heads(T.matmul(weights, vh))
    if return_weights:
        return out, weights
    return out


class WindowAttention(Module):
    """Multi-head attention with bias-free C x C projections.

    Self-attention when called with one argument; cross-attention when
    key/value tokens are supplied separately (the temporal branch queries
    reference-window tokens against neighbor-window tokens).
    """

    def __init__(self, c: int, heads: int, rng: np.random.Generator):
        if c % heads:
            raise ConfigurationError(
                f"channels {c} not divisible by heads {heads}"
            )
        self.w_q = Tensor(rng.normal(0.0, 0.02, (c, c)), requires_grad=True)
        self.w_k = Tensor(rng.normal(0.0, 0.02, (c, c)), requires_grad=True)
        self.w_v = Tensor(rng.normal(0.0, 0.02, (c, c)), requires_grad=True)
        self.w_o = Tensor(rng.normal(0.0, 0.02, (c, c)), requires_grad=True)
        self.heads = heads

    def forward_qkv(self, q_tokens: Tensor, k_tokens: Tensor, v_tokens: Tensor,
                    return_weights: bool = False):
        q = T.matmul(q_tokens, self.w_q)
        k = T.matmul(k_tokens, self.w_k)
        v = T.matmul(v_tokens, self.w_v)
        res = attend(q, k, v, self.heads, return_weights=return_weights)
        if return_weights:
            out, weights = res
            return T.matmul(out, self.w_o), weights
        return T.matmul(res, self.w_o)

    def forward(self, tokens: Tensor, kv_tokens: Tensor | None = None,
                return_weights: bool = False):
        kv = tokens if kv_tokens is None else kv_tokens
        return self.forward_qkv(tokens, kv, kv, return_weights=return_weights)


class FeedForward(Module):
    """Two fully connected layers, each followed by a GELU."""

    def __init__(self, c: int, mlp_ratio: float, rng: np.random.Generator):
        hidden = int(round(c * mlp_ratio))
        self.fc1 = Linear(c, hidden, rng)
        self.fc2 = Linear(hidden, c, rng)

    def forward(self, x: Tensor) -> Tensor:
        return T.gelu(self.fc2.forward(T.gelu(self.fc1.forward(x))))


class Latb(Module):
    """Local-aware transformer block on a C x H x W feature map.

    Partition into M x M windows (cyclically shifted by M//2 when
    ``shift``), add the learnable per-slot position embedding, then run
    pre-norm window attention and FFN with residuals.  Output shape
    equals input shape.
    """

    def __init__(self, c: int, window: int, heads: int, mlp_ratio: float,
                 shift: bool, rng: np.random.Generator):
        self.pos_embed = Tensor(rng.normal(0.0, 0.02, (window * window, c)),
                                requires_grad=True)
        self.ln1 = LayerNormLayer(c)
        self.attn = WindowAttention(c, heads, rng)
        self.ln2 = LayerNormLayer(c)
        self.ffn = FeedForward(c, mlp_ratio, rng)
        self.window = window
        self.shift = shift

    def forward(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        s = self.window // 2 if self.shift else 0
        t = T.roll2d(x, -s, -s) if s else x
        t = pad_to_multiple(t, self.window)
        hp, wp = t.shape[-2], t.shape[-1]
        tokens = window_partition(t, self.window)
        pe = T.add(tokens, self.pos_embed)
        x1 = T.add(self.attn.forward(self.ln1.forward(pe)), tokens)
        x2 = T.add(self.ffn.forward(self.ln2.forward(x1)), x1)
        out = window_merge(x2, hp, wp, self.window)
        if (hp, wp) != (h, w):
            out = T.crop_last2(out, h, w)
        return T.roll2d(out, s, s) if s else out


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: C x H x W -> C."""
    return T.tmean(x, axis=(1, 2))
