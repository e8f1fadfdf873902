"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value flowing through the degradation model, the restoration network
and the losses is a :class:`Tensor`: a C-contiguous float64 numpy array plus
a ``requires_grad`` flag and an optional accumulated gradient.  Operations
are eager; when a :class:`Tape` is active on the current thread, each op
appends one entry (inputs, output, backward rule).  ``Tape.backward`` walks
the entries in exact reverse recording order and accumulates gradients
additively, so a tensor consumed by k ops receives the sum of k
contributions.

Tensors are never mutated after creation except for gradient accumulation
during backward and explicit in-place parameter updates performed by the
optimizer outside any tape.

The module also provides the ``.udct`` binary serialization used for
checkpoints and golden files: magic ``UDCT``, u32 version, u32 ndim, u32
dims, little-endian float64 payload, row-major.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import ConfigurationError, ContractError, ShapeMismatchError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "matmul",
    "permute",
    "swap_last2",
    "reshape",
    "softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "sqrt",
    "tsum",
    "tmean",
    "conv2d",
    "pixel_shuffle",
    "pad_end2d",
    "crop_last2",
    "roll2d",
    "concat",
    "stack",
    "clamp",
    "save_tensor",
    "load_tensor",
    "set_backward_corruption",
    "clear_backward_corruption",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

UDCT_MAGIC = b"UDCT"
UDCT_VERSION = 1


def _contig(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray promotes 0-d to 1-d; 0-d is already contiguous
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


class Tensor:
    """Dense N-d array of float64 scalars with optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = _contig(np.asarray(data, dtype=np.float64))
        if not np.isfinite(arr).all():
            raise ContractError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    # -- metadata ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Copy of the values with no gradient tracking."""
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Convenience constructor mirroring ``Tensor(...)``."""
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


_tls = threading.local()

# Test-harness hook: {op_name: factor} multiplies that op's input gradients,
# letting the gradient checker prove it detects corrupted backward rules.
_BACKWARD_CORRUPTION: dict[str, float] = {}


def set_backward_corruption(op: str, factor: float) -> None:
    _BACKWARD_CORRUPTION[op] = float(factor)


def clear_backward_corruption() -> None:
    _BACKWARD_CORRUPTION.clear()


def _active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of operations for one forward pass on one thread."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tls.tape = self._prev
        self._prev = None

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every ``requires_grad`` tensor feeding ``loss``."""
        if loss.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if not any(e.output is loss for e in self.entries):
            raise ContractError("loss tensor was not produced on this tape")
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self.entries):
            g_out = entry.output.grad
            if g_out is None:
                continue
            grads = entry.backward(g_out)
            factor = _BACKWARD_CORRUPTION.get(entry.op)
            for t, g in zip(entry.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if factor is not None:
                    g = g * factor
                if t.grad is None:
                    t.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    t.grad = t.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    data = _contig(data)
    if not np.isfinite(data).all():
        raise ContractError(f"op '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.entries.append(TapeEntry(op, inputs, out, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` by summing."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise / arithmetic ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make("scale", a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make("add_scalar", a.data + s, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the trailing two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(
            f"matmul needs >=2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )

    def bwd(g):
        da = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        db = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return da, db

    return _make("matmul", np.matmul(a.data, b.data), (a, b), bwd)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _make("permute", np.transpose(a.data, axes), (a,), bwd)


def swap_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make("reshape", a.data.reshape(shape), (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (a,), bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    c = a.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
            f"do not match feature width {c}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data

    def bwd(g):
        dgamma = (g * xhat).reshape(-1, c).sum(axis=0)
        dbeta = g.reshape(-1, c).sum(axis=0)
        dxhat = g * gamma.data
        da = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return da, dgamma, dbeta

    return _make("layer_norm", out, (a, gamma, beta), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    phi = 0.5 * (1.0 + special.erf(a.data * _INV_SQRT2))
    out = a.data * phi

    def bwd(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        return (g * (phi + a.data * pdf),)

    return _make("gelu", out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * out),)

    return _make("sqrt", out, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements (scalar tensor)."""
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(a.data.sum()), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Mean over ``axis`` (all elements when None)."""
    shape = a.shape
    if axis is None:
        n = a.size
        out = np.asarray(a.data.mean())

        def bwd(g):
            return (np.broadcast_to(g / n, shape).copy(),)

        return _make("mean", out, (a,), bwd)

    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    n = 1
    for ax in axes:
        n *= shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", out, (a,), bwd)


# ---------------------------------------------------------------------------
# Structured ops
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-d cross-correlation of a single image.

    ``x`` is C_in x H x W, ``w`` is C_out x C_in x kh x kw, optional bias is
    C_out.  Output height is (H + 2*padding - kh) / stride + 1 and must be
    integral; zero padding is applied symmetrically.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects CxHxW input and OxIxKhxKw kernel, got {x.shape} / {w.shape}"
        )
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeMismatchError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}"
        )
    if b is not None and b.shape != (cout,):
        raise ShapeMismatchError(f"conv2d bias shape {b.shape} != ({cout},)")
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d stride={stride}, padding={padding} invalid")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ConfigurationError(
            f"conv2d kernel {kh}x{kw} does not fit padded input {hp}x{wp}"
        )
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ConfigurationError(
            f"conv2d output size is not integral for input {h}x{wd}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding)))
    # im2col: [C_in*kh*kw, ho*wo]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # [C_in, ho, wo, kh, kw]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (wmat @ cols).reshape(cout, ho, wo)
    if b is not None:
        out = out + b.data[:, None, None]

    def bwd(g):
        gmat = g.reshape(cout, ho * wo)
        dw = (gmat @ cols.T).reshape(w.shape)
        dcols = (wmat.T @ gmat).reshape(cin, kh, kw, ho, wo)
        dxp = np.zeros((cin, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    dcols[:, i, j]
                )
        dx = dxp[:, padding : padding + h, padding : padding + wd] if padding else dxp
        db = gmat.sum(axis=1) if b is not None else None
        if b is not None:
            return dx, dw, db
        return dx, dw

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, inputs, bwd)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange C*r^2 x H x W into C x rH x rW (sub-pixel upsampling)."""
    if x.ndim != 3:
        raise ShapeMismatchError(f"pixel_shuffle expects CxHxW, got {x.shape}")
    r = int(r)
    c2, h, w = x.shape
    if r < 1 or c2 % (r * r):
        raise ShapeMismatchError(
            f"pixel_shuffle: {c2} channels not divisible by r^2={r * r}"
        )
    c = c2 // (r * r)
    out = (
        x.data.reshape(c, r, r, h, w)
        .transpose(0, 3, 1, 4, 2)
        .reshape(c, h * r, w * r)
    )

    def bwd(g):
        dx = (
            g.reshape(c, h, r, w, r)
            .transpose(0, 2, 4, 1, 3)
            .reshape(c2, h, w)
        )
        return (np.ascontiguousarray(dx),)

    return _make("pixel_shuffle", out, (x,), bwd)


def pad_end2d(x: Tensor, ph: int, pw: int, mode: str = "reflect") -> Tensor:
    """Pad the last two axes at their high ends (bottom / right).

    ``mode`` is ``reflect``, ``edge`` or ``zero``.  Reflect requires the pad
    to be strictly smaller than the padded axis length.
    """
    ph, pw = int(ph), int(pw)
    if ph < 0 or pw < 0:
        raise ConfigurationError(f"negative pad ({ph}, {pw})")
    h, w = x.shape[-2], x.shape[-1]
    if mode == "reflect" and (ph >= h or pw >= w):
        raise ConfigurationError(
            f"reflect pad ({ph}, {pw}) too large for spatial size {h}x{w}"
        )
    if ph == 0 and pw == 0:
        return _make("pad_end2d", x.data.copy(), (x,), lambda g: (g.copy(),))
    if mode == "zero":
        width = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
        out = np.pad(x.data, width)

        def bwd_zero(g):
            return (np.ascontiguousarray(g[..., :h, :w]),)

        return _make("pad_end2d", out, (x,), bwd_zero)
    if mode not in ("reflect", "edge"):
        raise ConfigurationError(f"unknown pad mode {mode!r}")
    ii = np.pad(np.arange(h), (0, ph), mode=mode)
    jj = np.pad(np.arange(w), (0, pw), mode=mode)
    out = x.data[..., ii[:, None], jj[None, :]]

    def bwd(g):
        # adjoint of gather: scatter-add via the same index maps, one axis
        # at a time (both modes are separable per axis)
        tmp = np.zeros(x.shape[:-2] + (h, w + pw))
        np.add.at(tmp, (..., ii, slice(None)), g)
        dx = np.zeros(x.shape)
        np.add.at(dx, (..., slice(None), jj), tmp)
        return (dx,)

    return _make("pad_end2d", out, (x,), bwd)


def crop_last2(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h`` x ``w`` corner of the last two axes."""
    h, w = int(h), int(w)
    if h > x.shape[-2] or w > x.shape[-1]:
        raise ShapeMismatchError(f"crop to {h}x{w} exceeds input {x.shape}")
    shape = x.shape

    def bwd(g):
        dx = np.zeros(shape)
        dx[..., :h, :w] = g
        return (dx,)

    return _make("crop_last2", np.ascontiguousarray(x.data[..., :h, :w]), (x,), bwd)


def roll2d(x: Tensor, sh: int, sw: int) -> Tensor:
    """Cyclically shift the last two axes by (sh, sw)."""
    out = np.roll(x.data, (sh, sw), axis=(-2, -1))

    def bwd(g):
        return (np.roll(g, (-sh, -sw), axis=(-2, -1)),)

    return _make("roll2d", out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(
        "concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("stack of zero tensors")

    def bwd(g):
        return tuple(
            np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(len(tensors))
        )

    return _make("stack", np.stack([t.data for t in tensors], axis=axis), tensors, bwd)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where unclipped."""
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        return (g * mask,)

    return _make("clamp", out, (x,), bwd)


# ---------------------------------------------------------------------------
# Binary serialization (.udct)
# ---------------------------------------------------------------------------


def save_tensor(path, arr) -> None:
    """Write an array to ``path`` in the UDCT binary format."""
    data = _contig(np.asarray(arr.data if isinstance(arr, Tensor) else arr,
                            dtype=np.float64))
    dims = data.shape
    with open(path, "wb") as fh:
        fh.write(UDCT_MAGIC)
        fh.write(struct.pack("<II", UDCT_VERSION, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(data.astype("<f8").tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    """Read a UDCT binary file back into a float64 array."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != UDCT_MAGIC:
            raise ContractError(f"{path}: not a UDCT tensor file (magic {magic!r})")
        version, ndim = struct.unpack("<II", fh.read(8))
        if version != UDCT_VERSION:
            raise ContractError(f"{path}: unsupported UDCT version {version}")
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        count = int(np.prod(dims)) if ndim else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ContractError(f"{path}: truncated UDCT payload")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return arr.reshape(dims)
