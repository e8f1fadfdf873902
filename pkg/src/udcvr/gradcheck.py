"""Finite-difference verification of every backward rule.

For each differentiable op this module builds a small random scenario,
reduces the op's output to a scalar through a fixed random weighting (so
gradients are non-uniform), runs the tape backward, and compares against
central finite differences computed by re-running the forward pass with
each input coordinate perturbed by ±h.  The same machinery checks the full
restoration model end to end at a tiny configuration.

Relative error between analytic gradient a and numeric gradient n is
measured coordinatewise as |a − n| / max(|a|, |n|, 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, Tape

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4

__all__ = [
    "numeric_grad",
    "relative_error",
    "check_gradients",
    "check_module_gradients",
    "OpCheckResult",
    "check_all_ops",
    "check_tiny_model",
    "OP_SCENARIOS",
]


def numeric_grad(
    f: Callable[[Sequence[np.ndarray]], float],
    arrays: Sequence[np.ndarray],
    h: float = DEFAULT_H,
) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f`` w.r.t. each array."""
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        work = [a.copy() for a in arrays]
        for j in range(base.size):
            orig = work[i].reshape(-1)[j]
            work[i].reshape(-1)[j] = orig + h
            fp = f(work)
            work[i].reshape(-1)[j] = orig - h
            fm = f(work)
            work[i].reshape(-1)[j] = orig
            flat[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max coordinatewise |a − n| / max(|a|, |n|, 1)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def check_gradients(
    build: Callable[[Sequence[Tensor]], Tensor],
    leaves: Sequence[np.ndarray],
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
) -> float:
    """Compare tape gradients of ``build`` against finite differences.

    ``build`` maps leaf tensors to a scalar Tensor and must be a pure
    function of the leaf values.  Returns the max relative error across
    all leaves.
    """
    ts = [Tensor(a, requires_grad=True) for a in leaves]
    with Tape() as tape:
        loss = build(ts)
    tape.backward(loss)

    def f(arrays):
        fresh = [Tensor(a) for a in arrays]
        return build(fresh).item()

    numeric = numeric_grad(f, [np.asarray(a, dtype=np.float64) for a in leaves], h)
    worst = 0.0
    for t, n in zip(ts, numeric):
        a = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(a, n))
    return worst


# ---------------------------------------------------------------------------
# Per-op scenarios
# ---------------------------------------------------------------------------


def _w(rng: np.random.Generator, shape) -> Tensor:
    """Fixed (non-grad) weighting tensor for reducing op outputs to scalar."""
    return Tensor(rng.standard_normal(shape))


def _scenarios(rng: np.random.Generator) -> dict[str, tuple]:
    """Build (build_fn, leaves) for every differentiable op."""
    sc: dict[str, tuple] = {}

    def simple(name, fn, *shapes, leaf_fn=None):
        leaves = [
            (leaf_fn(s) if leaf_fn else rng.standard_normal(s)) for s in shapes
        ]
        probe = fn([Tensor(a) for a in leaves])
        w = _w(rng, probe.shape)
        sc[name] = (lambda ts, fn=fn, w=w: T.tsum(T.mul(fn(ts), w)), leaves)

    simple("add", lambda ts: T.add(ts[0], ts[1]), (3, 4), (3, 4))
    simple("add_broadcast", lambda ts: T.add(ts[0], ts[1]), (3, 4), (4,))
    simple("sub", lambda ts: T.sub(ts[0], ts[1]), (3, 4), (3, 4))
    simple("mul", lambda ts: T.mul(ts[0], ts[1]), (3, 4), (3, 4))
    simple("neg", lambda ts: T.neg(ts[0]), (5,))
    simple("scale", lambda ts: T.scale(ts[0], -1.7), (2, 3))
    simple("add_scalar", lambda ts: T.add_scalar(ts[0], 0.3), (2, 3))
    simple("matmul", lambda ts: T.matmul(ts[0], ts[1]), (3, 4), (4, 2))
    simple("matmul_batched", lambda ts: T.matmul(ts[0], ts[1]), (2, 3, 4), (2, 4, 2))
    simple("permute", lambda ts: T.permute(ts[0], (2, 0, 1)), (2, 3, 4))
    simple("reshape", lambda ts: T.reshape(ts[0], (6, 2)), (3, 4))
    simple("softmax", lambda ts: T.softmax(ts[0]), (3, 5))
    simple("gelu", lambda ts: T.gelu(ts[0]), (4, 4))
    simple("sigmoid", lambda ts: T.sigmoid(ts[0]), (4, 4))
    simple(
        "sqrt",
        lambda ts: T.sqrt(ts[0]),
        (3, 3),
        leaf_fn=lambda s: rng.uniform(0.5, 2.0, s),
    )
    simple("sum", lambda ts: T.reshape(T.tsum(ts[0]), (1,)), (3, 4))
    simple("mean_all", lambda ts: T.reshape(T.tmean(ts[0]), (1,)), (3, 4))
    simple("mean_axis", lambda ts: T.tmean(ts[0], axis=(1, 2)), (2, 3, 4))
    simple("layer_norm", lambda ts: T.layer_norm(ts[0], ts[1], ts[2]), (4, 6), (6,), (6,))
    simple(
        "conv2d",
        lambda ts: T.conv2d(ts[0], ts[1], ts[2], stride=1, padding=1),
        (2, 6, 6), (3, 2, 3, 3), (3,),
    )
    simple(
        "conv2d_strided",
        lambda ts: T.conv2d(ts[0], ts[1], None, stride=2, padding=1),
        (2, 7, 7), (3, 2, 3, 3),
    )
    simple("pixel_shuffle", lambda ts: T.pixel_shuffle(ts[0], 2), (8, 3, 3))
    simple("pad_reflect", lambda ts: T.pad_end2d(ts[0], 2, 3, "reflect"), (2, 5, 5))
    simple("pad_edge", lambda ts: T.pad_end2d(ts[0], 2, 3, "edge"), (2, 5, 5))
    simple("pad_zero", lambda ts: T.pad_end2d(ts[0], 2, 3, "zero"), (2, 5, 5))
    simple("crop_last2", lambda ts: T.crop_last2(ts[0], 3, 4), (2, 5, 6))
    simple("roll2d", lambda ts: T.roll2d(ts[0], 2, -1), (2, 5, 5))
    simple("concat", lambda ts: T.concat([ts[0], ts[1]], axis=0), (2, 4), (3, 4))
    simple("stack", lambda ts: T.stack([ts[0], ts[1]], axis=0), (3, 4), (3, 4))
    # keep clamp inputs away from the kinks at the bounds
    simple(
        "clamp",
        lambda ts: T.clamp(ts[0], -1.0, 1.0),
        (4, 4),
        leaf_fn=lambda s: np.where(
            rng.random(s) < 0.5,
            rng.uniform(-0.8, 0.8, s),
            rng.uniform(1.2, 2.0, s) * rng.choice([-1.0, 1.0], s),
        ),
    )
    return sc


@dataclass
class OpCheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol


def check_all_ops(
    seed: int = 0, h: float = DEFAULT_H, tol: float = DEFAULT_TOL
) -> list[OpCheckResult]:
    """Finite-difference check every registered op scenario."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (build, leaves) in _scenarios(rng).items():
        err = check_gradients(build, leaves, h=h, tol=tol)
        results.append(OpCheckResult(name, err, tol))
    return results


OP_SCENARIOS = sorted(_scenarios(np.random.default_rng(0)).keys())


def check_module_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = DEFAULT_H,
) -> dict[str, float]:
    """FD-check a module's parameters against one tape backward pass.

    ``loss_fn`` must rebuild the forward pass and return the scalar loss;
    it is re-evaluated with each parameter coordinate nudged in place.
    Returns per-parameter max relative error.
    """
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    errors = {}
    for key, p in params.items():
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = loss_fn().item()
            flat[j] = orig - h
            fm = loss_fn().item()
            flat[j] = orig
            num[j] = (fp - fm) / (2.0 * h)
        errors[key] = relative_error(analytic[key].reshape(-1), num)
    return errors


def check_tiny_model(
    seed: int = 0,
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
    size: int = 12,
) -> OpCheckResult:
    """End-to-end gradient check of a tiny full restoration model.

    Every parameter coordinate is perturbed; with C=8, K=3 and 12x12
    frames the model is a few thousand scalars, small enough for exhaustive
    central differences.
    """
    from .network import RestorationModel, ModelConfig
    from .training import charbonnier_loss

    cfg = ModelConfig(
        channels=8, heads=2, window=2, temporal_window=2, frames=3,
        blocks_pre=1, blocks_post=1, mlp_ratio=2.0, downsample=2,
    )
    rng = np.random.default_rng(seed)
    model = RestorationModel(cfg, rng)
    frames = [Tensor(rng.uniform(0.1, 0.9, (3, size, size))) for _ in range(cfg.frames)]
    target = Tensor(rng.uniform(0.1, 0.9, (3, size, size)))

    def loss_fn() -> Tensor:
        return charbonnier_loss(model.forward(frames), target)

    errors = check_module_gradients(loss_fn, model.named_params(), h=h)
    return OpCheckResult("tiny_model", max(errors.values()), tol)
