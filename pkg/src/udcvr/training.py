"""Charbonnier loss, Adam, the training loop, and checkpoints.

Training samples one degraded/clean sequence pair per iteration, takes a
K-frame temporal window around a random reference index, applies one
random crop and one random flip pair identically to every input frame
and the clean target, and minimizes the Charbonnier loss between the
restored reference frame and the clean reference frame with bias-
corrected Adam.

A checkpoint is a directory holding one ``.udct`` tensor per parameter
path plus ``manifest.txt`` (model/train config snapshot, iteration,
last loss, optimizer step counter).  Optimizer moments are stored under
``adam.m.<path>`` / ``adam.v.<path>`` so a resumed run continues the
same trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DataError
from .frames import load_sequence, temporal_window
from .network import ModelConfig, RestorationModel
from .tensor import Tape, Tensor, load_tensor, save_tensor

__all__ = [
    "TrainConfig",
    "charbonnier_loss",
    "Adam",
    "load_paired_dataset",
    "train_loop",
    "save_checkpoint",
    "load_checkpoint",
    "build_model_from_checkpoint",
    "write_loss_csv",
]


@dataclass
class TrainConfig:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    charbonnier_eps: float = 1e-3
    iterations: int = 1000
    crop: int = 32
    flip_augment: bool = True
    seed: int = 0
    checkpoint_interval: int = 0  # 0: only the final checkpoint
    accumulate: int = 1           # gradient-accumulation steps per update
    cosine_decay: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ConfigurationError(f"{name} must be in (0,1), got {b}")
        if self.adam_eps <= 0 or self.charbonnier_eps <= 0:
            raise ConfigurationError("eps values must be positive")
        if self.iterations < 0 or self.crop < 1 or self.accumulate < 1:
            raise ConfigurationError("iterations/crop/accumulate out of range")

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ("true" if v else "false") if isinstance(v, bool) else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if isinstance(f.default, bool):
                kwargs[f.name] = raw.strip().lower() in ("true", "1", "yes")
            elif isinstance(f.default, int):
                kwargs[f.name] = int(raw)
            elif isinstance(f.default, float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


def charbonnier_loss(pred: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    """mean(sqrt((pred - target)^2 + eps^2)); smooth everywhere."""
    if pred.shape != target.shape:
        raise ContractError(
            f"loss shapes disagree: pred {pred.shape} vs target {target.shape}"
        )
    d = T.sub(pred, target)
    return T.tmean(T.sqrt(T.add_scalar(T.mul(d, d), eps * eps)))


class Adam:
    """Bias-corrected Adam over a path-keyed parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 4e-4,
                 beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for key, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"missing gradient for parameter {key!r}")
            g = p.grad
            self.m[key] = b1 * self.m[key] + (1.0 - b1) * g
            self.v[key] = b2 * self.v[key] + (1.0 - b2) * g * g
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def load_paired_dataset(root) -> list[tuple[list[np.ndarray], list[np.ndarray]]]:
    """Load (degraded, clean) sequence pairs from ``root``.

    Layout: ``root/degraded/<name>/frame_*.png`` paired by name with
    ``root/clean/<name>/...``; or a single pair directly under
    ``root/degraded`` and ``root/clean``.
    """
    root = Path(root)
    deg_root, clean_root = root / "degraded", root / "clean"
    for d in (deg_root, clean_root):
        if not d.is_dir():
            raise DataError(f"missing dataset subdirectory: {d}")
    if list(deg_root.glob("*.png")):
        names = [None]
    else:
        deg_names = sorted(p.name for p in deg_root.iterdir() if p.is_dir())
        clean_names = sorted(p.name for p in clean_root.iterdir() if p.is_dir())
        if deg_names != clean_names:
            raise DataError(
                f"unpaired sequences: degraded={deg_names} clean={clean_names}"
            )
        if not deg_names:
            raise DataError(f"no sequences under {root}")
        names = deg_names
    pairs = []
    for name in names:
        deg = load_sequence(deg_root if name is None else deg_root / name)
        clean = load_sequence(clean_root if name is None else clean_root / name)
        if len(deg) != len(clean):
            raise DataError(
                f"sequence {name or root}: {len(deg)} degraded vs "
                f"{len(clean)} clean frames"
            )
        if deg[0].shape != clean[0].shape:
            raise DataError(f"sequence {name or root}: frame shapes disagree")
        pairs.append((deg, clean))
    return pairs


def _augment(frames: list[np.ndarray], target: np.ndarray,
             crop: int, flip: bool, rng: np.random.Generator):
    """One aligned crop + flip draw for all K frames and the target."""
    _, h, w = target.shape
    if crop > h or crop > w:
        raise ConfigurationError(f"crop {crop} exceeds frame size {h}x{w}")
    i0 = int(rng.integers(h - crop + 1))
    j0 = int(rng.integers(w - crop + 1))
    view = lambda f: f[:, i0 : i0 + crop, j0 : j0 + crop]
    frames = [view(f) for f in frames]
    target = view(target)
    if flip:
        if rng.random() < 0.5:
            frames = [f[:, :, ::-1] for f in frames]
            target = target[:, :, ::-1]
        if rng.random() < 0.5:
            frames = [f[:, ::-1, :] for f in frames]
            target = target[:, ::-1, :]
    return [np.ascontiguousarray(f) for f in frames], np.ascontiguousarray(target)


def train_loop(
    model: RestorationModel,
    dataset: list[tuple[list[np.ndarray], list[np.ndarray]]],
    cfg: TrainConfig,
    ckpt_dir=None,
    optimizer: Adam | None = None,
    start_iteration: int = 0,
) -> tuple[list[float], Adam]:
    """Run ``cfg.iterations`` optimization steps; returns per-iteration losses."""
    if not dataset:
        raise DataError("empty dataset")
    k = model.cfg.frames
    params = model.named_params()
    opt = optimizer if optimizer is not None else Adam(
        params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps
    )
    rng = np.random.default_rng(cfg.seed + start_iteration)
    losses: list[float] = []
    total = cfg.iterations
    for it in range(total):
        opt.zero_grad()
        loss_val = 0.0
        for _ in range(cfg.accumulate):
            deg, clean = dataset[int(rng.integers(len(dataset)))]
            center = int(rng.integers(len(deg)))
            window = temporal_window(len(deg), center, k)
            frames = [deg[i] for i in window]
            frames, target = _augment(frames, clean[center], cfg.crop,
                                      cfg.flip_augment, rng)
            with Tape() as tape:
                out = model.forward([Tensor(f) for f in frames])
                loss = charbonnier_loss(out, Tensor(target), cfg.charbonnier_eps)
                if cfg.accumulate > 1:
                    loss = T.scale(loss, 1.0 / cfg.accumulate)
            tape.backward(loss)
            loss_val += loss.item()
        lr = cfg.lr
        if cfg.cosine_decay and total > 1:
            progress = (start_iteration + it) / max(start_iteration + total - 1, 1)
            lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * progress))
        opt.step(lr=lr)
        losses.append(loss_val)
        if not np.isfinite(loss_val):
            raise ContractError(f"non-finite loss at iteration {it}")
        if (ckpt_dir is not None and cfg.checkpoint_interval > 0
                and (it + 1) % cfg.checkpoint_interval == 0 and (it + 1) < total):
            save_checkpoint(Path(ckpt_dir) / f"iter_{start_iteration + it + 1:06d}",
                            model, opt, start_iteration + it + 1, losses[-1], cfg)
    if ckpt_dir is not None:
        save_checkpoint(Path(ckpt_dir), model, opt,
                        start_iteration + total,
                        losses[-1] if losses else float("nan"), cfg)
    return losses, opt


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(directory, model: RestorationModel, optimizer: Adam | None,
                    iteration: int, loss: float, train_cfg: TrainConfig | None = None
                    ) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = model.named_params()
    for key, p in params.items():
        save_tensor(directory / f"{key}.udct", p.data)
    lines = [f"model.{k}={v}" for k, v in model.cfg.to_kv().items()]
    if train_cfg is not None:
        lines += [f"train.{k}={v}" for k, v in train_cfg.to_kv().items()]
    lines.append(f"iteration={iteration}")
    lines.append(f"loss={float(loss)!r}")
    if optimizer is not None:
        lines.append(f"adam_t={optimizer.t}")
        for key in params:
            save_tensor(directory / f"adam.m.{key}.udct", optimizer.m[key])
            save_tensor(directory / f"adam.v.{key}.udct", optimizer.v[key])
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def _read_manifest(directory: Path) -> dict[str, str]:
    mf = directory / "manifest.txt"
    if not mf.is_file():
        raise DataError(f"checkpoint manifest not found: {mf}")
    kv = {}
    for line in mf.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#") and "=" in line:
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    return kv


def load_checkpoint(directory) -> tuple[ModelConfig, dict[str, np.ndarray],
                                        dict[str, str]]:
    """Read config, parameter arrays and the raw manifest of a checkpoint."""
    directory = Path(directory)
    manifest = _read_manifest(directory)
    model_kv = {k[len("model."):]: v for k, v in manifest.items()
                if k.startswith("model.")}
    if not model_kv:
        raise DataError(f"{directory}: manifest holds no model config")
    cfg = ModelConfig.from_kv(model_kv)
    arrays = {}
    for f in sorted(directory.glob("*.udct")):
        key = f.name[: -len(".udct")]
        if not key.startswith("adam."):
            arrays[key] = load_tensor(f)
    return cfg, arrays, manifest


def build_model_from_checkpoint(directory) -> tuple[RestorationModel, dict[str, str]]:
    """Instantiate the model a checkpoint describes and load its weights."""
    directory = Path(directory)
    cfg, arrays, manifest = load_checkpoint(directory)
    model = RestorationModel(cfg, np.random.default_rng(0))
    params = model.named_params()
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise DataError(
            f"{directory}: checkpoint tensors do not match model "
            f"(missing={missing[:4]}, unexpected={extra[:4]})"
        )
    for key, p in params.items():
        arr = arrays[key]
        if arr.shape != p.shape:
            raise DataError(
                f"{directory}: tensor {key} has shape {arr.shape}, "
                f"model expects {p.shape}"
            )
        p.data = arr
    return model, manifest


def load_optimizer_state(directory, model: RestorationModel,
                         train_cfg: TrainConfig) -> Adam | None:
    """Rebuild the Adam state saved beside a checkpoint, if present."""
    directory = Path(directory)
    manifest = _read_manifest(directory)
    if "adam_t" not in manifest:
        return None
    params = model.named_params()
    opt = Adam(params, lr=train_cfg.lr, beta1=train_cfg.beta1,
               beta2=train_cfg.beta2, eps=train_cfg.adam_eps)
    opt.t = int(manifest["adam_t"])
    for key in params:
        m_file = directory / f"adam.m.{key}.udct"
        v_file = directory / f"adam.v.{key}.udct"
        if not m_file.is_file() or not v_file.is_file():
            raise DataError(f"{directory}: incomplete optimizer state for {key}")
        opt.m[key] = load_tensor(m_file)
        opt.v[key] = load_tensor(v_file)
    return opt


def write_loss_csv(path, losses, start_iteration: int = 0) -> None:
    lines = ["iteration,loss"]
    lines += [f"{start_iteration + i},{v!r}" for i, v in enumerate(losses)]
    Path(path).write_text("\n".join(lines) + "\n")
