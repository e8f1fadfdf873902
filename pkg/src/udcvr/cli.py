"""Command-line interface: degrade, train, restore, eval, gradcheck.

Every command is deterministic given its flags and writes a
``run_manifest.txt`` beside its outputs recording the command, the full
flag set, the seed, the library version, the input/output paths and the
wall-clock duration — enough to reproduce the run byte-identically.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 verification failure.  ``UDCVR_THREADS`` caps restore worker threads.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .degrade import DegradationParams, PsfSpec, degrade_sequence, make_psf, save_params
from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    ShapeMismatchError,
    UdcvrError,
    VerificationError,
)
from .frames import load_sequence, save_sequence, temporal_window
from .metrics import evaluate_pair_sequences
from .network import ModelConfig, RestorationModel
from .tensor import Tensor, clear_backward_corruption, set_backward_corruption
from .training import (
    TrainConfig,
    build_model_from_checkpoint,
    load_optimizer_state,
    load_paired_dataset,
    train_loop,
    write_loss_csv,
)

PSF_FLAG_TO_KIND = {"gaussian": "gaussian", "toled": "toled_banded",
                    "poled": "poled_haze"}
QKV_FLAG_TO_MODE = {"neighbors": "neighbors_kv", "with-ref": "ref_in_kv",
                    "neighbors-only": "neighbors_only_q"}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exceptions, not exits."""

    def error(self, message):
        raise ConfigurationError(message)


def _write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                        inputs: list[str], outputs: list[str],
                        started: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}", f"version={__version__}"]
    for key in sorted(vars(args)):
        if key == "func":
            continue
        lines.append(f"flag.{key}={getattr(args, key)}")
    lines += [f"input={p}" for p in inputs]
    lines += [f"output={p}" for p in outputs]
    lines.append(f"duration_s={time.monotonic() - started:.3f}")
    (out_dir / "run_manifest.txt").write_text("\n".join(lines) + "\n")


def _worker_count(n_tasks: int) -> int:
    cap = os.environ.get("UDCVR_THREADS")
    if cap is not None:
        try:
            cap_n = int(cap)
        except ValueError:
            raise ConfigurationError(f"UDCVR_THREADS={cap!r} is not an integer")
        if cap_n < 1:
            raise ConfigurationError(f"UDCVR_THREADS must be >= 1, got {cap_n}")
        return min(cap_n, n_tasks)
    return min(4, n_tasks)


# ---------------------------------------------------------------------------
# degrade
# ---------------------------------------------------------------------------


def cmd_degrade(args) -> int:
    started = time.monotonic()
    spec = PsfSpec(
        kind=PSF_FLAG_TO_KIND[args.psf],
        size=args.psf_size,
        sigma=args.psf_sigma,
        band_period=args.band_period,
        band_amplitude=args.band_amplitude,
        haze_weight=args.haze_weight,
    )
    params = DegradationParams(
        psf=make_psf(spec), gamma=args.gamma,
        lambda_read=args.lread, lambda_shot=args.lshot, seed=args.seed,
    )
    frames = load_sequence(args.in_dir)
    degraded = degrade_sequence(frames, params)
    out_dir = Path(args.out_dir)
    paths = save_sequence(out_dir, degraded)
    save_params(out_dir / "degradation_params.txt", params)
    _write_run_manifest(out_dir, "degrade", args, [str(args.in_dir)],
                        [str(p) for p in paths], started)
    print(f"degraded {len(paths)} frames -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_kv_file(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    kv = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    return kv


def _configs_from_args(args) -> tuple[TrainConfig, ModelConfig]:
    train_kv: dict[str, str] = {}
    model_kv: dict[str, str] = {}
    if args.config:
        for key, value in _load_kv_file(Path(args.config)).items():
            if key.startswith("model."):
                model_kv[key[len("model."):]] = value
            else:
                train_kv[key] = value
    try:
        train_cfg = TrainConfig.from_kv(train_kv)
        model_cfg = ModelConfig.from_kv(model_kv)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"bad config file value: {exc}") from exc
    overrides = {}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        kv = train_cfg.to_kv()
        kv.update({k: str(v) for k, v in overrides.items()})
        train_cfg = TrainConfig.from_kv(kv)
    model_overrides = {}
    if args.fusion is not None:
        model_overrides["fusion"] = args.fusion
    if args.temporal_qkv is not None:
        model_overrides["temporal_qkv"] = QKV_FLAG_TO_MODE[args.temporal_qkv]
    if args.branches is not None:
        model_overrides["branches"] = args.branches
    if model_overrides:
        kv = model_cfg.to_kv()
        kv.update(model_overrides)
        model_cfg = ModelConfig.from_kv(kv)
    return train_cfg, model_cfg


def cmd_train(args) -> int:
    started = time.monotonic()
    train_cfg, model_cfg = _configs_from_args(args)
    dataset = load_paired_dataset(args.data)
    start_iteration = 0
    optimizer = None
    if args.resume:
        model, manifest = build_model_from_checkpoint(args.resume)
        model_cfg = model.cfg
        start_iteration = int(manifest.get("iteration", 0))
        optimizer = load_optimizer_state(args.resume, model, train_cfg)
    else:
        model = RestorationModel(model_cfg, np.random.default_rng(train_cfg.seed))
    out_dir = Path(args.out)
    losses, _ = train_loop(model, dataset, train_cfg, ckpt_dir=out_dir,
                           optimizer=optimizer, start_iteration=start_iteration)
    write_loss_csv(out_dir / "loss.csv", losses, start_iteration=start_iteration)
    _write_run_manifest(out_dir, "train", args, [str(args.data)],
                        [str(out_dir / "loss.csv")], started)
    final = losses[-1] if losses else float("nan")
    print(f"trained {len(losses)} iterations, final loss {final:.6f} -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# restore
# ---------------------------------------------------------------------------


def cmd_restore(args) -> int:
    started = time.monotonic()
    model, _ = build_model_from_checkpoint(args.ckpt)
    k = model.cfg.frames
    frames = load_sequence(args.in_dir)
    if len(frames) < k:
        raise DataError(
            f"sequence has {len(frames)} frames, model needs at least {k}"
        )

    def restore_at(center: int) -> np.ndarray:
        window = temporal_window(len(frames), center, k)
        tensors = [Tensor(frames[i]) for i in window]
        return model.forward(tensors, clamp_output=True).data

    workers = _worker_count(len(frames))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            restored = list(pool.map(restore_at, range(len(frames))))
    else:
        restored = [restore_at(i) for i in range(len(frames))]
    out_dir = Path(args.out_dir)
    paths = save_sequence(out_dir, restored)
    _write_run_manifest(out_dir, "restore", args,
                        [str(args.ckpt), str(args.in_dir)],
                        [str(p) for p in paths], started)
    print(f"restored {len(paths)} frames -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    started = time.monotonic()
    pred = load_sequence(args.pred)
    gt = load_sequence(args.gt)
    if len(pred) != len(gt):
        raise DataError(
            f"frame count mismatch: {len(pred)} predictions vs {len(gt)} references"
        )
    report = evaluate_pair_sequences(pred, gt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(report.to_csv())
    (out_dir / "report.txt").write_text(report.to_table())
    _write_run_manifest(out_dir, "eval", args, [str(args.pred), str(args.gt)],
                        [str(out_dir / "report.csv"), str(out_dir / "report.txt")],
                        started)
    sys.stdout.write(report.to_table())
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_all_ops, check_tiny_model

    if args.corrupt_op:
        op, _, factor = args.corrupt_op.partition(":")
        if not factor:
            raise ConfigurationError(
                "--corrupt-op expects NAME:FACTOR, e.g. matmul:1.01"
            )
        set_backward_corruption(op, float(factor))
    def report(results) -> list[str]:
        width = max(len(r.name) for r in results)
        bad = []
        for r in results:
            status = "PASS" if r.ok else "FAIL"
            print(f"{r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  {status}")
            if not r.ok:
                bad.append(r.name)
        return bad

    try:
        results = check_all_ops(seed=args.seed)
        failed = report(results)
        if failed:
            # an op-level failure already decides the verdict; skip the
            # expensive end-to-end sweep
            raise VerificationError(
                f"gradient check failed for: {', '.join(failed)}"
            )
        model_result = check_tiny_model(seed=args.seed, size=args.size)
        failed = report([model_result])
        if failed:
            raise VerificationError(
                f"gradient check failed for: {', '.join(failed)}"
            )
    finally:
        clear_backward_corruption()
    print(f"all {len(results) + 1} gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="udcvr",
                     description="UDC video degradation and restoration toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="synthesize UDC degradation on a sequence")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--psf", choices=sorted(PSF_FLAG_TO_KIND), default="gaussian")
    p.add_argument("--psf-size", type=int, default=9)
    p.add_argument("--psf-sigma", type=float, default=2.0)
    p.add_argument("--band-period", type=int, default=3)
    p.add_argument("--band-amplitude", type=float, default=0.5)
    p.add_argument("--haze-weight", type=float, default=0.3)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--lread", type=float, default=4e-4)
    p.add_argument("--lshot", type=float, default=8e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train the restoration model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--fusion", choices=("stfm", "concat", "add"), default=None)
    p.add_argument("--temporal-qkv", choices=sorted(QKV_FLAG_TO_MODE), default=None)
    p.add_argument("--branches", choices=("both", "spatial", "temporal"),
                   default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore a degraded sequence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="PSNR/SSIM of a prediction vs ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=12)
    p.add_argument("--corrupt-op", default=None,
                   help="test hook: corrupt a backward rule (NAME:FACTOR)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigurationError,) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ContractError, ShapeMismatchError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 3
    except UdcvrError as exc:  # pragma: no cover - safety net
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
