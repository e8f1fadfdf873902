"""End-to-end CLI runs, all in-process through main(argv)."""

import numpy as np
import pytest

from udcvr.cli import main
from udcvr.frames import load_sequence, save_sequence
from udcvr.metrics import evaluate_pair_sequences
from udcvr.network import ModelConfig, RestorationModel
from udcvr.training import load_checkpoint

TINY_CONFIG = """\
# exercise the full pipeline at toy scale
crop=12
model.channels=8
model.heads=2
model.window=2
model.temporal_window=2
model.frames=3
model.blocks_pre=1
model.blocks_post=1
model.downsample=2
"""


def frame_bytes(directory):
    return [p.read_bytes() for p in sorted(directory.glob("*.png"))]


def moving_pattern(shift, size=24):
    y, x = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    base = 0.5 + 0.35 * np.sin(2 * np.pi * (x + shift) / 12.0) * np.cos(
        2 * np.pi * y / 16.0)
    return np.stack([base, np.roll(base, 3, axis=1), 1 - base]).clip(0.05, 0.95)


@pytest.fixture
def toy_data(tmp_path):
    """degraded/clean pair of 3-frame sequences plus a config file."""
    clean = [moving_pattern(i) for i in range(3)]
    save_sequence(tmp_path / "data" / "clean" / "a", clean)
    save_sequence(tmp_path / "data" / "degraded" / "a",
                  [0.8 * f for f in clean])
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    return tmp_path


# ---------------------------------------------------------------------------
# degrade
# ---------------------------------------------------------------------------


def test_degrade_identity_reproduces_input_bytes(tmp_path):
    rng = np.random.default_rng(0)
    save_sequence(tmp_path / "src", [rng.random((3, 16, 16)) for _ in range(2)])
    rc = main(["degrade", "--in", str(tmp_path / "src"),
               "--out", str(tmp_path / "out"),
               "--psf-size", "1", "--gamma", "1.0",
               "--lread", "0", "--lshot", "0"])
    assert rc == 0
    assert frame_bytes(tmp_path / "out") == frame_bytes(tmp_path / "src")
    assert (tmp_path / "out" / "degradation_params.txt").is_file()
    assert (tmp_path / "out" / "run_manifest.txt").is_file()


def test_degrade_is_deterministic_per_seed(tmp_path):
    rng = np.random.default_rng(1)
    save_sequence(tmp_path / "src", [rng.random((3, 16, 16))])
    for name, seed in (("a", "7"), ("b", "7"), ("c", "8")):
        rc = main(["degrade", "--in", str(tmp_path / "src"),
                   "--out", str(tmp_path / name), "--seed", seed])
        assert rc == 0
    assert frame_bytes(tmp_path / "a") == frame_bytes(tmp_path / "b")
    assert frame_bytes(tmp_path / "a") != frame_bytes(tmp_path / "c")


def test_degrade_toled_adds_banding_at_the_requested_frequency(tmp_path):
    """Spectrum of a degraded noise frame: the banded PSF passes energy at
    1/period cycles per pixel that a plain Gaussian suppresses."""
    rng = np.random.default_rng(42)
    save_sequence(tmp_path / "src", [rng.random((3, 128, 128))])
    for psf in ("gaussian", "toled"):
        rc = main(["degrade", "--in", str(tmp_path / "src"),
                   "--out", str(tmp_path / psf), "--psf", psf,
                   "--band-period", "4", "--lread", "0", "--lshot", "0"])
        assert rc == 0
    spectrum = {}
    for psf in ("gaussian", "toled"):
        out = load_sequence(tmp_path / psf)[0]
        inner = out[:, 8:-8, 8:-8]  # keep clear of border padding
        f = np.fft.rfft(inner, axis=-1)
        spectrum[psf] = (np.abs(f) ** 2).mean(axis=(0, 1))
    ratio = spectrum["toled"] / spectrum["gaussian"]
    band_bin = inner.shape[-1] // 4
    assert ratio[band_bin] > 10.0
    assert ratio[1:9].max() < 1.5  # kernels agree at low frequency


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_zero_iterations_checkpoints_the_init(toy_data):
    out = toy_data / "run0"
    rc = main(["train", "--data", str(toy_data / "data"), "--out", str(out),
               "--config", str(toy_data / "tiny.cfg"),
               "--iterations", "0", "--seed", "4"])
    assert rc == 0
    cfg, arrays, manifest = load_checkpoint(out)
    assert manifest["iteration"] == "0"
    fresh = RestorationModel(cfg, np.random.default_rng(4))
    for key, p in fresh.named_params().items():
        assert np.array_equal(arrays[key], p.data), key


def test_train_writes_losses_and_checkpoint(toy_data, capsys):
    out = toy_data / "run1"
    rc = main(["train", "--data", str(toy_data / "data"), "--out", str(out),
               "--config", str(toy_data / "tiny.cfg"),
               "--iterations", "5", "--seed", "0"])
    assert rc == 0
    assert "final loss" in capsys.readouterr().out
    lines = (out / "loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss" and len(lines) == 6
    assert all(np.isfinite(float(l.split(",")[1])) for l in lines[1:])
    assert (out / "manifest.txt").is_file()
    assert (out / "run_manifest.txt").is_file()
    cfg, arrays, manifest = load_checkpoint(out)
    assert cfg.channels == 8 and manifest["iteration"] == "5"


def test_train_resume_continues_the_run(toy_data):
    first = toy_data / "first"
    assert main(["train", "--data", str(toy_data / "data"),
                 "--out", str(first), "--config", str(toy_data / "tiny.cfg"),
                 "--iterations", "6", "--seed", "2"]) == 0
    second = toy_data / "second"
    assert main(["train", "--data", str(toy_data / "data"),
                 "--out", str(second), "--config", str(toy_data / "tiny.cfg"),
                 "--iterations", "6", "--seed", "2",
                 "--resume", str(first)]) == 0

    _, _, manifest = load_checkpoint(second)
    assert manifest["iteration"] == "12"
    assert manifest["adam_t"] == "12"
    first_losses = (first / "loss.csv").read_text().splitlines()[1:]
    second_losses = (second / "loss.csv").read_text().splitlines()[1:]
    assert second_losses[0].split(",")[0] == "6"  # numbering continues
    last_before = float(first_losses[-1].split(",")[1])
    first_after = float(second_losses[0].split(",")[1])
    assert first_after < 10 * last_before  # no reset to scratch


def test_train_ablation_flags_reach_the_model(toy_data):
    out = toy_data / "ablate"
    rc = main(["train", "--data", str(toy_data / "data"), "--out", str(out),
               "--config", str(toy_data / "tiny.cfg"), "--iterations", "1",
               "--fusion", "add", "--temporal-qkv", "with-ref",
               "--seed", "0"])
    assert rc == 0
    cfg, _, _ = load_checkpoint(out)
    assert cfg.fusion == "add"
    assert cfg.temporal_qkv == "ref_in_kv"


# ---------------------------------------------------------------------------
# restore
# ---------------------------------------------------------------------------


@pytest.fixture
def identity_ckpt(toy_data):
    """Untrained (zero residual head) checkpoint: restore == identity."""
    out = toy_data / "init"
    assert main(["train", "--data", str(toy_data / "data"), "--out", str(out),
                 "--config", str(toy_data / "tiny.cfg"),
                 "--iterations", "0", "--seed", "4"]) == 0
    return out


def test_restore_untrained_model_is_identity(toy_data, identity_ckpt):
    src = toy_data / "data" / "degraded" / "a"
    out = toy_data / "restored"
    rc = main(["restore", "--ckpt", str(identity_ckpt),
               "--in", str(src), "--out", str(out)])
    assert rc == 0
    assert frame_bytes(out) == frame_bytes(src)
    assert (out / "run_manifest.txt").is_file()


def test_restore_thread_count_does_not_change_output(toy_data, identity_ckpt,
                                                     monkeypatch):
    src = toy_data / "data" / "degraded" / "a"
    single, multi = toy_data / "r1", toy_data / "r2"
    monkeypatch.setenv("UDCVR_THREADS", "1")
    assert main(["restore", "--ckpt", str(identity_ckpt),
                 "--in", str(src), "--out", str(single)]) == 0
    monkeypatch.setenv("UDCVR_THREADS", "3")
    assert main(["restore", "--ckpt", str(identity_ckpt),
                 "--in", str(src), "--out", str(multi)]) == 0
    assert frame_bytes(single) == frame_bytes(multi)


def test_restore_needs_enough_frames(toy_data, identity_ckpt):
    src = toy_data / "short"
    save_sequence(src, [moving_pattern(0), moving_pattern(1)])
    rc = main(["restore", "--ckpt", str(identity_ckpt),
               "--in", str(src), "--out", str(toy_data / "r3")])
    assert rc == 2


def test_restore_bad_thread_env_is_a_usage_error(toy_data, identity_ckpt,
                                                 monkeypatch):
    monkeypatch.setenv("UDCVR_THREADS", "several")
    rc = main(["restore", "--ckpt", str(identity_ckpt),
               "--in", str(toy_data / "data" / "degraded" / "a"),
               "--out", str(toy_data / "r4")])
    assert rc == 1


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def test_eval_perfect_prediction_hits_the_caps(toy_data, capsys):
    clean = toy_data / "data" / "clean" / "a"
    out = toy_data / "eval0"
    rc = main(["eval", "--pred", str(clean), "--gt", str(clean),
               "--out", str(out)])
    assert rc == 0
    assert "mean" in capsys.readouterr().out
    rows = (out / "report.csv").read_text().splitlines()
    assert rows[-1] == "mean,99.000000,1.000000"


def test_eval_matches_metrics_module(toy_data):
    pred_dir = toy_data / "data" / "degraded" / "a"
    gt_dir = toy_data / "data" / "clean" / "a"
    out = toy_data / "eval1"
    assert main(["eval", "--pred", str(pred_dir), "--gt", str(gt_dir),
                 "--out", str(out)]) == 0
    report = evaluate_pair_sequences(load_sequence(pred_dir),
                                     load_sequence(gt_dir))
    mean_row = (out / "report.csv").read_text().splitlines()[-1].split(",")
    assert abs(float(mean_row[1]) - report.sequence_mean_psnr) < 1e-6
    assert abs(float(mean_row[2]) - report.sequence_mean_ssim) < 1e-6
    assert report.sequence_mean_psnr < 99.0  # degraded input really is worse


def test_eval_count_mismatch(toy_data):
    short = toy_data / "short_gt"
    save_sequence(short, [moving_pattern(0)])
    rc = main(["eval", "--pred", str(toy_data / "data" / "clean" / "a"),
               "--gt", str(short), "--out", str(toy_data / "eval2")])
    assert rc == 2


# ---------------------------------------------------------------------------
# exit codes and gradcheck plumbing
# ---------------------------------------------------------------------------


def test_unknown_flag_is_usage_error(capsys):
    assert main(["degrade", "--frobnicate"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_unknown_command_is_usage_error():
    assert main(["transmogrify"]) == 1


def test_missing_input_directory_is_data_error(tmp_path, capsys):
    rc = main(["degrade", "--in", str(tmp_path / "nope"),
               "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "data error" in capsys.readouterr().err


def test_gradcheck_detects_a_corrupted_backward_rule(capsys):
    rc = main(["gradcheck", "--corrupt-op", "matmul:1.05"])
    assert rc == 3
    captured = capsys.readouterr()
    assert "matmul" in captured.out and "FAIL" in captured.out
    assert "verification failure" in captured.err


def test_gradcheck_corrupt_flag_needs_a_factor():
    assert main(["gradcheck", "--corrupt-op", "matmul"]) == 1
