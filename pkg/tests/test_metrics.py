"""PSNR / SSIM correctness."""

import math

import numpy as np
import pytest

from udcvr.errors import ShapeMismatchError
from udcvr.metrics import (
    PSNR_SENTINEL_DB,
    SSIM_K1,
    evaluate_pair_sequences,
    psnr,
    ssim,
)


def rng_(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------


def test_psnr_identical_is_infinite():
    img = rng_(1).random((3, 16, 16))
    assert psnr(img, img.copy()) == math.inf


def test_psnr_uniform_tenth_is_twenty_db():
    a = np.zeros((3, 8, 8))
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9


def test_psnr_matches_loop_mse():
    rng = rng_(2)
    a, b = rng.random((2, 5, 5)), rng.random((2, 5, 5))
    acc = 0.0
    for c in range(2):
        for i in range(5):
            for j in range(5):
                acc += (a[c, i, j] - b[c, i, j]) ** 2
    expected = 10.0 * math.log10(1.0 / (acc / 50.0))
    assert abs(psnr(a, b) - expected) < 1e-10


def test_psnr_is_symmetric():
    rng = rng_(3)
    a, b = rng.random((3, 6, 6)), rng.random((3, 6, 6))
    assert psnr(a, b) == psnr(b, a)


def test_psnr_decreases_with_noise_amplitude():
    base = rng_(4).random((3, 32, 32))
    noise = rng_(5).standard_normal((3, 32, 32))
    values = [psnr(base, base + amp * noise) for amp in (0.01, 0.03, 0.1)]
    assert values[0] > values[1] > values[2]


def test_psnr_shape_contract():
    with pytest.raises(ShapeMismatchError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 5, 5)))


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def test_ssim_identical_is_exactly_one():
    img = rng_(6).random((3, 24, 24))
    assert ssim(img, img.copy()) == 1.0


def test_ssim_constant_images_closed_form():
    """Flat 0 vs flat 1: variances vanish, means give C1 / (1 + C1)."""
    a = np.zeros((16, 16))
    b = np.ones((16, 16))
    c1 = SSIM_K1 ** 2
    assert abs(ssim(a, b) - c1 / (1.0 + c1)) < 1e-12


def test_ssim_is_symmetric():
    rng = rng_(7)
    a, b = rng.random((3, 20, 20)), rng.random((3, 20, 20))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_ssim_constant_shift_is_nearly_invariant():
    """Structure is unchanged by a small DC offset; only the mean term
    moves, and C1 keeps that movement tiny."""
    img = rng_(8).random((20, 20)) * 0.5 + 0.25
    assert ssim(img, img + 1e-4) > 0.9999


def test_ssim_degrades_with_noise():
    base = rng_(9).random((24, 24))
    noise = rng_(10).standard_normal((24, 24))
    values = [ssim(base, base + amp * noise) for amp in (0.01, 0.05, 0.2)]
    assert 1.0 > values[0] > values[1] > values[2]


def test_ssim_in_unit_interval_for_positive_images():
    rng = rng_(11)
    for seed in range(5):
        a = np.random.default_rng(seed).random((14, 14))
        b = np.random.default_rng(seed + 100).random((14, 14))
        v = ssim(a, b)
        assert -1.0 <= v <= 1.0


def test_ssim_rejects_small_images():
    with pytest.raises(ShapeMismatchError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_accepts_2d_and_3d():
    img = rng_(12).random((12, 12))
    assert ssim(img, img) == 1.0
    stack = np.stack([img, img, img])
    assert ssim(stack, stack) == 1.0


# ---------------------------------------------------------------------------
# sequence report
# ---------------------------------------------------------------------------


def test_report_caps_infinite_psnr():
    img = rng_(13).random((3, 16, 16))
    report = evaluate_pair_sequences([img], [img.copy()])
    assert report.per_frame[0][1] == PSNR_SENTINEL_DB
    assert report.per_frame[0][2] == 1.0
    assert report.sequence_mean_psnr == PSNR_SENTINEL_DB


def test_report_rows_and_means():
    rng = rng_(14)
    gt = [rng.random((3, 16, 16)) for _ in range(3)]
    pred = [np.clip(f + 0.05 * rng.standard_normal(f.shape), 0, 1) for f in gt]
    report = evaluate_pair_sequences(pred, gt)
    assert len(report.per_frame) == 3
    psnrs = [r[1] for r in report.per_frame]
    assert abs(report.sequence_mean_psnr - np.mean(psnrs)) < 1e-12
    csv = report.to_csv()
    assert csv.startswith("frame,psnr_db,ssim")
    assert csv.strip().splitlines()[-1].startswith("mean,")
    table = report.to_table()
    assert "mean" in table and "psnr_db" in table


def test_report_length_mismatch():
    img = np.zeros((3, 16, 16))
    with pytest.raises(ShapeMismatchError):
        evaluate_pair_sequences([img], [img, img])
