"""Under-display-camera degradation: parametric blur, attenuation, noise.

A clean frame x in [0,1] degrades as

    y = clamp_01( (gamma * x) (*) k  +  n )

where (*) is true convolution with the point-spread function k (kernel
flipped relative to the cross-correlation implemented by
``tensor.conv2d``), gamma in (0,1] attenuates intensity, and n is
zero-mean Gaussian noise whose per-pixel variance is affine in the
signal: lambda_read + lambda_shot * x.  Borders are replicate-padded so
a constant frame stays constant.

PSF families are parametric stand-ins for measured display kernels:

* ``gaussian``     - isotropic blur.
* ``toled_banded`` - Gaussian with a cosine modulation along columns,
                     giving the periodic vertical banding seen through
                     striped transparent displays.
* ``poled_haze``   - narrow Gaussian core mixed with a wide uniform
                     disk, giving low-contrast diffraction haze.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, DataError
from .tensor import Tensor, conv2d

__all__ = [
    "PsfSpec",
    "DegradationParams",
    "make_psf",
    "sample_noise",
    "noise_field",
    "degrade_frame",
    "degrade_sequence",
    "save_params",
    "load_params",
]

PSF_KINDS = ("gaussian", "toled_banded", "poled_haze")


@dataclass(frozen=True)
class PsfSpec:
    """Parametric description of a point-spread function."""

    kind: str
    size: int = 9
    sigma: float = 2.0
    band_period: int = 3  # toled_banded only
    band_amplitude: float = 0.5  # toled_banded only
    haze_weight: float = 0.3  # poled_haze only

    def __post_init__(self):
        if self.kind not in PSF_KINDS:
            raise ConfigurationError(
                f"unknown psf kind {self.kind!r}; expected one of {PSF_KINDS}"
            )
        if self.size < 1 or self.size % 2 == 0:
            raise ConfigurationError(f"psf size must be odd and positive, got {self.size}")
        if self.size > 1 and self.sigma <= 0:
            raise ConfigurationError(f"psf sigma must be positive, got {self.sigma}")
        if self.kind == "toled_banded":
            if self.band_period < 1:
                raise ConfigurationError(f"band_period must be >= 1, got {self.band_period}")
            if not 0.0 <= self.band_amplitude <= 1.0:
                raise ConfigurationError(
                    f"band_amplitude must be in [0,1], got {self.band_amplitude}"
                )
        if self.kind == "poled_haze" and not 0.0 <= self.haze_weight <= 1.0:
            raise ConfigurationError(
                f"haze_weight must be in [0,1], got {self.haze_weight}"
            )


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size == 1:
        return np.ones((1, 1))
    ax = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def make_psf(spec: PsfSpec) -> np.ndarray:
    """Generate the kernel for ``spec``: nonnegative, sums to 1."""
    if spec.kind == "gaussian":
        k = _gaussian_kernel(spec.size, spec.sigma)
    elif spec.kind == "toled_banded":
        g = _gaussian_kernel(spec.size, spec.sigma)
        ax = np.arange(spec.size, dtype=np.float64) - spec.size // 2
        modulation = 1.0 + spec.band_amplitude * np.cos(
            2.0 * np.pi * ax / spec.band_period
        )
        k = np.clip(g * modulation[None, :], 0.0, None)
        k = k / k.sum()
    else:  # poled_haze
        core = _gaussian_kernel(spec.size, spec.sigma)
        ax = np.arange(spec.size, dtype=np.float64) - spec.size // 2
        radius = spec.size // 2
        disk = ((ax[:, None] ** 2 + ax[None, :] ** 2) <= radius * radius).astype(
            np.float64
        )
        disk = disk / disk.sum()
        k = (1.0 - spec.haze_weight) * core + spec.haze_weight * disk
        k = k / k.sum()
    return k


@dataclass
class DegradationParams:
    """Fixed per-sequence imaging-system parameters."""

    psf: np.ndarray
    gamma: float = 1.0
    lambda_read: float = 4e-4
    lambda_shot: float = 8e-4
    seed: int = 0

    def __post_init__(self):
        self.psf = np.asarray(self.psf, dtype=np.float64)
        if self.psf.ndim != 2:
            raise ConfigurationError(f"psf must be 2-d, got shape {self.psf.shape}")
        if (self.psf < 0).any():
            raise ConfigurationError("psf entries must be nonnegative")
        if abs(self.psf.sum() - 1.0) > 1e-9:
            raise ConfigurationError(f"psf must sum to 1, got {self.psf.sum()!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must be in (0,1], got {self.gamma}")
        if self.lambda_read < 0 or self.lambda_shot < 0:
            raise ConfigurationError(
                f"noise parameters must be nonnegative, got "
                f"lambda_read={self.lambda_read}, lambda_shot={self.lambda_shot}"
            )
        self.seed = int(self.seed)


def sample_noise(
    x_val: float,
    lambda_read: float,
    lambda_shot: float,
    rng: np.random.Generator,
) -> float:
    """One draw from N(0, lambda_read + lambda_shot * x_val)."""
    if lambda_read < 0 or lambda_shot < 0:
        raise ConfigurationError(
            f"noise parameters must be nonnegative, got "
            f"lambda_read={lambda_read}, lambda_shot={lambda_shot}"
        )
    var = lambda_read + lambda_shot * x_val
    if var == 0.0:
        return 0.0
    return float(rng.normal(0.0, np.sqrt(var)))


def noise_field(
    x: np.ndarray,
    lambda_read: float,
    lambda_shot: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Pixelwise heteroscedastic noise for a whole frame, per channel."""
    if lambda_read < 0 or lambda_shot < 0:
        raise ConfigurationError(
            f"noise parameters must be nonnegative, got "
            f"lambda_read={lambda_read}, lambda_shot={lambda_shot}"
        )
    var = lambda_read + lambda_shot * x
    if lambda_read == 0.0 and lambda_shot == 0.0:
        return np.zeros_like(x)
    return rng.normal(0.0, 1.0, x.shape) * np.sqrt(var)


def _convolve_true(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel true convolution (flipped kernel) with replicate borders.

    Routed through the shared sliding-kernel substrate ``tensor.conv2d``,
    which is a cross-correlation; flipping the kernel recovers
    mathematical convolution.
    """
    c, h, w = x.shape
    kh, kw = kernel.shape
    if kh > h or kw > w:
        raise ConfigurationError(
            f"psf {kh}x{kw} larger than frame {h}x{w}"
        )
    flipped = kernel[::-1, ::-1]
    weight = np.zeros((c, c, kh, kw))
    for ch in range(c):
        weight[ch, ch] = flipped
    padded = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)), mode="edge")
    out = conv2d(Tensor(padded), Tensor(weight), None, stride=1, padding=0)
    return out.data


def degrade_frame(
    x: np.ndarray,
    params: DegradationParams,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Degrade one 3xHxW frame in [0,1]; see the module docstring."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ContractError(f"expected CxHxW frame, got shape {x.shape}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise DataError(
            f"frame values outside [0,1]: min={x.min():.4g} max={x.max():.4g}"
        )
    if rng is None:
        rng = np.random.default_rng(params.seed)
    blurred = _convolve_true(params.gamma * x, params.psf)
    noisy = blurred + noise_field(blurred, params.lambda_read, params.lambda_shot, rng)
    return np.clip(noisy, 0.0, 1.0)


def degrade_sequence(
    frames: list[np.ndarray], params: DegradationParams
) -> list[np.ndarray]:
    """Degrade every frame with shared gamma/psf, independent noise.

    Frame i's noise stream is seeded as ``params.seed XOR i`` so frames
    are reproducible independently and in parallel.
    """
    if not frames:
        raise ContractError("cannot degrade an empty sequence")
    shapes = {np.asarray(f).shape for f in frames}
    if len(shapes) > 1:
        raise ContractError(f"inconsistent frame shapes: {sorted(shapes)}")
    out = []
    for i, frame in enumerate(frames):
        rng = np.random.default_rng(params.seed ^ i)
        out.append(degrade_frame(frame, params, rng))
    return out


# ---------------------------------------------------------------------------
# Flat key=value serialization
# ---------------------------------------------------------------------------


def save_params(path, params: DegradationParams) -> None:
    kh, kw = params.psf.shape
    lines = [
        f"gamma={float(params.gamma)!r}",
        f"lambda_read={float(params.lambda_read)!r}",
        f"lambda_shot={float(params.lambda_shot)!r}",
        f"seed={params.seed}",
        f"psf_rows={kh}",
        f"psf_cols={kw}",
        "psf=" + ",".join(repr(float(v)) for v in params.psf.reshape(-1)),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path) -> DegradationParams:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"params file not found: {path}")
    kv = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    try:
        rows, cols = int(kv["psf_rows"]), int(kv["psf_cols"])
        psf = np.array([float(v) for v in kv["psf"].split(",")]).reshape(rows, cols)
        return DegradationParams(
            psf=psf,
            gamma=float(kv["gamma"]),
            lambda_read=float(kv["lambda_read"]),
            lambda_shot=float(kv["lambda_shot"]),
            seed=int(kv["seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: invalid degradation params: {exc}") from exc
