"""udcvr: under-display-camera video degradation and restoration.

A self-contained toolkit that (1) synthesizes UDC video degradation
with parametric point-spread functions, light attenuation and
signal-dependent Gaussian noise, and (2) trains a two-branch windowed
transformer that restores the center frame of a short clip, using a
built-in float64 reverse-mode differentiation engine throughout.
"""

__version__ = "0.1.0"

from .tensor import Tensor, Tape
from .degrade import DegradationParams, PsfSpec, degrade_frame, degrade_sequence, make_psf
from .network import ModelConfig, RestorationModel
from .training import Adam, TrainConfig, charbonnier_loss, train_loop
from .metrics import MetricReport, psnr, ssim

__all__ = [
    "__version__",
    "Tensor",
    "Tape",
    "DegradationParams",
    "PsfSpec",
    "make_psf",
    "degrade_frame",
    "degrade_sequence",
    "ModelConfig",
    "RestorationModel",
    "Adam",
    "TrainConfig",
    "charbonnier_loss",
    "train_loop",
    "MetricReport",
    "psnr",
    "ssim",
]
