"""Slice-stack MRI reconstruction with an implicit field and diffusion polish."""

from .config import TrainConfig, config_from_dict
from .core import Stack, Volume, centered_volume, sample_volume
from .geometry import RigidTransform, psf_covariance

__version__ = "0.1.0"

__all__ = [
    "Stack",
    "TrainConfig",
    "RigidTransform",
    "Volume",
    "centered_volume",
    "config_from_dict",
    "psf_covariance",
    "sample_volume",
    "__version__",
]
