"""Anatomy-guided masked image modeling for vessel images, at desk scale."""

__version__ = "0.1.0"

from .masking import Schedule, anatomy_distribution, beta_at, sample_mask_plan
from .metrics import cldice, dsc, skeletonize
from .mim import LinearProbe, MaskedAutoencoder, pretrain
from .segmentor import Segmentor
from .synthdata import PhantomConfig, generate_phantom, make_benchmark
from .validation import ConfigError, ModelStateError, ParameterError, ShapeError
from .vesselness import FrangiConfig, FrangiExtractor, extract_anatomy

__all__ = [
    "__version__",
    "ConfigError",
    "FrangiConfig",
    "FrangiExtractor",
    "LinearProbe",
    "MaskedAutoencoder",
    "ModelStateError",
    "ParameterError",
    "PhantomConfig",
    "Schedule",
    "Segmentor",
    "ShapeError",
    "anatomy_distribution",
    "beta_at",
    "cldice",
    "dsc",
    "extract_anatomy",
    "generate_phantom",
    "make_benchmark",
    "pretrain",
    "sample_mask_plan",
    "skeletonize",
]
