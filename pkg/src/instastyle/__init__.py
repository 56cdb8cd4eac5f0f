"""Stylized generation from a single reference via DDIM inversion noise, on a synthetic styled domain."""

from .core import InvalidArgument, Rng, split
from .estimator import DiffusionPrior, InstaStyle
from .pipeline import PipelineConfig, run, sweep

__all__ = ["DiffusionPrior", "InstaStyle", "InvalidArgument", "PipelineConfig", "Rng", "run", "split", "sweep"]
__version__ = "0.1.0"
