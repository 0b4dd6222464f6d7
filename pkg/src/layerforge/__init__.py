"""Layered-image data curation, training targets and evaluation."""

from .core import (
    ClampWarning,
    ForegroundLayer,
    LayeredSample,
    alpha_over,
    composite,
    composite_on_white,
    recompose,
    shadow_residual,
)

__version__ = "0.1.0"

__all__ = [
    "ClampWarning",
    "ForegroundLayer",
    "LayeredSample",
    "alpha_over",
    "composite",
    "composite_on_white",
    "recompose",
    "shadow_residual",
]
