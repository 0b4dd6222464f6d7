"""Value types and compositing math for layered images.

Images are float64 arrays of shape ``(H, W, 3)`` with values in ``[0, 1]``;
alpha mattes are ``(H, W)`` arrays in ``[0, 1]``. Alpha is straight (not
premultiplied) and values are raw decoded sRGB, with no gamma handling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class ClampWarning(UserWarning):
    """Raised when a recomposition had to be clamped back into [0, 1]."""


def as_image(data, name: str = "image") -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be at least 1x1")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must be finite and within [0, 1]")
    return arr


def as_alpha(data, name: str = "alpha") -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"{name} must have shape (H, W), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be at least 1x1")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must be finite and within [0, 1]")
    return arr


def as_residual(data, name: str = "shadow") -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < -1.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must be finite and within [-1, 1]")
    return arr


def _check_hw(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"{what}: dimension mismatch {a.shape[:2]} vs {b.shape[:2]}")


@dataclass(frozen=True)
class ForegroundLayer:
    """RGB appearance plus alpha matte. ``order_index`` 1 is frontmost."""

    rgb: np.ndarray
    alpha: np.ndarray
    order_index: int = 1

    def __post_init__(self):
        object.__setattr__(self, "rgb", as_image(self.rgb, "layer rgb"))
        object.__setattr__(self, "alpha", as_alpha(self.alpha, "layer alpha"))
        _check_hw(self.rgb, self.alpha, "ForegroundLayer")
        if int(self.order_index) < 1:
            raise ValueError("order_index must be >= 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape


@dataclass(frozen=True)
class LayeredSample:
    source: np.ndarray
    background: np.ndarray
    layers: list[ForegroundLayer] = field(default_factory=list)
    shadow: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "source", as_image(self.source, "source"))
        object.__setattr__(self, "background", as_image(self.background, "background"))
        _check_hw(self.source, self.background, "LayeredSample")
        layers = sorted(self.layers, key=lambda l: l.order_index)
        for k, layer in enumerate(layers, start=1):
            if layer.order_index != k:
                raise ValueError("layer order indices must be unique and contiguous from 1")
            _check_hw(self.source, layer.rgb, "LayeredSample layer")
        object.__setattr__(self, "layers", layers)
        if self.shadow is not None:
            shadow = as_residual(self.shadow)
            _check_hw(self.source, shadow, "LayeredSample shadow")
            object.__setattr__(self, "shadow", shadow)

    @property
    def shape(self) -> tuple[int, int]:
        return self.source.shape[:2]

    def roundtrip_error(self) -> float:
        """Max abs difference between ``composite + shadow`` and the source."""
        if self.shadow is None:
            raise ValueError("sample has no shadow residual")
        recon = composite(self.background, self.layers) + self.shadow
        return float(np.max(np.abs(recon - self.source)))


def alpha_over(layer: ForegroundLayer, under) -> np.ndarray:
    under = np.asarray(under, dtype=np.float64)
    _check_hw(layer.rgb, under, "alpha_over")
    a = layer.alpha[:, :, None]
    out = layer.rgb * a + under * (1.0 - a)
    # a*x + (1-a)*y can overshoot 1.0 by an ulp
    return np.clip(out, 0.0, 1.0, out=out)


def composite(background, layers: Sequence[ForegroundLayer]) -> np.ndarray:
    """Stack ``layers`` over ``background``, back to front.

    Layers are applied in descending ``order_index`` so that layer 1 ends
    up on top. An empty stack returns a copy of the background.
    """
    out = np.array(background, dtype=np.float64)
    for layer in sorted(layers, key=lambda l: l.order_index, reverse=True):
        out = alpha_over(layer, out)
    return out


def shadow_residual(source, recomposed) -> np.ndarray:
    source = np.asarray(source, dtype=np.float64)
    recomposed = np.asarray(recomposed, dtype=np.float64)
    _check_hw(source, recomposed, "shadow_residual")
    return source - recomposed


def recompose(recomposed, shadow) -> np.ndarray:
    """Add a shadow residual back onto a recomposed image.

    Out-of-range sums are clamped and reported with a ``ClampWarning``;
    this cannot happen for a residual taken from a valid sample.
    """
    recomposed = np.asarray(recomposed, dtype=np.float64)
    shadow = np.asarray(shadow, dtype=np.float64)
    _check_hw(recomposed, shadow, "recompose")
    out = recomposed + shadow
    lo, hi = out.min(), out.max()
    if lo < 0.0 or hi > 1.0:
        warnings.warn(
            f"recomposed values outside [0, 1] (min={lo:.6g}, max={hi:.6g}); clamped",
            ClampWarning,
            stacklevel=2,
        )
        np.clip(out, 0.0, 1.0, out=out)
    return out


def composite_on_white(alpha, x) -> np.ndarray:
    """``x * alpha + (1 - alpha)``: the masked view used by the selector."""
    alpha = np.asarray(alpha, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_hw(alpha, x, "composite_on_white")
    a = alpha[:, :, None]
    return x * a + (1.0 - a)
