"""Boundary degradations used to build the restoration path inputs.

All operators act on the alpha matte only; rgb is passed through untouched.
Morphology uses a Euclidean disk and replicates frame edges, so a mask that
is opaque everywhere stays opaque under erosion.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .core import ForegroundLayer, as_alpha

KINDS = ("erode", "dilate", "blur", "expand_then_erode")


def disk_offsets(radius: int) -> list[tuple[int, int]]:
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def _check_radius(radius) -> int:
    if isinstance(radius, bool) or int(radius) != radius or radius < 1:
        raise ValueError(f"radius must be an integer >= 1, got {radius!r}")
    return int(radius)


def _disk_reduce(mask: np.ndarray, radius: int, reduce) -> np.ndarray:
    h, w = mask.shape
    padded = np.pad(mask, radius, mode="edge")
    out = None
    for dy, dx in disk_offsets(radius):
        view = padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
        out = view.copy() if out is None else reduce(out, view, out=out)
    return out


def erode_alpha(mask, radius: int) -> np.ndarray:
    """Per-pixel minimum over a disk of the given radius."""
    return _disk_reduce(as_alpha(mask), _check_radius(radius), np.minimum)


def dilate_alpha(mask, radius: int) -> np.ndarray:
    """Per-pixel maximum over a disk of the given radius."""
    return _disk_reduce(as_alpha(mask), _check_radius(radius), np.maximum)


def gaussian_kernel(sigma: float, truncate: float = 4.0) -> np.ndarray:
    half = max(1, int(math.ceil(truncate * sigma)))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur_boundary(mask, sigma: float) -> np.ndarray:
    """Gaussian blur, renormalized by the kernel mass that falls inside the frame."""
    if not (sigma > 0) or not math.isfinite(sigma):
        raise ValueError(f"sigma must be a positive finite number, got {sigma!r}")
    mask = as_alpha(mask)
    k = gaussian_kernel(sigma)

    def sep(a):
        a = correlate1d(a, k, axis=0, mode="constant", cval=0.0)
        return correlate1d(a, k, axis=1, mode="constant", cval=0.0)

    out = sep(mask) / sep(np.ones_like(mask))
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    radius: int = 1
    blur_sigma: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        _check_radius(self.radius)
        if self.kind == "blur":
            if self.blur_sigma is None or not self.blur_sigma > 0:
                raise ValueError("blur degradations need blur_sigma > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(kind=d["kind"], radius=int(d["radius"]), blur_sigma=d.get("blur_sigma"), seed=int(d.get("seed", 0)))


@dataclass(frozen=True)
class DegradationRanges:
    kinds: tuple = KINDS
    radius: tuple = (1, 8)
    sigma: tuple = (0.5, 4.0)

    def __post_init__(self):
        if not self.kinds:
            raise ValueError("at least one degradation kind must be enabled")
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown degradation kind {k!r}")
        lo, hi = self.radius
        if lo < 1 or hi < lo:
            raise ValueError(f"bad radius range {self.radius}")
        lo, hi = self.sigma
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad sigma range {self.sigma}")


def sample_degradation(seed: int, config: Optional[DegradationRanges] = None) -> DegradationSpec:
    config = config or DegradationRanges()
    rng = np.random.default_rng(seed)
    kind = config.kinds[int(rng.integers(len(config.kinds)))]
    radius = int(rng.integers(config.radius[0], config.radius[1] + 1))
    sigma = float(rng.uniform(*config.sigma))
    return DegradationSpec(kind=kind, radius=radius, blur_sigma=sigma if kind == "blur" else None, seed=int(seed))


def degrade_alpha(alpha, spec: DegradationSpec) -> np.ndarray:
    alpha = as_alpha(alpha)
    limit = min(alpha.shape) / 4
    if spec.kind != "blur" and spec.radius > limit:
        raise ValueError(f"radius {spec.radius} exceeds min(H, W)/4 = {limit:g}")
    if spec.kind == "erode":
        return erode_alpha(alpha, spec.radius)
    if spec.kind == "dilate":
        return dilate_alpha(alpha, spec.radius)
    if spec.kind == "blur":
        return blur_boundary(alpha, spec.blur_sigma)
    # grow the region first, then cut back twice as far
    return erode_alpha(dilate_alpha(alpha, spec.radius), 2 * spec.radius)


def degrade_layer(layer: ForegroundLayer, spec: DegradationSpec) -> ForegroundLayer:
    return ForegroundLayer(rgb=layer.rgb, alpha=degrade_alpha(layer.alpha, spec), order_index=layer.order_index)
