"""Multi-expert mask fusion and RGBA assembly from white-background crops."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ForegroundLayer, as_alpha, as_image


def bilinear_resize(arr: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resampling with pixel-center alignment and edge clamping.

    Works on ``(H, W)`` and ``(H, W, C)`` arrays.
    """
    target_h, target_w = int(target_h), int(target_w)
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target dims must be >= 1, got {target_h}x{target_w}")
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == (target_h, target_w):
        return arr.copy()

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis_weights(h, target_h)
    x0, x1, fx = axis_weights(w, target_w)
    if arr.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    # lerp form a + (b - a) * f keeps constant regions bit-exact
    r0, r1 = arr[y0], arr[y1]
    top = r0[:, x0] + (r0[:, x1] - r0[:, x0]) * fx
    bottom = r1[:, x0] + (r1[:, x1] - r1[:, x0]) * fx
    return top + (bottom - top) * fy


def resample_mask(mask, target_h: int, target_w: int) -> np.ndarray:
    mask = as_alpha(mask)
    return np.clip(bilinear_resize(mask, target_h, target_w), 0.0, 1.0)


@dataclass
class ExpertMaskSet:
    masks: list
    expert_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.masks:
            raise ValueError("ExpertMaskSet needs at least one mask")
        self.masks = [as_alpha(m, "expert mask") for m in self.masks]
        if not self.expert_ids:
            self.expert_ids = [f"expert{n}" for n in range(len(self.masks))]
        if len(self.expert_ids) != len(self.masks):
            raise ValueError("expert_ids must align with masks")

    def resampled(self, target_h: int, target_w: int) -> "ExpertMaskSet":
        return ExpertMaskSet(
            [resample_mask(m, target_h, target_w) for m in self.masks],
            list(self.expert_ids),
        )


def fuse_masks(mask_set: ExpertMaskSet, weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Per-pixel mean of the expert masks.

    ``weights`` switches to a normalized weighted mean; by default every
    expert counts equally.
    """
    masks = mask_set.masks
    if not masks:
        raise ValueError("cannot fuse an empty mask set")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise ValueError("masks must be resampled to common dims before fusion")
    stack = np.stack(masks)
    if weights is None:
        # sort along the expert axis so the sum, and hence the result, is
        # bit-identical under any expert order
        fused = np.sort(stack, axis=0).sum(axis=0) / len(masks)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(masks),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be non-negative, one per expert, not all zero")
        fused = np.tensordot(w / w.sum(), stack, axes=1)
    return np.clip(fused, stack.min(axis=0), stack.max(axis=0))


def make_rgba(white_bg, alpha, order_index: int = 1) -> ForegroundLayer:
    white_bg = as_image(white_bg, "white-background crop")
    alpha = as_alpha(alpha)
    if white_bg.shape[:2] != alpha.shape:
        raise ValueError(f"make_rgba: dimension mismatch {white_bg.shape[:2]} vs {alpha.shape}")
    return ForegroundLayer(rgb=white_bg, alpha=alpha, order_index=order_index)
