"""Proposal selection over background/foreground pools.

Every candidate (source, background, foreground subset) is checked against
three constraints: no two foregrounds in a subset describe the same region,
no background already contains one of the chosen foregrounds, and the
composite looks like the source it claims to explain.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ForegroundLayer, composite, composite_on_white
from .fusion import bilinear_resize, resample_mask

logger = logging.getLogger(__name__)

EmbeddingProvider = Callable[[np.ndarray], np.ndarray]


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding contains non-finite values")
    n = np.linalg.norm(v)
    if n == 0:
        return v
    return v / n


def cosine(u, v) -> float:
    """Cosine similarity; a zero vector is similar to nothing (returns 0)."""
    u, v = np.asarray(u, dtype=np.float64).ravel(), np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"embedding dims differ: {u.size} vs {v.size}")
    u, v = normalize(u), normalize(v)
    return float(np.clip(np.dot(u, v), -1.0, 1.0))


def cell_means(arr: np.ndarray, grid: int) -> np.ndarray:
    """Average ``arr`` over a ``grid x grid`` partition of its frame."""
    h, w = arr.shape[:2]
    if h < grid or w < grid:
        arr = bilinear_resize(arr, max(h, grid), max(w, grid))
        h, w = arr.shape[:2]
    ys = np.linspace(0, h, grid + 1).round().astype(int)
    xs = np.linspace(0, w, grid + 1).round().astype(int)
    sums = np.add.reduceat(np.add.reduceat(arr, ys[:-1], axis=0), xs[:-1], axis=1)
    counts = np.outer(np.diff(ys), np.diff(xs))
    if arr.ndim == 3:
        counts = counts[:, :, None]
    return sums / counts


class DownsampleEmbedder:
    """Grayscale ``grid x grid`` thumbnail, flattened and L2-normalized."""

    def __init__(self, grid: int = 8):
        self.grid = grid
        self.dims = grid * grid

    def __call__(self, image) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        gray = image.mean(axis=2) if image.ndim == 3 else image
        v = cell_means(gray, self.grid).ravel()
        n = np.linalg.norm(v)
        if n == 0:
            return np.full(self.dims, 1.0 / np.sqrt(self.dims))
        return v / n


class ChromaLayoutEmbedder:
    """Thumbnail features measured against white.

    Each cell contributes its darkness (1 - luminance) and weighted opponent
    chroma, so white regions vanish and colored objects dominate over gray
    backgrounds. An all-white image embeds to the zero vector.
    """

    def __init__(self, grid: int = 8, chroma_weight: float = 2.0):
        self.grid = grid
        self.chroma_weight = chroma_weight
        self.dims = grid * grid * 4

    def __call__(self, image) -> np.ndarray:
        cells = cell_means(np.asarray(image, dtype=np.float64), self.grid)
        r, g, b = cells[..., 0], cells[..., 1], cells[..., 2]
        ink = 1.0 - cells.mean(axis=2)
        w = self.chroma_weight
        feats = np.stack([ink, w * (r - g), w * (g - b), w * (b - r)], axis=-1)
        return normalize(feats)


def dedup(images: Sequence, provider: EmbeddingProvider, tau_dup: float = 0.95) -> list[int]:
    """Greedy first-seen-kept de-duplication; returns kept indices."""
    if not images:
        return []
    kept: list[int] = []
    kept_emb: list[np.ndarray] = []
    for i, img in enumerate(images):
        e = provider(img)
        if any(cosine(e, k) > tau_dup for k in kept_emb):
            continue
        kept.append(i)
        kept_emb.append(e)
    return kept


@dataclass(frozen=True)
class SelectorConfig:
    tau_local: float = 0.85
    tau_global: float = 0.80
    tau_dup: float = 0.95
    max_foregrounds: int = 5

    def __post_init__(self):
        for name in ("tau_local", "tau_global", "tau_dup"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if not (1 <= self.max_foregrounds <= 5):
            raise ValueError("max_foregrounds must lie in [1, 5]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Proposal:
    source_ref: str
    background_ref: str
    foreground_ids: tuple
    global_similarity: float

    def __post_init__(self):
        if self.source_ref == self.background_ref:
            raise ValueError("a proposal cannot use its source as background")
        if not self.foreground_ids:
            raise ValueError("a proposal needs at least one foreground")
        if list(self.foreground_ids) != sorted(self.foreground_ids):
            raise ValueError("foreground ids must follow pool order")

    @property
    def key(self) -> tuple:
        return (self.source_ref, self.background_ref, tuple(self.foreground_ids))

    def to_dict(self) -> dict:
        return {
            "source_ref": self.source_ref,
            "background_ref": self.background_ref,
            "foreground_ids": list(self.foreground_ids),
            "scores": {"global_similarity": self.global_similarity},
        }


def background_ref(j: int) -> str:
    return f"bg{j}"


SOURCE_REF = "image"


def _masked_view(alpha, x):
    if alpha.shape != x.shape[:2]:
        alpha = resample_mask(alpha, *x.shape[:2])
    return composite_on_white(alpha, x)


def masked_features(foregrounds: Sequence[ForegroundLayer], backgrounds: Sequence, provider: EmbeddingProvider):
    """Embeddings of every foreground/background seen through every foreground mask.

    Returns ``(fF, fB)`` with ``fF[i, j] = phi(M(alpha_i, F_j))`` of shape
    ``(K, K, D)`` and ``fB[i, j] = phi(M(alpha_i, B_j))`` of shape
    ``(K, |B|, D)``.
    """
    if not foregrounds:
        raise ValueError("foreground pool is empty")

    def embed(img, what):
        try:
            return normalize(provider(img))
        except Exception as exc:
            raise RuntimeError(f"embedding failed for {what}: {exc}") from exc

    fF = np.stack([
        np.stack([embed(_masked_view(fi.alpha, fj.rgb), f"fF[{i}][{j}]") for j, fj in enumerate(foregrounds)])
        for i, fi in enumerate(foregrounds)
    ])
    if backgrounds:
        fB = np.stack([
            np.stack([embed(_masked_view(fi.alpha, b), f"fB[{i}][{j}]") for j, b in enumerate(backgrounds)])
            for i, fi in enumerate(foregrounds)
        ])
    else:
        fB = np.zeros((len(foregrounds), 0, fF.shape[-1]))
    return fF, fB


def valid_foreground_subsets(fF: np.ndarray, tau_local: float, max_foregrounds: int = 5) -> list[tuple]:
    """All non-empty subsets (size <= max) with no overlapping pair.

    A pair ``i < j`` overlaps when the front layer's own masked view is more
    than ``tau_local`` similar to the rear layer seen through the same mask.
    Subsets come out by size, then lexicographically.
    """
    k = fF.shape[0]
    clash = {
        (i, j)
        for i in range(k)
        for j in range(i + 1, k)
        if cosine(fF[i, i], fF[i, j]) > tau_local
    }
    out = []
    for size in range(1, min(k, max_foregrounds) + 1):
        for sub in itertools.combinations(range(k), size):
            if not any(pair in clash for pair in itertools.combinations(sub, 2)):
                out.append(sub)
    return out


def subset_layers(foregrounds: Sequence[ForegroundLayer], subset: Sequence[int]) -> list[ForegroundLayer]:
    return [
        ForegroundLayer(rgb=foregrounds[i].rgb, alpha=foregrounds[i].alpha, order_index=n)
        for n, i in enumerate(subset, start=1)
    ]


def select_proposals(
    source,
    backgrounds: Sequence,
    foregrounds: Sequence[ForegroundLayer],
    provider: EmbeddingProvider,
    config: Optional[SelectorConfig] = None,
    features=None,
) -> list[Proposal]:
    """Enumerate every (source, background, subset) triple and keep the consistent ones.

    Sources are the input image followed by each background; a background
    never serves as its own source. Output order follows that enumeration.
    """
    config = config or SelectorConfig()
    if not backgrounds:
        raise ValueError("background pool is empty")
    if len(foregrounds) > config.max_foregrounds:
        raise ValueError(f"{len(foregrounds)} foregrounds exceeds max_foregrounds={config.max_foregrounds}")
    fF, fB = features if features is not None else masked_features(foregrounds, backgrounds, provider)
    valid = valid_foreground_subsets(fF, config.tau_local, config.max_foregrounds)

    self_sim = [fF[i, i] for i in range(len(foregrounds))]
    bg_clash = [
        [cosine(self_sim[i], fB[i, j]) > config.tau_local for j in range(len(backgrounds))]
        for i in range(len(foregrounds))
    ]

    sources = [(SOURCE_REF, source)] + [(background_ref(j), b) for j, b in enumerate(backgrounds)]
    source_emb = [normalize(provider(img)) for _, img in sources]
    composite_emb: dict = {}
    proposals = []
    for s, (src_ref, _) in enumerate(sources):
        for j, bg in enumerate(backgrounds):
            if background_ref(j) == src_ref:
                continue
            for sub in valid:
                if any(bg_clash[i][j] for i in sub):
                    continue
                key = (j, sub)
                if key not in composite_emb:
                    rendered = composite(bg, subset_layers(foregrounds, sub))
                    composite_emb[key] = normalize(provider(rendered))
                score = cosine(composite_emb[key], source_emb[s])
                if score >= config.tau_global:
                    proposals.append(Proposal(src_ref, background_ref(j), sub, score))
    logger.debug("selector: %d valid subsets, %d proposals", len(valid), len(proposals))
    return proposals
