"""Decomposition metrics: RGB L1, alpha soft IoU and the max-edits protocol."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ForegroundLayer, LayeredSample, composite_on_white

logger = logging.getLogger(__name__)

EXHAUSTIVE_LIMIT = 6


def alpha_soft_iou(a, b) -> float:
    """sum(min(a, b)) / sum(max(a, b)); two empty masks count as a perfect match."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"alpha_soft_iou: dimension mismatch {a.shape} vs {b.shape}")
    union = np.maximum(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.minimum(a, b).sum() / union)


def rgb_l1(pred: ForegroundLayer, gt: ForegroundLayer, weighting: str = "white") -> float:
    """Mean absolute RGB error between two layers.

    The default renders each layer over white through its own alpha.
    ``weighting="alpha"`` instead weights raw rgb differences by the
    union of the two mattes.
    """
    if pred.rgb.shape != gt.rgb.shape:
        raise ValueError(f"rgb_l1: dimension mismatch {pred.rgb.shape} vs {gt.rgb.shape}")
    if weighting == "white":
        diff = composite_on_white(pred.alpha, pred.rgb) - composite_on_white(gt.alpha, gt.rgb)
        return float(np.mean(np.abs(diff)))
    if weighting == "alpha":
        w = np.maximum(pred.alpha, gt.alpha)[:, :, None]
        total = w.sum() * 3
        return float((np.abs(pred.rgb - gt.rgb) * w).sum() / total) if total > 0 else 0.0
    raise ValueError(f"unknown weighting {weighting!r}")


@dataclass
class LayerMatching:
    pairs: list  # (pred_index, gt_index, iou)
    unmatched_pred: list
    unmatched_gt: list

    def gt_to_pred(self) -> dict:
        return {g: p for p, g, _ in self.pairs}


def match_layers(pred: Sequence[ForegroundLayer], gt: Sequence[ForegroundLayer]) -> LayerMatching:
    """One-to-one matching maximizing total alpha soft IoU.

    Small problems are solved by enumeration, which breaks ties toward the
    lexicographically first assignment; larger ones go to the Hungarian
    solver.
    """
    n_p, n_g = len(pred), len(gt)
    scores = np.array([[alpha_soft_iou(p.alpha, g.alpha) for g in gt] for p in pred]).reshape(n_p, n_g)
    if n_p == 0 or n_g == 0:
        return LayerMatching([], list(range(n_p)), list(range(n_g)))

    if max(n_p, n_g) <= EXHAUSTIVE_LIMIT:
        best, best_total = None, -1.0
        if n_p <= n_g:
            for perm in itertools.permutations(range(n_g), n_p):
                total = sum(scores[i, perm[i]] for i in range(n_p))
                if total > best_total + 1e-12:
                    best, best_total = [(i, perm[i]) for i in range(n_p)], total
        else:
            for perm in itertools.permutations(range(n_p), n_g):
                total = sum(scores[perm[g], g] for g in range(n_g))
                if total > best_total + 1e-12:
                    best, best_total = [(perm[g], g) for g in range(n_g)], total
        assignment = best
    else:
        rows, cols = linear_sum_assignment(scores, maximize=True)
        assignment = list(zip(rows.tolist(), cols.tolist()))

    assignment.sort(key=lambda pg: pg[1])
    pairs = [(p, g, float(scores[p, g])) for p, g in assignment]
    used_p = {p for p, _ in assignment}
    used_g = {g for _, g in assignment}
    return LayerMatching(
        pairs,
        [p for p in range(n_p) if p not in used_p],
        [g for g in range(n_g) if g not in used_g],
    )


def _empty_like(layer: ForegroundLayer) -> ForegroundLayer:
    return ForegroundLayer(rgb=np.ones_like(layer.rgb), alpha=np.zeros_like(layer.alpha), order_index=1)


def _opaque(image) -> ForegroundLayer:
    image = np.asarray(image, dtype=np.float64)
    return ForegroundLayer(rgb=image, alpha=np.ones(image.shape[:2]), order_index=1)


def _pair_scores(pred_sample: LayeredSample, gt_sample: LayeredSample):
    """Per-gt-layer (l1, iou) under the optimal matching; missing layers score against an empty layer."""
    matching = match_layers(pred_sample.layers, gt_sample.layers)
    g2p = matching.gt_to_pred()
    rows = []
    for g, gt_layer in enumerate(gt_sample.layers):
        p = g2p.get(g)
        cand = pred_sample.layers[p] if p is not None else _empty_like(gt_layer)
        rows.append((rgb_l1(cand, gt_layer), alpha_soft_iou(cand.alpha, gt_layer.alpha)))
    return matching, rows


def evaluate_with_edits(
    pred_sample: LayeredSample,
    gt_sample: LayeredSample,
    max_edits: int,
    edit_background: bool = False,
) -> dict:
    """Score a predicted decomposition after up to ``max_edits`` corrections.

    An edit swaps one ground-truth layer's prediction for the ground truth
    itself (a replacement when it was matched, an insertion when it was
    not). Edits go greedily to the largest soft IoU gain, then the largest
    L1 gain; no-op edits are never spent. Scores are means over the
    ground-truth layers plus the background pair.
    """
    if max_edits < 0:
        raise ValueError("max_edits must be >= 0")
    if pred_sample.shape != gt_sample.shape:
        raise ValueError("pred and gt samples differ in size")
    _, rows = _pair_scores(pred_sample, gt_sample)
    bg = (rgb_l1(_opaque(pred_sample.background), _opaque(gt_sample.background)), 1.0)
    rows = [list(r) for r in rows]
    candidates = [(1.0 - iou, l1, g) for g, (l1, iou) in enumerate(rows) if iou < 1.0 or l1 > 0.0]
    if edit_background and bg[0] > 0:
        candidates.append((0.0, bg[0], -1))
    candidates.sort(key=lambda c: (-c[0], -c[1], c[2]))
    for _, _, g in candidates[:max_edits]:
        if g == -1:
            bg = (0.0, 1.0)
        else:
            rows[g] = [0.0, 1.0]
    l1s = [r[0] for r in rows] + [bg[0]]
    ious = [r[1] for r in rows] + [bg[1]]
    return {"rgb_l1": float(np.mean(l1s)), "alpha_soft_iou": float(np.mean(ious))}


@dataclass
class EvalReport:
    max_edits: int
    samples: dict = field(default_factory=dict)  # sample_id -> [ {rgb_l1, alpha_soft_iou} per e ]
    missing: list = field(default_factory=list)

    @property
    def aggregate(self) -> list[dict]:
        out = []
        for e in range(self.max_edits + 1):
            if not self.samples:
                out.append({"rgb_l1": None, "alpha_soft_iou": None})
                continue
            out.append({
                "rgb_l1": float(np.mean([rows[e]["rgb_l1"] for rows in self.samples.values()])),
                "alpha_soft_iou": float(np.mean([rows[e]["alpha_soft_iou"] for rows in self.samples.values()])),
            })
        return out

    def to_dict(self) -> dict:
        return {
            "max_edits": self.max_edits,
            "num_samples": len(self.samples),
            "num_missing": len(self.missing),
            "missing": list(self.missing),
            "aggregate": {str(e): row for e, row in enumerate(self.aggregate)},
            "samples": {sid: {str(e): r for e, r in enumerate(rows)} for sid, rows in sorted(self.samples.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        es = list(range(self.max_edits + 1))
        agg = self.aggregate

        def fmt(v):
            return "   -  " if v is None else f"{v:.4f}"

        head = ["# Max Edits"] + [str(e) for e in es]
        l1 = ["RGB L1 (lower)"] + [fmt(r["rgb_l1"]) for r in agg]
        iou = ["Alpha soft IoU (higher)"] + [fmt(r["alpha_soft_iou"]) for r in agg]
        widths = [max(len(r[c]) for r in (head, l1, iou)) for c in range(len(head))]
        lines = [" | ".join(cell.rjust(w) if c else cell.ljust(w) for c, (cell, w) in enumerate(zip(r, widths))) for r in (head, l1, iou)]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        lines.append(f"samples: {len(self.samples)}  missing: {len(self.missing)}")
        return "\n".join(lines)


def evaluate_dataset(pairs: Sequence, max_edits: int, loader=None) -> EvalReport:
    """Evaluate ``(pred, gt)`` pairs for every edit budget 0..max_edits.

    Pairs may hold ``LayeredSample`` objects or manifest paths; paths are
    read through ``loader`` (``dataset.read_sample`` by default). Samples
    whose files cannot be loaded are listed in ``missing`` and left out of
    the aggregates.
    """
    if loader is None:
        from .dataset import read_sample as loader
    report = EvalReport(max_edits=max_edits)
    for n, (pred, gt) in enumerate(pairs):
        sid = _sample_id(gt, n)
        try:
            pred_s = pred if isinstance(pred, LayeredSample) else loader(pred)
            gt_s = gt if isinstance(gt, LayeredSample) else loader(gt)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", sid, exc)
            report.missing.append(sid)
            continue
        report.samples[sid] = [evaluate_with_edits(pred_s, gt_s, e) for e in range(max_edits + 1)]
    return report


def _sample_id(ref, n: int) -> str:
    if isinstance(ref, LayeredSample):
        return f"sample{n:04d}"
    from pathlib import Path

    p = Path(ref)
    return p.parent.name if p.name == "manifest.json" else p.name
