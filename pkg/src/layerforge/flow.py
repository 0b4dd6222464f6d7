"""Flow-matching paths, velocity targets and the combined training loss.

The main path runs straight from noise to the target. The auxiliary path
starts at a boundary-degraded copy of a foreground plus noise and also ends
at the clean target; it is used only as an extra training signal. Tensors
are plain numpy arrays so the kernel does not care whether it sees pixels
or latents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

ROLES = ("shadow", "background", "foreground")

# (z, t, context) -> velocity with z's shape
VelocityPredictor = Callable[[np.ndarray, float, dict], np.ndarray]


def _check_t(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t


def _check_shapes(*arrays: np.ndarray) -> None:
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"shape mismatch: {shape} vs {a.shape}")


def interpolate(x0, eps, t: float) -> np.ndarray:
    """z_t = (1 - t) * eps + t * x0."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    _check_shapes(x0, eps)
    t = _check_t(t)
    if t == 0.0:
        return eps.copy()
    if t == 1.0:
        return x0.copy()
    return (1.0 - t) * eps + t * x0


def interpolate_aux(x0, xd, eps, t: float) -> np.ndarray:
    """z_t^aux = (1 - t) * (xd + eps) + t * x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    xd = np.asarray(xd, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_shapes(x0, xd, eps)
    t = _check_t(t)
    if t == 1.0:
        return x0.copy()
    return (1.0 - t) * (xd + eps) + t * x0


def velocity_targets(x0, xd, eps):
    """Return ``(v, v_aux)`` with v = x0 - eps and v_aux = x0 - xd - eps.

    ``v_aux`` is None when no degraded input is given.
    """
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    _check_shapes(x0, eps)
    v = x0 - eps
    if xd is None:
        return v, None
    xd = np.asarray(xd, dtype=np.float64)
    _check_shapes(x0, xd)
    return v, x0 - xd - eps


@dataclass
class FlowBatch:
    """Targets for one training step.

    ``degraded`` holds ``(target_index, xd)`` pairs pointing at foreground
    targets; ``aux_epsilon`` carries a separate noise draw for each of them.
    """

    targets: list
    epsilon: list
    t: float
    degraded: list = field(default_factory=list)
    aux_epsilon: list = field(default_factory=list)
    lam: float = 1.0

    def __post_init__(self):
        self.t = _check_t(self.t)
        if not (self.lam >= 0) or not math.isfinite(self.lam):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if len(self.epsilon) != len(self.targets):
            raise ValueError("one epsilon per target is required")
        if len(self.aux_epsilon) != len(self.degraded):
            raise ValueError("one auxiliary epsilon per degraded entry is required")
        for (role, x0), eps in zip(self.targets, self.epsilon):
            if role not in ROLES:
                raise ValueError(f"unknown target role {role!r}")
            _check_shapes(np.asarray(x0), np.asarray(eps))
        for (idx, xd), eps in zip(self.degraded, self.aux_epsilon):
            if not (0 <= idx < len(self.targets)):
                raise ValueError(f"degraded entry references missing target {idx}")
            role, x0 = self.targets[idx]
            if role != "foreground":
                raise ValueError(f"degraded entry references a {role} target")
            _check_shapes(np.asarray(x0), np.asarray(xd), np.asarray(eps))

    def main_inputs(self) -> list[np.ndarray]:
        return [interpolate(x0, eps, self.t) for (_, x0), eps in zip(self.targets, self.epsilon)]

    def aux_inputs(self) -> list[np.ndarray]:
        return [
            interpolate_aux(self.targets[idx][1], xd, eps, self.t)
            for (idx, xd), eps in zip(self.degraded, self.aux_epsilon)
        ]

    def main_velocities(self) -> list[np.ndarray]:
        return [velocity_targets(x0, None, eps)[0] for (_, x0), eps in zip(self.targets, self.epsilon)]

    def aux_velocities(self) -> list[np.ndarray]:
        return [
            velocity_targets(self.targets[idx][1], xd, eps)[1]
            for (idx, xd), eps in zip(self.degraded, self.aux_epsilon)
        ]


def _mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    return float(np.mean((pred - target) ** 2))


def combined_loss(pred_main: Sequence, pred_aux: Sequence, batch: FlowBatch) -> float:
    """Main-path MSE plus ``lam`` times auxiliary-path MSE.

    Each term averages the per-target mean squared error over its targets.
    With ``lam == 0`` the auxiliary predictions are not looked at.
    """
    if len(pred_main) != len(batch.targets):
        raise ValueError(f"expected {len(batch.targets)} main predictions, got {len(pred_main)}")
    if len(pred_aux) != len(batch.degraded):
        raise ValueError(f"expected {len(batch.degraded)} auxiliary predictions, got {len(pred_aux)}")
    main = [_mse(p, v) for p, v in zip(pred_main, batch.main_velocities())]
    loss = float(np.mean(main)) if main else 0.0
    if batch.lam > 0 and batch.degraded:
        aux = [_mse(p, v) for p, v in zip(pred_aux, batch.aux_velocities())]
        loss += batch.lam * float(np.mean(aux))
    return loss


def oracle_predictor(batch: FlowBatch) -> VelocityPredictor:
    """A predictor that returns the exact velocity for the addressed path."""
    main_v = batch.main_velocities()
    aux_v = batch.aux_velocities() if batch.degraded else []

    def predict(z, t, context):
        v = (aux_v if context.get("path") == "aux" else main_v)[context["index"]]
        if np.shape(z) != v.shape:
            raise ValueError("oracle predictor called with mismatched z")
        return v.copy()

    return predict


def predict_batch(predictor: VelocityPredictor, batch: FlowBatch):
    pred_main = [
        predictor(z, batch.t, {"path": "main", "index": i, "role": batch.targets[i][0]})
        for i, z in enumerate(batch.main_inputs())
    ]
    pred_aux = [
        predictor(z, batch.t, {"path": "aux", "index": j, "target": batch.degraded[j][0]})
        for j, z in enumerate(batch.aux_inputs())
    ]
    return pred_main, pred_aux


def euler_walk(predictor: VelocityPredictor, batch: FlowBatch, steps: int = 8) -> list[np.ndarray]:
    """Integrate the main path from noise to t=1 for every target.

    Only ``batch.targets`` and ``batch.epsilon`` are read; degraded inputs
    play no part in generation.
    """
    targets = batch.targets
    noises = batch.epsilon
    out = []
    ts = np.linspace(0.0, 1.0, steps + 1)
    for i, ((role, _), eps) in enumerate(zip(targets, noises)):
        z = np.array(eps, dtype=np.float64)
        for t0, t1 in zip(ts[:-1], ts[1:]):
            z = z + (t1 - t0) * np.asarray(predictor(z, float(t0), {"path": "main", "index": i, "role": role}))
        out.append(z)
    return out


# -- token layout: attention mask and position ids ---------------------------

GROUP_ROLES = ("source", "shadow", "background", "foreground", "degraded")


@dataclass(frozen=True)
class TokenGroup:
    group_id: str
    role: str
    token_count: int
    linked_foreground: Optional[str] = None

    def __post_init__(self):
        if self.role not in GROUP_ROLES:
            raise ValueError(f"unknown group role {self.role!r}")
        if self.token_count < 1:
            raise ValueError("token_count must be >= 1")
        if self.role == "degraded" and self.linked_foreground is None:
            raise ValueError(f"degraded group {self.group_id!r} has no linked foreground")


def _validate_groups(groups: Sequence[TokenGroup]) -> dict:
    by_id = {}
    for g in groups:
        if g.group_id in by_id:
            raise ValueError(f"duplicate group id {g.group_id!r}")
        by_id[g.group_id] = g
    n_source = sum(g.role == "source" for g in groups)
    if n_source != 1:
        raise ValueError(f"exactly one source group required, found {n_source}")
    for g in groups:
        if g.role != "degraded":
            continue
        if g.linked_foreground is None:
            raise ValueError(f"degraded group {g.group_id!r} has no linked foreground")
        target = by_id.get(g.linked_foreground)
        if target is None or target.role != "foreground":
            raise ValueError(f"degraded group {g.group_id!r} links to a non-foreground {g.linked_foreground!r}")
        if target.token_count != g.token_count:
            raise ValueError(f"degraded group {g.group_id!r} must match its foreground's token count")
    return by_id


def token_slices(groups: Sequence[TokenGroup]) -> dict[str, slice]:
    out, start = {}, 0
    for g in groups:
        out[g.group_id] = slice(start, start + g.token_count)
        start += g.token_count
    return out


def build_attention_mask(groups: Sequence[TokenGroup], block_clean_to_degraded: bool = True) -> np.ndarray:
    """Boolean ``[query, key]`` matrix over all tokens in declaration order.

    Degraded queries see only their own group and the source group. Clean
    queries see every clean group, and by default no degraded group.
    """
    _validate_groups(groups)
    spans = token_slices(groups)
    n = sum(g.token_count for g in groups)
    mask = np.zeros((n, n), dtype=bool)
    clean = np.zeros(n, dtype=bool)
    source = next(g for g in groups if g.role == "source")
    for g in groups:
        if g.role != "degraded":
            clean[spans[g.group_id]] = True
    for g in groups:
        rows = spans[g.group_id]
        if g.role == "degraded":
            mask[rows, spans[g.group_id]] = True
            mask[rows, spans[source.group_id]] = True
        elif block_clean_to_degraded:
            mask[rows] = clean
        else:
            mask[rows] = True
    return mask


def assign_positions(groups: Sequence[TokenGroup]) -> dict[str, range]:
    """Position-id ranges per group.

    Non-degraded groups take consecutive disjoint ranges in declaration
    order; a degraded group reuses its foreground's range verbatim.
    """
    _validate_groups(groups)
    out, start = {}, 0
    for g in groups:
        if g.role != "degraded":
            out[g.group_id] = range(start, start + g.token_count)
            start += g.token_count
    for g in groups:
        if g.role == "degraded":
            out[g.group_id] = out[g.linked_foreground]
    return {g.group_id: out[g.group_id] for g in groups}


def position_ids(groups: Sequence[TokenGroup]) -> np.ndarray:
    """Flattened per-token position ids aligned with ``build_attention_mask``."""
    ranges = assign_positions(groups)
    return np.concatenate([np.fromiter(ranges[g.group_id], dtype=np.int64) for g in groups])


# -- batches from layered samples ----------------------------------------------

def layer_tensor(layer) -> np.ndarray:
    """Foreground layer as an ``(H, W, 4)`` RGBA tensor."""
    return np.concatenate([layer.rgb, layer.alpha[:, :, None]], axis=2)


def batch_from_sample(sample, t: float, seed: int, lam: float = 1.0, degradation=None):
    """FlowBatch over a sample's shadow (if any), background and foregrounds.

    Every foreground gets one degraded copy. Noise is drawn independently
    for each main target and each auxiliary path. Returns the batch and the
    list of degradation specs used.
    """
    from .degradation import degrade_layer, sample_degradation

    rng = np.random.default_rng(seed)
    targets = []
    if sample.shadow is not None:
        targets.append(("shadow", np.array(sample.shadow)))
    targets.append(("background", np.array(sample.background)))
    fg_start = len(targets)
    for layer in sample.layers:
        targets.append(("foreground", layer_tensor(layer)))
    epsilon = [rng.standard_normal(x0.shape) for _, x0 in targets]
    degraded, aux_eps, specs = [], [], []
    spec_rng = np.random.default_rng([seed, 1])
    for k, layer in enumerate(sample.layers):
        spec = sample_degradation(int(spec_rng.integers(2**62)), degradation)
        limit = max(1, int(min(layer.alpha.shape) // 4))
        if spec.kind != "blur" and spec.radius > limit:
            spec = type(spec)(spec.kind, limit, spec.blur_sigma, spec.seed)
        specs.append(spec)
        degraded.append((fg_start + k, layer_tensor(degrade_layer(layer, spec))))
        aux_eps.append(rng.standard_normal(targets[fg_start + k][1].shape))
    batch = FlowBatch(targets=targets, epsilon=epsilon, t=t, degraded=degraded, aux_epsilon=aux_eps, lam=lam)
    return batch, specs


def token_groups_for(sample, patch: int = 16) -> list[TokenGroup]:
    """Token layout for a sample: source, shadow, background, foregrounds, then degraded copies."""
    h, w = sample.shape
    n = math.ceil(h / patch) * math.ceil(w / patch)
    groups = [TokenGroup("source", "source", n)]
    if sample.shadow is not None:
        groups.append(TokenGroup("shadow", "shadow", n))
    groups.append(TokenGroup("background", "background", n))
    for layer in sample.layers:
        groups.append(TokenGroup(f"fg{layer.order_index}", "foreground", n))
    for layer in sample.layers:
        groups.append(TokenGroup(f"deg{layer.order_index}", "degraded", n, f"fg{layer.order_index}"))
    return groups


def attention_violations(groups: Sequence[TokenGroup], mask: np.ndarray) -> int:
    """Count mask entries that break the degraded-isolation rules."""
    spans = token_slices(groups)
    clean_cols = np.zeros(mask.shape[1], dtype=bool)
    for g in groups:
        if g.role != "degraded":
            clean_cols[spans[g.group_id]] = True
    source = next(g for g in groups if g.role == "source")
    bad = 0
    for g in groups:
        rows = mask[spans[g.group_id]]
        if g.role == "degraded":
            allowed = np.zeros(mask.shape[1], dtype=bool)
            allowed[spans[g.group_id]] = True
            allowed[spans[source.group_id]] = True
            bad += int((rows != allowed[None, :]).sum())
        else:
            bad += int(rows[:, ~clean_cols].sum())
    return bad
