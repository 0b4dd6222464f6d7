"""Background, foreground and layered-composition curation for one image at a time."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..core import ForegroundLayer, LayeredSample, composite, composite_on_white, shadow_residual
from ..dataset import SampleManifest, read_image, resize_within, write_sample
from ..degradation import DegradationRanges, sample_degradation
from ..fusion import ExpertMaskSet, fuse_masks, make_rgba
from ..selector import SOURCE_REF, SelectorConfig, dedup, select_proposals, subset_layers
from .services import ServiceBundle, ServiceError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
ROUNDTRIP_LIMIT = 1e-6


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit sub-seed for a named purpose."""
    key = "/".join([str(seed), *map(str, names)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


class AuditLog:
    """Append-only record of everything decided about one image."""

    def __init__(self, image_id: str):
        self.image_id = image_id
        self.status = "running"
        self.steps: list = []
        self.foregrounds: list = []
        self.pools: dict = {}
        self.proposals: list = []
        self.samples: list = []
        self.warnings: list = []
        self.errors: list = []
        self.config: dict = {}

    def warn(self, message: str) -> None:
        logger.warning("%s: %s", self.image_id, message)
        self.warnings.append(message)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "status": self.status,
            "config": self.config,
            "bic_steps": self.steps,
            "fic": self.foregrounds,
            "pools": self.pools,
            "proposals": self.proposals,
            "samples": self.samples,
            "warnings": self.warnings,
            "errors": self.errors,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class BackgroundCuration:
    backgrounds: list = field(default_factory=list)
    step_inputs: list = field(default_factory=list)  # I_i that produced backgrounds[i]
    descriptions: list = field(default_factory=list)
    instructions: list = field(default_factory=list)


def curate_backgrounds(image, agent, editor, max_steps: int = 5, audit: Optional[AuditLog] = None) -> BackgroundCuration:
    """Peel foregrounds off one at a time until the agent sees none.

    Stops early, with a warning, when the editor returns its input
    unchanged or when ``max_steps`` removals have been made.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    audit = audit or AuditLog("image")
    out = BackgroundCuration()
    current = np.asarray(image, dtype=np.float64)
    for step in range(max_steps + 1):
        found = agent.detect_foreground(current)
        record = {"step": step, "present": found["present"], "description": found.get("description", "")}
        audit.steps.append(record)
        if not found["present"]:
            break
        if step == max_steps:
            audit.warn(f"background curation stopped at the step cap ({max_steps}) with foreground still present")
            break
        instruction = agent.removal_instruction(current, found["description"])
        record["instruction"] = instruction
        edited = editor.apply(current, instruction)
        if edited.shape == current.shape and np.array_equal(edited, current):
            record["no_progress"] = True
            audit.warn(f"editor made no progress at step {step}; stopping")
            break
        out.backgrounds.append(edited)
        out.step_inputs.append(current)
        out.descriptions.append(found["description"])
        out.instructions.append(instruction)
        current = edited
    return out


def curate_foregrounds(
    step_inputs: Sequence,
    descriptions: Sequence[str],
    agent,
    editor,
    segmenters: Sequence,
    audit: Optional[AuditLog] = None,
    workers: int = 1,
) -> list[ForegroundLayer]:
    """Cut each removed entity out onto white, segment it with every expert and fuse the masks.

    A failure on one step is recorded and the remaining steps still run.
    """
    audit = audit or AuditLog("image")
    layers = []
    for step, (img, desc) in enumerate(zip(step_inputs, descriptions)):
        record = {"step": step, "description": desc}
        audit.foregrounds.append(record)
        try:
            instruction = agent.background_removal_instruction(img, desc)
            record["instruction"] = instruction
            white = editor.apply(img, instruction)
            h, w = white.shape[:2]
            if workers > 1 and len(segmenters) > 1:
                with ThreadPoolExecutor(min(workers, len(segmenters))) as pool:
                    masks = list(pool.map(lambda s: s.segment(white), segmenters))
            else:
                masks = [s.segment(white) for s in segmenters]
            fused = fuse_masks(ExpertMaskSet(masks).resampled(h, w))
            layer = make_rgba(white, fused, order_index=1)
        except (ServiceError, ValueError) as exc:
            record["status"] = "failed"
            record["error"] = exc.to_dict() if isinstance(exc, ServiceError) else {"message": str(exc)}
            audit.warn(f"foreground extraction failed at step {step}: {exc}")
            continue
        record["status"] = "ok"
        record["coverage"] = round(float(fused.mean()), 6)
        layers.append(layer)
    return layers


def curate_layered(
    image,
    backgrounds: Sequence,
    foregrounds: Sequence[ForegroundLayer],
    provider,
    config: Optional[SelectorConfig] = None,
    verifier=None,
    audit: Optional[AuditLog] = None,
) -> list[LayeredSample]:
    """De-duplicate the pools, select proposals and keep the ones the verifier accepts.

    Each proposal is logged exactly once as accepted, rejected or pending.
    Pending means the verifier could not be reached; such proposals are
    never materialized.
    """
    config = config or SelectorConfig()
    audit = audit or AuditLog("image")
    image = np.asarray(image, dtype=np.float64)
    if not backgrounds or not foregrounds:
        audit.pools = {"backgrounds": [], "foregrounds": []}
        return []
    bg_keep = dedup(list(backgrounds), provider, config.tau_dup)
    fg_keep = dedup([composite_on_white(f.alpha, f.rgb) for f in foregrounds], provider, config.tau_dup)
    if len(fg_keep) > config.max_foregrounds:
        audit.warn(f"foreground pool truncated from {len(fg_keep)} to {config.max_foregrounds}")
        fg_keep = fg_keep[: config.max_foregrounds]
    audit.pools = {"backgrounds": bg_keep, "foregrounds": fg_keep}
    bgs = [backgrounds[i] for i in bg_keep]
    fgs = [foregrounds[i] for i in fg_keep]

    proposals = select_proposals(image, bgs, fgs, provider, config)
    samples = []
    for prop in proposals:
        entry = prop.to_dict()
        entry["foreground_pool_ids"] = [fg_keep[i] for i in prop.foreground_ids]
        j = int(prop.background_ref[2:])
        bg = bgs[j]
        source = image if prop.source_ref == SOURCE_REF else bgs[int(prop.source_ref[2:])]
        layers = subset_layers(fgs, prop.foreground_ids)
        rendered = composite(bg, layers)
        sample = LayeredSample(source, bg, layers, shadow_residual(source, rendered))
        try:
            verdict = verifier.verify(rendered, sample) if verifier is not None else {"accept": True, "reasons": []}
        except ServiceError as exc:
            entry.update(status="pending", reasons=[str(exc)], error=exc.to_dict())
            audit.proposals.append(entry)
            continue
        if not verdict["accept"]:
            entry.update(status="rejected", reasons=list(verdict["reasons"]))
        elif sample.roundtrip_error() > ROUNDTRIP_LIMIT:
            entry.update(status="rejected", reasons=[f"round-trip error {sample.roundtrip_error():.3g}"])
        else:
            entry.update(status="accepted", reasons=list(verdict["reasons"]))
            samples.append(sample)
        audit.proposals.append(entry)
    return samples


@dataclass
class PipelineConfig:
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    degradation: DegradationRanges = field(default_factory=DegradationRanges)
    max_steps: int = 5
    max_side: int = 1024
    seed: int = 0
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "selector": self.selector.to_dict(),
            "degradation": {
                "kinds": list(self.degradation.kinds),
                "radius": list(self.degradation.radius),
                "sigma": list(self.degradation.sigma),
            },
            "max_steps": self.max_steps,
            "max_side": self.max_side,
            "seed": self.seed,
        }


def run_pipeline(image, services: ServiceBundle, config: PipelineConfig, out_dir, image_id: str = "image") -> list[SampleManifest]:
    """Curate one image end to end and persist the accepted samples.

    The audit log lands in ``<out_dir>/audit/<image_id>.json`` whether or not
    curation succeeds. Service failures are recorded there, not raised.
    """
    out_dir = Path(out_dir)
    audit = AuditLog(image_id)
    audit.config = config.to_dict()
    image_seed = derive_seed(config.seed, "image", image_id)
    services = services.for_seed(image_seed)
    manifests: list[SampleManifest] = []
    try:
        image = resize_within(np.asarray(image, dtype=np.float64), config.max_side)
        bic = curate_backgrounds(image, services.agent, services.editor, config.max_steps, audit)
        fgs = curate_foregrounds(
            bic.step_inputs, bic.descriptions, services.agent, services.editor, services.segmenters, audit, config.workers
        )
        samples = curate_layered(image, bic.backgrounds, fgs, services.embedder, config.selector, services.verifier, audit)
        accepted = [p for p in audit.proposals if p["status"] == "accepted"]
        for n, (sample, prop) in enumerate(zip(samples, accepted)):
            sample_id = f"{image_id}_{n:03d}"
            deg_seed = derive_seed(config.seed, "degradation", sample_id)
            provenance = {
                "image_id": image_id,
                "proposal": {k: prop[k] for k in ("source_ref", "background_ref", "foreground_ids", "scores")},
                "thresholds": config.selector.to_dict(),
                "seeds": {"run": config.seed, "image": image_seed, "degradation": deg_seed},
                "services": services.ids,
                "degradation_specs": [
                    sample_degradation(derive_seed(deg_seed, "layer", layer.order_index), config.degradation).to_dict()
                    for layer in sample.layers
                ],
            }
            manifests.append(write_sample(sample, out_dir / sample_id, provenance))
            audit.samples.append(sample_id)
        audit.status = "ok"
    except ServiceError as exc:
        audit.status = "failed"
        audit.errors.append(exc.to_dict())
        logger.error("%s: %s", image_id, exc)
    except Exception as exc:
        audit.status = "failed"
        audit.errors.append({"message": f"{type(exc).__name__}: {exc}"})
        logger.exception("%s: curation failed", image_id)
    finally:
        audit_dir = out_dir / "audit"
        audit_dir.mkdir(parents=True, exist_ok=True)
        (audit_dir / f"{image_id}.json").write_text(audit.to_json())
    return manifests


def list_images(input_dir) -> list[Path]:
    d = Path(input_dir)
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def run_batch(input_dir, out_dir, services: ServiceBundle, config: PipelineConfig) -> dict:
    """Run every image in ``input_dir`` as an independent job.

    Returns ``{image_id: [manifests]}``. Unreadable images are recorded
    as failed jobs and never stop the batch.
    """
    paths = list_images(input_dir)
    Path(out_dir).mkdir(parents=True, exist_ok=True)

    def job(path: Path):
        image_id = path.stem
        try:
            img = read_image(path)
        except Exception as exc:
            audit = AuditLog(image_id)
            audit.status = "failed"
            audit.errors.append({"message": f"could not read {path.name}: {exc}"})
            audit_dir = Path(out_dir) / "audit"
            audit_dir.mkdir(parents=True, exist_ok=True)
            (audit_dir / f"{image_id}.json").write_text(audit.to_json())
            return image_id, []
        return image_id, run_pipeline(img, services, config, out_dir, image_id)

    if config.workers > 1 and len(paths) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(job, paths))
    else:
        results = [job(p) for p in paths]
    return dict(results)
