"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 fatal IO or
unusable input data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import flow
from .config import ConfigError, load_config
from .core import composite, shadow_residual
from .curators.mock import mock_services
from .curators.pipeline import run_batch
from .curators.services import ServiceBundle, http_services
from .dataset import (
    DatasetError,
    bucketize,
    encode_gray8,
    encode_shadow16,
    iter_manifests,
    read_sample,
    write_image,
)
from .degradation import KINDS, DegradationSpec, degrade_layer, sample_degradation
from .metrics import evaluate_dataset

logger = logging.getLogger("layerforge")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


class FatalIO(Exception):
    pass


def positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load(manifest):
    try:
        return read_sample(manifest, check_roundtrip=False)
    except (DatasetError, OSError) as exc:
        raise FatalIO(f"cannot read sample {manifest}: {exc}") from exc


def _worst_pixel(err: np.ndarray) -> dict:
    per_px = err.max(axis=2) if err.ndim == 3 else err
    y, x = np.unravel_index(int(np.argmax(per_px)), per_px.shape)
    return {"y": int(y), "x": int(x), "error": float(per_px[y, x])}


# -- commands ------------------------------------------------------------------

def cmd_curate(args) -> int:
    overrides = {
        "seed": args.seed,
        "workers": args.workers,
        "max_steps": args.max_steps,
        "tau_local": args.tau_local,
        "tau_global": args.tau_global,
        "tau_dup": args.tau_dup,
        "mock": args.mock or None,
    }
    cfg = load_config(args.config, overrides)
    input_dir = Path(args.input_dir)
    if not input_dir.is_dir():
        raise FatalIO(f"input directory not found: {input_dir}")
    services: ServiceBundle = mock_services() if cfg.mock else http_services(cfg.endpoints)
    results = run_batch(input_dir, args.out_dir, services, cfg.pipeline())
    audits = {}
    for image_id in results:
        audit_path = Path(args.out_dir) / "audit" / f"{image_id}.json"
        audits[image_id] = json.loads(audit_path.read_text())["status"]
    _emit({
        "images": len(results),
        "samples": sum(len(v) for v in results.values()),
        "per_image": {k: [m.sample_id for m in v] for k, v in results.items()},
        "failed": sorted(k for k, s in audits.items() if s != "ok"),
    })
    return EXIT_OK


def cmd_compose(args) -> int:
    sample = _load(args.manifest)
    rendered = composite(sample.background, sample.layers)
    write_image(args.out, rendered)
    report = {"out": str(args.out), "layers": len(sample.layers)}
    if sample.shadow is not None:
        report["source_minus_shadow_max_error"] = float(np.max(np.abs(rendered - (sample.source - sample.shadow))))
    _emit(report)
    return EXIT_OK


def cmd_shadow(args) -> int:
    sample = _load(args.manifest)
    rendered = composite(sample.background, sample.layers)
    residual = shadow_residual(sample.source, rendered)
    Path(args.out).write_bytes(encode_shadow16(residual))
    roundtrip = np.abs(rendered + residual - sample.source)
    report = {"out": str(args.out), "roundtrip_max_error": float(roundtrip.max()), "violations": []}
    if sample.shadow is not None:
        drift = np.abs(sample.shadow - residual)
        report["stored_shadow_max_deviation"] = float(drift.max())
        if drift.max() > args.tolerance:
            worst = _worst_pixel(drift)
            report["violations"].append({"kind": "stored shadow disagrees with recomputed residual", **worst})
    if roundtrip.max() > 1e-6:
        report["violations"].append({"kind": "round-trip", **_worst_pixel(roundtrip)})
    _emit(report)
    if report["violations"]:
        for v in report["violations"]:
            print(f"violation: {v['kind']} at (y={v['y']}, x={v['x']}), error {v['error']:.6f}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def cmd_degrade(args) -> int:
    sample = _load(args.manifest)
    if not 1 <= args.layer <= len(sample.layers):
        raise UsageError(f"--layer must lie in [1, {len(sample.layers)}]")
    if args.kind is None:
        spec = sample_degradation(args.seed)
    else:
        try:
            spec = DegradationSpec(args.kind, args.radius, args.sigma, args.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    layer = sample.layers[args.layer - 1]
    try:
        degraded = degrade_layer(layer, spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"layer_{args.layer}_alpha_degraded.png").write_bytes(encode_gray8(degraded.alpha))
    (out / f"layer_{args.layer}_degradation.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit({"spec": spec.to_dict(), "alpha_mean_before": float(layer.alpha.mean()), "alpha_mean_after": float(degraded.alpha.mean())})
    return EXIT_OK


def objective_report(sample, t: float, seed: int, lam: float, sweep: int = 0) -> dict:
    batch, specs = flow.batch_from_sample(sample, t, seed, lam)
    pred_main, pred_aux = flow.predict_batch(flow.oracle_predictor(batch), batch)
    loss_oracle = flow.combined_loss(pred_main, pred_aux, batch)
    zeros_main = [np.zeros_like(p) for p in pred_main]
    zeros_aux = [np.zeros_like(p) for p in pred_aux]
    z = batch.main_inputs()

    endpoints = {"main_t0": True, "main_t1": True, "aux_t0": True, "aux_t1": True}
    for (_, x0), eps in zip(batch.targets, batch.epsilon):
        endpoints["main_t0"] &= bool(np.array_equal(flow.interpolate(x0, eps, 0.0), eps))
        endpoints["main_t1"] &= bool(np.array_equal(flow.interpolate(x0, eps, 1.0), x0))
    for (idx, xd), eps in zip(batch.degraded, batch.aux_epsilon):
        x0 = batch.targets[idx][1]
        endpoints["aux_t0"] &= bool(np.array_equal(flow.interpolate_aux(x0, xd, eps, 0.0), xd + eps))
        endpoints["aux_t1"] &= bool(np.array_equal(flow.interpolate_aux(x0, xd, eps, 1.0), x0))

    rng = np.random.default_rng([seed, 2])
    ts = [t] + [float(v) for v in rng.uniform(0.0, 1.0, sweep)]
    residual = 0.0
    h = 1e-4
    for tt in ts:
        t0 = min(tt, 1.0 - h)
        for (_, x0), eps, v in zip(batch.targets, batch.epsilon, batch.main_velocities()):
            fd = (flow.interpolate(x0, eps, t0 + h) - flow.interpolate(x0, eps, t0)) / h
            residual = max(residual, float(np.max(np.abs(fd - v))))
        for (idx, xd), eps, v in zip(batch.degraded, batch.aux_epsilon, batch.aux_velocities()):
            x0 = batch.targets[idx][1]
            fd = (flow.interpolate_aux(x0, xd, eps, t0 + h) - flow.interpolate_aux(x0, xd, eps, t0)) / h
            residual = max(residual, float(np.max(np.abs(fd - v))))

    groups = flow.token_groups_for(sample)
    mask = flow.build_attention_mask(groups)
    positions = flow.assign_positions(groups)
    pos_bad = sum(positions[g.group_id] != positions[g.linked_foreground] for g in groups if g.role == "degraded")
    report = {
        "t": t,
        "seed": seed,
        "lambda": lam,
        "targets": [{"role": role, "shape": list(x0.shape)} for role, x0 in batch.targets],
        "degradations": [{"target": idx, **spec.to_dict()} for (idx, _), spec in zip(batch.degraded, specs)],
        "loss_oracle": loss_oracle,
        "loss_zero_predictor": flow.combined_loss(zeros_main, zeros_aux, batch),
        "z_equals_eps": all(bool(np.array_equal(zi, e)) for zi, e in zip(z, batch.epsilon)),
        "z_equals_x0": all(bool(np.array_equal(zi, x0)) for zi, (_, x0) in zip(z, batch.targets)),
        "endpoints_exact": endpoints,
        "velocity_fd_step": h,
        "velocity_fd_times": len(ts),
        "velocity_fd_max_residual": residual,
        "attention_violations": flow.attention_violations(groups, mask),
        "position_violations": int(pos_bad),
    }
    report["ok"] = bool(
        loss_oracle <= 1e-10
        and all(endpoints.values())
        and residual <= 1e-6
        and report["attention_violations"] == 0
        and report["position_violations"] == 0
    )
    return report


def cmd_objective_check(args) -> int:
    sample = _load(args.manifest)
    _emit(objective_report(sample, args.t, args.seed, args.lam, args.sweep))
    return EXIT_OK


def _sample_dirs(root: Path) -> dict:
    return {m.sample_id: m.path for m in iter_manifests(root)}


def cmd_eval(args) -> int:
    for name, d in (("--pred-dir", args.pred_dir), ("--gt-dir", args.gt_dir)):
        if not Path(d).is_dir():
            raise UsageError(f"{name} {d} is not a directory")
    preds, gts = _sample_dirs(Path(args.pred_dir)), _sample_dirs(Path(args.gt_dir))
    common = sorted(set(preds) & set(gts))
    pairs = [(preds[s], gts[s]) for s in common]
    report = evaluate_dataset(pairs, args.max_edits)
    d = report.to_dict()
    d["unmatched"] = {"pred_only": sorted(set(preds) - set(gts)), "gt_only": sorted(set(gts) - set(preds))}
    if args.out:
        Path(args.out).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    print(report.table())
    for side, ids in d["unmatched"].items():
        if ids:
            print(f"unmatched ({side}): {', '.join(ids)}")
    return EXIT_OK


def cmd_bucket(args) -> int:
    buckets = bucketize(iter_manifests(args.root))
    out = {str(k): [m.sample_id for m in v] for k, v in buckets.items()}
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    _emit(out)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layerforge", description="Layered-image curation, training-target checks and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("curate", help="curate layered samples from a directory of images")
    c.add_argument("input_dir")
    c.add_argument("out_dir")
    c.add_argument("--config", help="YAML run configuration")
    c.add_argument("--mock", action="store_true", help="use the in-process mock services")
    c.add_argument("--seed", type=int)
    c.add_argument("--workers", type=positive_int)
    c.add_argument("--max-steps", type=positive_int)
    c.add_argument("--tau-local", type=float)
    c.add_argument("--tau-global", type=float)
    c.add_argument("--tau-dup", type=float)
    c.set_defaults(func=cmd_curate)

    c = sub.add_parser("compose", help="render background plus layers of a sample")
    c.add_argument("--manifest", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compose)

    c = sub.add_parser("shadow", help="compute a sample's shadow residual as 16-bit PNG")
    c.add_argument("--manifest", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--tolerance", type=float, default=3 / 255)
    c.set_defaults(func=cmd_shadow)

    c = sub.add_parser("degrade", help="degrade one layer's alpha boundary")
    c.add_argument("--manifest", required=True)
    c.add_argument("--layer", type=positive_int, default=1)
    c.add_argument("--kind", choices=KINDS, help="omit to draw a spec from --seed")
    c.add_argument("--radius", type=positive_int, default=2)
    c.add_argument("--sigma", type=float)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out-dir", required=True)
    c.set_defaults(func=cmd_degrade)

    c = sub.add_parser("objective-check", help="check flow paths and losses on a sample")
    c.add_argument("--manifest", required=True)
    c.add_argument("--t", type=unit_float, default=0.5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--lambda", dest="lam", type=float, default=1.0)
    c.add_argument("--sweep", type=int, default=0, help="extra random t values for the velocity check")
    c.set_defaults(func=cmd_objective_check)

    c = sub.add_parser("eval", help="evaluate predicted decompositions against ground truth")
    c.add_argument("--pred-dir", required=True)
    c.add_argument("--gt-dir", required=True)
    c.add_argument("--max-edits", type=int, default=3)
    c.add_argument("--out")
    c.set_defaults(func=cmd_eval)

    c = sub.add_parser("bucket", help="group samples by aspect ratio and layer count")
    c.add_argument("--root", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_bucket)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "max_edits", 0) < 0:
        parser.error("--max-edits must be >= 0")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FatalIO, OSError, DatasetError) as exc:
        print(f"fatal: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
