"""Command line entry point: ``xkd <command> CONFIG [options]``.

Commands write into ``<output_dir>/<name>/<command>/``. Each run directory
holds the resolved config, the dataset manifest and its hash, and whatever
checkpoints, traces and reports the command produces.

Exit codes: 0 success, 2 configuration or validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RESOLVED_NAME, ConfigError, RunConfig, load_config
from .data import DatasetManifest, generate_synthetic, scan_folder
from .engine import distill_student, train_student_baseline, train_teacher
from .explain import alignment, append_report, heatmap_entropy, pointing_hit, render_heatmap, score_cam
from .metrics import MetricReport, comparison_grid, evaluate
from .models import build_model, freeze, load_checkpoint, parameter_hash

log = logging.getLogger("xkd")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _overrides(args) -> dict:
    classes = getattr(args, "classes", None)
    return {
        "output_dir": args.output_dir,
        "name": args.name,
        "distill.seed": args.seed,
        "models.seed": args.seed,
        "distill.learning_rate": args.lr,
        "distill.epochs_teacher": args.epochs_teacher,
        "distill.epochs_student": args.epochs_student,
        "distill.batch_size": args.batch_size,
        "distill.loss.variant": getattr(args, "variant", None),
        "distill.loss.alpha": getattr(args, "alpha", None),
        "distill.loss.gamma": getattr(args, "gamma", None),
        "distill.loss.temperature": getattr(args, "temperature", None),
        "explain.layer": getattr(args, "layer", None),
        "explain.samples": getattr(args, "samples", None),
        "explain.classes": None if classes is None else [int(c) for c in classes.split(",") if c.strip()],
    }


def _prepare(cfg: RunConfig, command: str) -> tuple[Path, DatasetManifest]:
    """Create the run directory, persist the resolved config and materialize the dataset."""
    run_dir = cfg.run_dir(command)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / RESOLVED_NAME)
    ds = cfg.dataset
    if ds.root is None:
        data_dir = run_dir / "data"
        if data_dir.exists():
            shutil.rmtree(data_dir)
        manifest = generate_synthetic(ds.synthetic.to_spec(), data_dir)
    else:
        manifest = scan_folder(ds.root, ds.policy, ds.seed)
    manifest.save(run_dir / "manifest.json")
    (run_dir / "manifest_hash.txt").write_text(manifest.content_hash + "\n")
    return run_dir, manifest


def _split(cfg: RunConfig, manifest: DatasetManifest, role: str):
    return manifest.split(role, None if cfg.dataset.root is None else cfg.dataset.image_size)


def _new_model(cfg: RunConfig, name: str, manifest: DatasetManifest):
    return build_model(name, seed=cfg.models.seed, num_classes=len(manifest.class_names), image_size=cfg.dataset.image_size)


def _load(path, cfg: RunConfig, manifest: DatasetManifest):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        model, header = load_checkpoint(path)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    want = (len(manifest.class_names), cfg.dataset.image_size)
    have = (model.num_classes, model.input_shape[-1])
    if have != want:
        raise ConfigError(
            f"checkpoint {path} expects {have[0]} classes at {have[1]}px but the config describes {want[0]} classes at {want[1]}px"
        )
    return model, header


def _labels(paths, headers) -> list[str]:
    labels = []
    for p, h in zip(paths, headers):
        base = Path(p).parent.name or h["arch"]["name"]
        label, k = base, 2
        while label in labels:
            label, k = f"{base}{k}", k + 1
        labels.append(label)
    return labels


def _report(model, split, cfg: RunConfig, manifest: DatasetManifest, path) -> MetricReport:
    r = evaluate(model, split, config_hash=cfg.hash(), manifest_hash=manifest.content_hash)
    r.save(path)
    return r


def cmd_train_teacher(cfg: RunConfig, args) -> Path:
    run_dir, manifest = _prepare(cfg, "train-teacher")
    out = run_dir / "teacher"
    teacher = _new_model(cfg, cfg.models.teacher, manifest)
    teacher, trace = train_teacher(teacher, _split(cfg, manifest, "train"), _split(cfg, manifest, "val"), cfg.distill.to_engine(), run_dir=out)
    r = _report(teacher, _split(cfg, manifest, "test"), cfg, manifest, out / "report.json")
    log.info("teacher test accuracy %.4f (best val epoch %d)", r.accuracy, trace.best_epoch)
    return run_dir


def cmd_distill(cfg: RunConfig, args) -> Path:
    run_dir, manifest = _prepare(cfg, "distill")
    teacher, _ = _load(args.teacher, cfg, manifest)
    freeze(teacher)
    before = parameter_hash(teacher)
    train, val, test = (_split(cfg, manifest, r) for r in ("train", "val", "test"))
    dcfg = cfg.distill.to_engine()

    reports = {"teacher": _report(teacher, test, cfg, manifest, run_dir / "teacher" / "report.json")}
    student = _new_model(cfg, cfg.models.student, manifest)
    student, trace = distill_student(student, teacher, train, val, dcfg, run_dir=run_dir / "student")
    reports["student (KD)"] = _report(student, test, cfg, manifest, run_dir / "student" / "report.json")
    if args.with_baseline:
        baseline = _new_model(cfg, cfg.models.student, manifest)
        baseline, _ = train_student_baseline(baseline, train, val, dcfg, run_dir=run_dir / "baseline")
        reports["student (no KD)"] = _report(baseline, test, cfg, manifest, run_dir / "baseline" / "report.json")

    after = parameter_hash(teacher)
    provenance = {
        "config_hash": cfg.hash(),
        "manifest_hash": manifest.content_hash,
        "teacher_checkpoint": str(Path(args.teacher).resolve()),
        "teacher_hash_before": before,
        "teacher_hash_after": after,
        "variant": cfg.distill.loss.variant,
    }
    (run_dir / "provenance.json").write_text(json.dumps(provenance, indent=1, sort_keys=True))
    (run_dir / "comparison.md").write_text(comparison_grid(reports))
    log.info("distilled student test accuracy %.4f", reports["student (KD)"].accuracy)
    return run_dir


def cmd_evaluate(cfg: RunConfig, args) -> Path:
    run_dir, manifest = _prepare(cfg, "evaluate")
    split = _split(cfg, manifest, args.split)
    loaded = [_load(p, cfg, manifest) for p in args.checkpoints]
    labels = _labels(args.checkpoints, [h for _, h in loaded])
    reports = {}
    for label, (model, _) in zip(labels, loaded):
        reports[label] = _report(model, split, cfg, manifest, run_dir / f"{label}.json")
    (run_dir / "comparison.md").write_text(comparison_grid(reports))
    return run_dir


def _mean(values) -> float | None:
    return float(np.mean(values)) if len(values) else None


def cmd_explain(cfg: RunConfig, args) -> Path:
    if len(args.checkpoints) > 2:
        raise ConfigError("explain takes one or two checkpoints")
    run_dir, manifest = _prepare(cfg, "explain")
    loaded = [_load(p, cfg, manifest) for p in args.checkpoints]
    models = [freeze(m) for m, _ in loaded]
    labels = _labels(args.checkpoints, [h for _, h in loaded])
    ex = cfg.explain
    for m in models:
        if ex.layer is not None and ex.layer not in m.capture_layers:
            raise ConfigError(f"explain.layer: layer {ex.layer!r} not found in model {m.name!r}; choose from {list(m.capture_layers)}")

    test = _split(cfg, manifest, "test")
    if len(test) == 0:
        raise ConfigError("dataset: test split is empty")
    x, y = test.load()
    picks = np.unique(np.linspace(0, len(test) - 1, min(ex.samples, len(test))).round().astype(int))
    records_path = run_dir / "per_image.jsonl"
    records_path.unlink(missing_ok=True)
    overlay_dir = run_dir / "overlays"
    if overlay_dir.exists():
        shutil.rmtree(overlay_dir)

    hits = {label: [] for label in labels}
    entropy = {label: [] for label in labels}
    degenerate = {label: 0 for label in labels}
    pearsons, ious, errors = [], [], 0
    for i in picks:
        truth = int(y[i].argmax())
        for cls in ex.classes if ex.classes is not None else [truth]:
            rec = {"index": int(i), "file": test.items[i][0], "true_class": truth, "target_class": int(cls)}
            try:
                maps = [score_cam(m, x[i], int(cls), ex.layer, ex.batch_size) for m in models]
            except (IndexError, KeyError, ValueError) as e:
                rec["error"] = str(e)
                errors += 1
                append_report(records_path, rec)
                continue
            box = test.box(int(i))
            for label, hm in zip(labels, maps):
                hm.source_model = label
                entropy[label].append(heatmap_entropy(hm))
                degenerate[label] += hm.degenerate
                rec[label] = {"entropy": entropy[label][-1], "degenerate": hm.degenerate, "min": float(hm.values.min()), "max": float(hm.values.max())}
                if box is not None and cls == truth:
                    hit = pointing_hit(hm, box)
                    hits[label].append(hit)
                    rec[label]["pointing_hit"] = hit
            if len(maps) == 2:
                a = alignment(maps[0], maps[1])
                pearsons.append(a.pearson)
                ious.append(a.iou_at_half)
                rec["alignment"] = {"pearson": a.pearson, "iou_at_half": a.iou_at_half}
            render_heatmap(maps, x[i], overlay_dir / f"img{int(i):04d}_c{int(cls)}.png")
            append_report(records_path, rec)

    summary = {
        "n_images": int(len(picks)),
        "errors": errors,
        "layer": ex.layer,
        "models": {
            label: {
                "checkpoint_hash": parameter_hash(m),
                "pointing_accuracy": _mean(hits[label]),
                "mean_entropy": _mean(entropy[label]),
                "degenerate": degenerate[label],
            }
            for label, m in zip(labels, models)
        },
    }
    if len(models) == 2:
        summary["alignment"] = {"pair": labels, "mean_pearson": _mean(pearsons), "mean_iou_at_half": _mean(ious), "n": len(pearsons)}
    (run_dir / "alignment.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    log.info("explained %d images (%d errors)", len(picks), errors)
    return run_dir


def cmd_gen_synthetic(cfg: RunConfig, args) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output_dir) / cfg.name / "data"
    generate_synthetic(cfg.dataset.synthetic.to_spec(), out)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xkd", description="Explainable knowledge distillation toolkit")
    p.add_argument("--version", action="version", version=f"xkd {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", nargs="?", help="YAML run config (defaults are used when omitted)")
        sp.add_argument("--output-dir", help="output root (overrides output_dir and $XKD_OUTPUT_ROOT)")
        sp.add_argument("--name", help="run name")
        sp.add_argument("--seed", type=int, help="sets both distill.seed and models.seed")
        sp.add_argument("--lr", type=float, help="distill.learning_rate")
        sp.add_argument("--epochs-teacher", type=int)
        sp.add_argument("--epochs-student", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("-q", "--quiet", action="store_true")
        return sp

    common(sub.add_parser("train-teacher", help="phase 1: train the teacher on hard labels")).set_defaults(func=cmd_train_teacher)

    sp = common(sub.add_parser("distill", help="phase 2: distill a student from a frozen teacher"))
    sp.add_argument("--teacher", required=True, help="teacher checkpoint")
    sp.add_argument("--with-baseline", action="store_true", help="also train a no-teacher student on the same budget")
    sp.add_argument("--variant", choices=["fbce_mse", "ce_kl"])
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--temperature", type=float)
    sp.set_defaults(func=cmd_distill)

    sp = common(sub.add_parser("evaluate", help="metric reports and a comparison grid"))
    sp.add_argument("--checkpoints", nargs="+", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("explain", help="Score-CAM overlays and teacher/student alignment"))
    sp.add_argument("--checkpoints", nargs="+", required=True, help="one model, or teacher then student")
    sp.add_argument("--layer")
    sp.add_argument("--samples", type=int)
    sp.add_argument("--classes", help="comma-separated class indices (default: ground truth)")
    sp.set_defaults(func=cmd_explain)

    sp = common(sub.add_parser("gen-synthetic", help="write the synthetic blob dataset to disk"))
    sp.add_argument("--out", help="target directory")
    sp.set_defaults(func=cmd_gen_synthetic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        out = args.func(cfg, args)
    except ConfigError as e:
        print(f"xkd: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - the exit-code contract covers every other failure
        log.debug("runtime failure", exc_info=True)
        print(f"xkd: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
