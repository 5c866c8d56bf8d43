"""``capsule`` command line: stats, augment, train, explain, report, synth."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import catalog as cat
from .augment import build_plan, execute_plan
from .config import ConfigError, RunConfig, load_config, validate_paths
from .curriculum import build_schedule
from .metrics import REFERENCE_BASELINES, MetricsReport, ClassMetrics, render_comparison
from .trainer import TrainingAborted, TrainingLog, run_curriculum, run_direct

logger = logging.getLogger("capsule")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4


def _ingest(cfg: RunConfig) -> tuple[cat.ClassCatalog, cat.DatasetManifest]:
    validate_paths(cfg)
    catalog = cfg.load_catalog()
    return catalog, cat.ingest(cfg.dataset, catalog)


def _print_stats(stats: cat.ClassStats, title: str) -> None:
    print(title)
    for name, n in stats.counts.items():
        print(f"  {name:<20} {n:>8}")
    print(f"  imbalance ratio: {stats.imbalance_ratio:.2f}")
    rest = stats.without_normal()
    if rest.counts and any(rest.counts.values()):
        print(f"  imbalance ratio (without Normal): {rest.imbalance_ratio:.2f}")


def cmd_stats(cfg: RunConfig, args) -> int:
    _, manifest = _ingest(cfg)
    stats = cat.compute_stats(manifest, "train", "original")
    _print_stats(stats, "training images per class (original)")
    out = cfg.output_dir / "stats"
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps({"counts": stats.counts, "imbalance_ratio": stats.imbalance_ratio}, indent=2) + "\n")
    written = []
    if not args.no_normal:
        written.append(cat.emit_distribution_plot(stats, out / "class_distribution.png", include_normal=True))
    written.append(cat.emit_distribution_plot(stats, out / "class_distribution_no_normal.png", include_normal=False))
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_augment(cfg: RunConfig, args) -> int:
    catalog, manifest = _ingest(cfg)
    stats = cat.compute_stats(manifest, "train", "original")
    a = cfg.augment
    plan = build_plan(stats, catalog, a.target_count, a.cap_multiplier, a.thresholds)
    print(plan.describe())
    if args.dry_run:
        print("dry run: nothing written")
        return EXIT_OK
    out = cfg.augmented_dir
    out.mkdir(parents=True, exist_ok=True)
    augmented = execute_plan(manifest, plan, a.tiers, cfg.seed, out, workers=a.workers)
    augmented.write_csv(cfg.augmented_manifest)
    (out / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2) + "\n")
    cfg.write_snapshot(out)
    post = cat.compute_stats(augmented, "train", None)
    _print_stats(post, "training images per class after augmentation")
    cat.emit_distribution_plot(post, out / "post_augmentation_no_normal.png", include_normal=False, title="Class distribution after augmentation (without Normal)")
    print(f"wrote {cfg.augmented_manifest}")
    return EXIT_OK


def _write_run(directory: Path, log: TrainingLog) -> MetricsReport | None:
    directory.mkdir(parents=True, exist_ok=True)
    wall = log.wall_time
    log.wall_time = 0.0  # timing lives in timing.json so the log itself is reproducible
    log.write(directory / "training_log.json")
    (directory / "timing.json").write_text(json.dumps({"wall_time_s": wall}) + "\n")
    if log.final_report is None:
        return None
    report = report_from_dict(log.final_report)
    (directory / "metrics.json").write_text(report.to_json() + "\n")
    (directory / "metrics.md").write_text(report.to_markdown())
    return report


def report_from_dict(d: dict) -> MetricsReport:
    w = d["weighted"]
    return MetricsReport(
        {c: ClassMetrics(**m) for c, m in d["per_class"].items()},
        w["accuracy"],
        w["precision"],
        w["recall"],
        w["f1"],
        d.get("method_name", ""),
        d.get("confusion", []),
    )


def cmd_train(cfg: RunConfig, args) -> int:
    validate_paths(cfg)
    if not cfg.augmented_manifest.exists():
        raise cat.DataError(f"augmented manifest not found at {cfg.augmented_manifest}; run `capsule augment` first")
    catalog = cfg.load_catalog()
    manifest = cat.ingest(cfg.augmented_manifest, catalog)
    mode = args.mode or cfg.mode
    train_root = cfg.output_dir / "train"
    cfg.write_snapshot(train_root)
    reports = []
    if mode in ("curriculum", "both"):
        origin = "original" if cfg.curriculum.ordering_source == "original" else None
        schedule = build_schedule(cat.compute_stats(manifest, "train", origin), catalog, cfg.curriculum.remainder_mode)
        print("curriculum order (easiest first): " + " -> ".join(schedule.ordering))
        out = train_root / "curriculum"
        out.mkdir(parents=True, exist_ok=True)
        (out / "schedule.json").write_text(json.dumps(schedule.to_dict(), indent=2) + "\n")
        _, log = run_curriculum(manifest, schedule, cfg.model, cfg.train, checkpoint_dir=out)
        reports.append(_write_run(out, log))
    if mode in ("direct", "both"):
        out = train_root / "direct"
        _, log = run_direct(manifest, cfg.model, cfg.train, checkpoint_dir=out)
        reports.append(_write_run(out, log))
    reports = [r for r in reports if r is not None]
    for r in reports:
        print(f"{r.method_name}: accuracy {100 * r.accuracy:.2f}%  weighted F1 {r.f1:.3f}")
    if mode == "both" and reports:
        table = render_comparison(reports, REFERENCE_BASELINES)
        (train_root / "comparison.md").write_text(table)
        (train_root / "comparison.csv").write_text(render_comparison(reports, REFERENCE_BASELINES, fmt="csv"))
        print(table)
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    train_root = cfg.output_dir / "train"
    reports = []
    for mode in ("curriculum", "direct"):
        p = train_root / mode / "metrics.json"
        if p.exists():
            reports.append(report_from_dict(json.loads(p.read_text())))
    if not reports:
        raise cat.DataError(f"no metrics found under {train_root}; run `capsule train` first")
    md = render_comparison(reports, REFERENCE_BASELINES)
    (train_root / "comparison.md").write_text(md)
    (train_root / "comparison.csv").write_text(render_comparison(reports, REFERENCE_BASELINES, fmt="csv"))
    print(md)
    return EXIT_OK


def cmd_explain(cfg: RunConfig | None, args) -> int:
    from PIL import Image

    from .explain import gradcam, overlay, predicted_class
    from .model import load_checkpoint
    from .trainer import load_image, to_input

    model, _ = load_checkpoint(args.checkpoint)
    if args.target_class is not None and args.target_class not in model.class_names:
        raise cat.DataError(f"class {args.target_class!r} is not in the checkpoint; valid classes: {model.class_names}")
    out_dir = Path(args.out) if args.out else (cfg.output_dir / "explain" if cfg else Path("explain"))
    out_dir.mkdir(parents=True, exist_ok=True)
    size = model.spec.input_size
    for image_path in args.images:
        p = Path(image_path)
        if not p.exists():
            raise cat.DataError(f"image not found: {p}")
        pixels = load_image(str(p), size)
        x = to_input(pixels[None])
        target = args.target_class or predicted_class(model, x)
        hm = gradcam(model, x, target, input_ref=str(p))
        with Image.open(p) as im:
            original = np.asarray(im.convert("RGB"))
        dest = out_dir / f"{p.stem}_{target.replace(' ', '_')}_cam.png"
        overlay(hm, original, args.alpha, dest)
        if args.csv:
            np.savetxt(dest.with_suffix(".csv"), hm.grid, delimiter=",", fmt="%.8f")
        print(f"{p.name}: {target} -> {dest}")
    return EXIT_OK


def cmd_synth(args) -> int:
    """Write a synthetic dataset, its catalog and a starter config."""
    counts = {}
    for item in args.counts.split(","):
        name, _, n = item.partition("=")
        counts[name.strip()] = int(n)
    names = tuple(counts)
    normal = args.normal or names[0]
    catalog = cat.ClassCatalog(names, normal)
    root = Path(args.out)
    data = root / "data"
    cat.generate_synthetic(catalog, counts, args.size, args.seed, data, val_counts={c: args.val_count for c in names}, localized=args.localized)
    catalog.save(root / "catalog.json")
    config = {
        "dataset": "data",
        "catalog": "catalog.json",
        "output_dir": "run",
        "seed": args.seed,
        "mode": "both",
        "augment": {"thresholds": [500, 3000], "target_count": args.target, "cap_multiplier": 25},
        "curriculum": {"remainder_mode": "aggregate", "ordering_source": "original"},
        "model": {"architecture": "tiny_hybrid", "input_size": args.size},
        "train": {"learning_rate": 1e-3, "batch_size": 32, "epochs_per_stage": 5},
    }
    import yaml

    (root / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    print(f"wrote synthetic dataset to {data} and config {root / 'config.yaml'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsule", description="Tiered augmentation and curriculum training for imbalanced image classification.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="run config (YAML or JSON)")
        return p

    p = with_config(sub.add_parser("stats", help="class distribution and plots"))
    p.add_argument("--no-normal", action="store_true", help="only plot the abnormal classes")
    p = with_config(sub.add_parser("augment", help="plan and materialize tiered augmentation"))
    p.add_argument("--dry-run", action="store_true", help="print the plan, write nothing")
    p = with_config(sub.add_parser("train", help="curriculum and/or direct training"))
    p.add_argument("--mode", choices=("curriculum", "direct", "both"))
    with_config(sub.add_parser("report", help="comparison table from finished runs"))
    p = with_config(sub.add_parser("explain", help="GradCAM overlays from a checkpoint"), required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--class", dest="target_class", help="class to explain (default: predicted class)")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--csv", action="store_true", help="also dump the raw heatmap grid")
    p.add_argument("--out", help="output directory")
    p.add_argument("images", nargs="+")
    p = sub.add_parser("synth", help="generate a synthetic toy dataset and starter config")
    p.add_argument("--out", required=True)
    p.add_argument("--counts", default="Normal=400,Ulcer=60,Polyp=30,Worms=12", help="comma list name=count (train)")
    p.add_argument("--normal", help="normal class name (default: first in --counts)")
    p.add_argument("--val-count", type=int, default=40)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", type=int, default=200, help="augmentation target count in the starter config")
    p.add_argument("--localized", action="store_true", help="confine patterns to one quadrant")
    return parser


COMMANDS = {"stats": cmd_stats, "augment": cmd_augment, "train": cmd_train, "report": cmd_report, "explain": cmd_explain}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = load_config(args.config) if args.config else None
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (cat.DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
