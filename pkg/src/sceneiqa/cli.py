"""Command-line entry point wiring all modules into reproducible runs.

Subcommands: split, train, eval, infer, report, synth.
Exit codes: 0 success, 1 config error, 2 split-constraint failure,
3 training numeric failure, 4 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import data, metrics
from .config import ConfigError, config_help_lines, load_run_config
from .core import ClassProbVector, SceneAffineTable, TopKPolicy, top_k_select
from .data import SplitConstraintError, generate_scene_split, load_manifest, load_split
from .metrics import MetricRecord, MetricUndefinedError, compute_scene_metrics
from .model import ModelConfig, NumericError, load_checkpoint
from .train import TrainConfig, predict_images, run_training

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SPLIT = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4

OUTPUT_ROOT_ENV = "SCENEIQA_OUTPUT_ROOT"


def _out_path(p) -> Path:
    """Relative outputs land under $SCENEIQA_OUTPUT_ROOT when it is set."""
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def cmd_split(args) -> int:
    records, _registry = load_manifest(args.manifest)
    try:
        spec = generate_scene_split(
            records, args.n_test, args.fraction, args.tolerance, args.seed
        )
    except SplitConstraintError as exc:
        print(f"split failed: {exc}", file=sys.stderr)
        return EXIT_SPLIT
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_split(spec, out)
    if args.n_test == 0:
        print("warning: empty test split", file=sys.stderr)
    frac, per_light = data._split_fractions(records, spec.test_scenes)
    n_test_imgs = sum(1 for r in records if r.scene_id in spec.test_scenes)
    print(f"wrote {out}")
    print(f"test images: {n_test_imgs}/{len(records)} (fraction {frac:.4f})")
    print("lighting balance:")
    for light in sorted(per_light):
        print(f"  {light:10s} test fraction {per_light[light]:.4f}")
    return EXIT_OK


def _parse_overrides(pairs):
    tree = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return tree


def cmd_train(args) -> int:
    try:
        cfg = load_run_config(args.config, _parse_overrides(args.set))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ds = cfg.section("dataset")
    manifest = Path(args.manifest or ds["manifest"])
    split_path = Path(args.split or ds["split"])
    records, _registry = load_manifest(manifest)
    split = load_split(split_path)
    data_root = Path(ds["data_root"]) if ds["data_root"] else manifest.parent
    out_dir = _out_path(args.out or cfg["output_dir"])

    n_scenes = len({r.scene_id for r in records} & split.train_scenes)
    m = cfg.section("model")
    model_config = ModelConfig(
        num_scenes=n_scenes, backbone=m["backbone"], input_size=m["input_size"],
        patches_per_image=m["patches_per_image"], top_k=m["top_k"],
        hyper_head=m["hyper_head"], semantic_dim=m["semantic_dim"],
        target_hidden=m["target_hidden"], full_vector=m["full_vector"],
        backbone_weights=m["backbone_weights"] or None,
    )
    t = dict(cfg.section("train"))
    train_config = TrainConfig(seed=cfg["run_seed"], **t)
    try:
        ckpt, state = run_training(
            records, split, model_config, train_config, out_dir, data_root,
            resume_from=args.resume,
        )
    except NumericError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    data.save_split(split, out_dir / "split.txt")
    print(f"checkpoint: {ckpt}")
    print(f"best epoch: {state.best_epoch}  val median SRCC: {state.best_val_srcc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, registry, _epoch, _extra = load_checkpoint(args.checkpoint)
    records, _ = load_manifest(args.manifest)
    split = load_split(args.split)
    present_train = {r.scene_id for r in records} & split.train_scenes
    if set(registry.scene_ids) != present_train:
        print(
            "checkpoint/split mismatch: checkpoint scenes "
            f"{sorted(registry.scene_ids)} vs split train scenes {sorted(present_train)}",
            file=sys.stderr,
        )
        return EXIT_CHECKPOINT
    attribute = args.attribute
    data_root = Path(args.data_root) if args.data_root else Path(args.manifest).parent
    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    test_recs = [r for r in records if r.scene_id in split.test_scenes
                 and attribute in r.attribute_scores]
    preds = predict_images(model, test_recs, data_root, attribute,
                           patch_seed=args.seed)
    by_scene: dict[str, list] = {}
    for rec, _pre, final, probs in preds:
        by_scene.setdefault(rec.scene_id, []).append((rec, final, probs))

    record_rows, degenerate = [], []
    hist_rows = []
    for scene in sorted(by_scene):
        entries = by_scene[scene]
        p = [final for _r, final, _pr in entries]
        t = [r.attribute_scores[attribute] for r, _f, _pr in entries]
        try:
            srcc, plcc, krcc, mae = compute_scene_metrics(p, t)
            record_rows.append((args.model_name, MetricRecord(
                scene_id=scene, attribute=attribute, srcc=srcc, plcc=plcc,
                krcc=krcc, mae=mae, n_images=len(entries),
            )))
        except MetricUndefinedError as exc:
            degenerate.append(f"{scene}: {exc}")
        probs_v = [ClassProbVector(tuple(pr)) for _r, _f, pr in entries]
        counts = metrics.class_distribution_histogram(probs_v, registry)
        for train_scene, c in zip(registry.scene_ids, counts):
            hist_rows.append([scene, train_scene, int(c)])

    (out_dir / "metrics.csv").write_text(
        metrics.records_to_csv(record_rows), encoding="utf-8")
    table = metrics.build_benchmark_table(
        record_rows, [args.model_name], median_mode=args.median_mode)
    (out_dir / "benchmark.csv").write_text(table.to_csv(), encoding="utf-8")
    (out_dir / "benchmark.txt").write_text(table.to_text(), encoding="utf-8")
    with (out_dir / "histograms.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["test_scene", "train_scene", "count"])
        w.writerows(hist_rows)
    with (out_dir / "averaged.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "scene", "attribute", "averaged_correlation"])
        for model_name, rec in record_rows:
            w.writerow([model_name, rec.scene_id, rec.attribute,
                        f"{metrics.averaged_correlation(rec):.6f}"])
    if degenerate:
        (out_dir / "degenerate_scenes.txt").write_text(
            "\n".join(degenerate) + "\n", encoding="utf-8")
    print(table.to_text())
    return EXIT_OK


def cmd_infer(args) -> int:
    model, registry, _epoch, _extra = load_checkpoint(args.checkpoint)
    target = Path(args.path)
    paths = sorted(target.rglob("*")) if target.is_dir() else [target]
    paths = [p for p in paths if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")]
    from PIL import Image

    from .data import PatchConfig
    from .model import forward_image

    cfg = model.config
    patch_config = PatchConfig(cfg.input_size, cfg.patches_per_image, seed=args.seed)
    policy = TopKPolicy(cfg.num_scenes if cfg.full_vector else cfg.top_k)
    for p in paths:
        img = np.asarray(Image.open(p).convert("RGB"))
        pred = forward_image(img, model, patch_config, image_key=str(p))
        idx, weights = top_k_select(pred.class_probs, policy)
        line = {
            "image": str(p),
            "pre_quality": pred.pre_quality,
            "final_score": pred.final_score,
            "top_scenes": [
                {"scene": registry.scene_ids[i], "weight": w}
                for i, w in zip(idx, weights)
            ],
        }
        print(json.dumps(line))
    return EXIT_OK


def cmd_report(args) -> int:
    record_rows = []
    models = []
    for path in args.metrics:
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rec = MetricRecord(
                    scene_id=row["scene"], attribute=row["attribute"],
                    srcc=float(row["srcc"]), plcc=float(row["plcc"]),
                    krcc=float(row["krcc"]), mae=float(row["mae"]),
                    n_images=int(row["n"]),
                )
                record_rows.append((row["model"], rec))
                if row["model"] not in models:
                    models.append(row["model"])
    table = metrics.build_benchmark_table(record_rows, models,
                                          median_mode=args.median_mode)
    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "benchmark.csv").write_text(table.to_csv(), encoding="utf-8")
    (out_dir / "benchmark.txt").write_text(table.to_text(), encoding="utf-8")
    print(table.to_text())
    return EXIT_OK


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.identity_affine:
        truth = SceneAffineTable.identity(args.n_scenes)
    else:
        truth = SceneAffineTable(
            tuple(rng.uniform(0.5, 3.0, args.n_scenes)),
            tuple(rng.uniform(-1.0, 2.0, args.n_scenes)),
        )
    out_dir = _out_path(args.out)
    manifest = data.generate_synthetic_dataset(
        args.n_scenes, args.images_per_scene, truth, args.seed, out_dir,
    )
    (out_dir / "affine_truth.json").write_text(json.dumps({
        "multipliers": list(truth.multipliers), "offsets": list(truth.offsets),
    }, indent=2), encoding="utf-8")
    print(f"wrote {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sceneiqa",
        description="Scene-aware blind portrait quality assessment pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="generate a scene-disjoint train/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--n-test", type=int, required=True, dest="n_test")
    p.add_argument("--fraction", type=float, default=0.29)
    p.add_argument("--tolerance", type=float, default=0.03)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="split.txt")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser(
        "train", help="train a model from a config file",
        epilog="config keys and defaults:\n" + "\n".join(config_help_lines()),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", default=None, help="YAML run config (defaults if omitted)")
    p.add_argument("--manifest", default=None, help="override dataset.manifest")
    p.add_argument("--split", default=None, help="override dataset.split")
    p.add_argument("--out", default=None, help="override output_dir")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config value")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--attribute", default="Overall")
    p.add_argument("--data-root", default=None)
    p.add_argument("--model-name", default="sceneiqa", dest="model_name")
    p.add_argument("--median-mode", default="standard", choices=["standard", "lower"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="score an image or directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="aggregate metric CSVs into a benchmark table")
    p.add_argument("metrics", nargs="+", help="metric record CSV files")
    p.add_argument("--median-mode", default="standard", choices=["standard", "lower"])
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic verification dataset")
    p.add_argument("--n-scenes", type=int, default=5, dest="n_scenes")
    p.add_argument("--images-per-scene", type=int, default=20, dest="images_per_scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--identity-affine", action="store_true")
    p.add_argument("--out", default="synthetic")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SplitConstraintError as exc:
        print(f"split failed: {exc}", file=sys.stderr)
        return EXIT_SPLIT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
