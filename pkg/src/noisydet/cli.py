"""Command line entry point: ``noisydet {inject-noise,train,eval,correct,plot}``.

Outputs go under ``$NOISYDET_OUTPUT_ROOT`` (default ``./runs``) unless
``--out`` names a directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .correction import write_audit_log
from .data import Annotation, AnnotationFormatError, load_annotations, save_annotations, save_images
from .evaluation import correction_diagnostics, evaluate_detections, truths_from_dataset
from .experiment import (
    VARIANTS,
    ExperimentConfig,
    build_datasets,
    config_from_dict,
    correct_dataset,
    evaluate_model,
    load_config,
    run_experiment,
)
from .training import model_from_checkpoint, read_metrics, windowed_divergence


class CliError(Exception):
    pass


def _add_config(p):
    p.add_argument("--config", help="YAML or JSON experiment config")


def _add_noise(p):
    p.add_argument("--nl", type=float, help="label noise, percent of annotations")
    p.add_argument("--nb", type=float, help="box noise, percent of box width/height")
    p.add_argument("--seed", type=int, help="seed for noise, data order and initialisation")


def _add_correction(p):
    p.add_argument("--alpha", type=float, help="box gradient step size")
    p.add_argument("--temperature", type=float, help="soft-label sharpening temperature")
    p.add_argument("--rho", type=float, help="box refinement factor")
    p.add_argument("--lambda", dest="lam", type=float, help="background-score weight in the box loss")


def _add_out(p):
    p.add_argument("--out", help="output directory (default: under $NOISYDET_OUTPUT_ROOT)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisydet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inject-noise", help="synthesise (or load) a dataset and corrupt its annotations")
    _add_config(p)
    _add_noise(p)
    p.add_argument("--annotations", help="clean COCO-style annotation file to corrupt instead of synthesising")
    p.add_argument("--images", help="image directory for --annotations")
    _add_out(p)

    p = sub.add_parser("train", help="train a detector, then evaluate it and write a run directory")
    _add_config(p)
    _add_noise(p)
    _add_correction(p)
    p.add_argument("--variant", choices=VARIANTS, help="training variant (default from config: full)")
    p.add_argument("--no-cabbc", action="store_true", help="skip the box gradient step")
    p.add_argument("--single-head", action="store_true", help="train and correct with head 1 only")
    p.add_argument("--ensemble", action="store_true", help="report ensemble inference as the headline number")
    p.add_argument("--iters", type=int, help="total training iterations")
    p.add_argument("--name", help="run name (directory under the output root)")
    p.add_argument("--log-every", type=int, default=100)
    _add_out(p)

    p = sub.add_parser("eval", help="score a checkpoint or a prediction file")
    _add_config(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="trained checkpoint")
    src.add_argument("--predictions", help="JSON list of {image_id, category_id, bbox, score}")
    p.add_argument("--annotations", help="test annotation file (default: test set from the config)")
    p.add_argument("--images", help="image directory for --annotations")
    p.add_argument("--ensemble", action="store_true", help="average both heads at inference")
    _add_out(p)

    p = sub.add_parser("correct", help="run annotation correction offline with a fixed checkpoint")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--annotations", help="noisy annotation file (default: training set from the config)")
    p.add_argument("--images", help="image directory for --annotations")
    _add_noise(p)
    _add_correction(p)
    p.add_argument("--no-cabbc", action="store_true")
    _add_out(p)

    p = sub.add_parser("plot", help="SVG plots from metric CSVs")
    p.add_argument("kind", choices=("divergence", "temperature"))
    p.add_argument("inputs", nargs="+", help="metrics.csv files (divergence) or a sweep CSV (temperature)")
    p.add_argument("--window", type=int, default=100, help="iterations per divergence average")
    p.add_argument("--output", required=True, help="SVG path")
    return parser


# config assembly ----------------------------------------------------------------------------


def _config(args) -> ExperimentConfig:
    if args.config:
        try:
            cfg = load_config(args.config)
        except FileNotFoundError as exc:
            raise CliError(str(exc)) from None
        except (ValueError, TypeError) as exc:
            raise CliError(f"invalid config {args.config}: {exc}") from None
    else:
        cfg = ExperimentConfig()
    noise = cfg.noise
    if getattr(args, "nl", None) is not None:
        noise = replace(noise, label_noise=args.nl)
    if getattr(args, "nb", None) is not None:
        noise = replace(noise, bbox_noise=args.nb)
    train = cfg.train
    if getattr(args, "seed", None) is not None:
        noise = replace(noise, seed=args.seed)
        train = replace(train, seed=args.seed)
    cc = train.correction
    for flag, name in (("alpha", "alpha"), ("temperature", "temperature"), ("rho", "rho"), ("lam", "lam")):
        v = getattr(args, flag, None)
        if v is not None:
            cc = replace(cc, **{name: v})
    if getattr(args, "no_cabbc", False):
        cc = replace(cc, cabbc=False)
    if getattr(args, "iters", None) is not None:
        train = replace(train, total_iters=args.iters)
    cfg = replace(cfg, noise=noise, train=replace(train, correction=cc))
    if getattr(args, "variant", None):
        cfg = replace(cfg, variant=args.variant)
    if getattr(args, "single_head", False):
        cfg = replace(cfg, variant="single_head")
    if getattr(args, "ensemble", False):
        cfg = replace(cfg, ensemble=True)
    if getattr(args, "name", None):
        cfg = replace(cfg, name=args.name)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    return model_from_checkpoint(path)


# subcommands ---------------------------------------------------------------------------------


def cmd_inject_noise(args) -> int:
    cfg = _config(args)
    if not args.out:
        n = cfg.noise
        cfg = replace(cfg, name=f"noisy_nl{n.label_noise:g}_nb{n.bbox_noise:g}_s{n.seed}")
    if args.annotations:
        cfg = replace(cfg, data=replace(cfg.data, train_annotations=args.annotations, train_image_dir=args.images))
    train, _ = build_datasets(cfg)
    out = cfg.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    if train.pixels is not None:
        save_images(train, out / "images")
    save_annotations(train, out / "annotations.json")
    print(f"wrote {len(train.annotations)} annotations over {len(train)} images to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    result = run_experiment(cfg, write=True, log_every=args.log_every)
    print(json.dumps(result.summary(), indent=1, default=float))
    print(f"run directory: {result.run_dir}")
    return 0


def _test_set(args, cfg):
    if args.annotations:
        return load_annotations(args.annotations, args.images)
    _, test = build_datasets(cfg)
    return test


def _predictions_from_file(path, ds) -> list[dict]:
    raw = json.loads(Path(path).read_text())
    cat_ids = {i + 1 for i in range(ds.num_classes)}
    per_image = {im.id: ([], [], []) for im in ds.images}
    for k, r in enumerate(raw):
        if r["image_id"] not in per_image or r["category_id"] not in cat_ids:
            raise CliError(f"prediction #{k}: unknown image_id or category_id")
        x, y, w, h = r["bbox"]
        boxes, scores, labels = per_image[r["image_id"]]
        boxes.append([x, y, x + w, y + h])
        scores.append(float(r["score"]))
        labels.append(int(r["category_id"]) - 1)
    return [
        {"boxes": np.array(b, dtype=np.float64).reshape(-1, 4), "scores": np.array(s), "labels": np.array(c, dtype=np.int64)}
        for b, s, c in (per_image[im.id] for im in ds.images)
    ]


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.checkpoint:
        model, _ = _load_checkpoint(args.checkpoint)
        if not args.config and not args.annotations:
            resolved = Path(args.checkpoint).parent / "config.json"
            if resolved.is_file():
                cfg = config_from_dict(json.loads(resolved.read_text())["config"])
        test = _test_set(args, cfg)
        report = evaluate_model(model, test, ensemble=args.ensemble)
        out = Path(args.out) if args.out else Path(args.checkpoint).parent
    else:
        if not Path(args.predictions).is_file():
            raise CliError(f"prediction file not found: {args.predictions}")
        test = _test_set(args, cfg)
        preds = _predictions_from_file(args.predictions, test)
        report = evaluate_detections(preds, truths_from_dataset(test), test.categories, [im.id for im in test.images])
        out = Path(args.out) if args.out else cfg.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    name = "eval_ensemble.json" if args.ensemble else "eval.json"
    report.save(out / name)
    report.save_pr_curves(out / "eval_pr_curves.csv")
    print(f"mAP@.5 {report.map50:.4f}  mAP@[.5,.95] {report.map_range:.4f}  -> {out / name}")
    return 0


def cmd_correct(args) -> int:
    cfg = _config(args)
    model, _ = _load_checkpoint(args.checkpoint)
    if args.annotations:
        ds = load_annotations(args.annotations, args.images)
        if ds.pixels is None:
            raise CliError("--images is required with --annotations")
    else:
        ds, _ = build_datasets(cfg)
    records = correct_dataset(model, ds, cfg.train.correction)
    out = Path(args.out) if args.out else cfg.run_dir() / "corrected"
    out.mkdir(parents=True, exist_ok=True)
    write_audit_log(records, out / "audit.tsv")
    corrected = ds.copy()
    by_id = {r.annotation_id: r for r in records}
    corrected.annotations = [
        Annotation(a.id, a.image_id, int(np.argmax(by_id[a.id].soft_label)), by_id[a.id].box_refined)
        for a in ds.annotations
        if not by_id[a.id].rejected
    ]
    save_annotations(corrected, out / "annotations.json")
    diag = correction_diagnostics(records, ds.clean)
    if diag is not None:
        (out / "correction.json").write_text(json.dumps(diag, indent=1, sort_keys=True))
        print(json.dumps(diag, indent=1))
    print(f"corrected {len(records)} boxes ({len(records) - len(corrected.annotations)} rejected) -> {out}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for path in args.inputs:
        if not Path(path).is_file():
            raise CliError(f"input not found: {path}")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if args.kind == "divergence":
        for path in args.inputs:
            hist = read_metrics(path)
            start = next((int(r["iteration"]) for r in hist if r["phase"] != "warmup"), 0)
            curve = windowed_divergence(hist, args.window, start)
            ax.plot(start + args.window * (np.arange(len(curve)) + 1), curve, marker="o", label=Path(path).parent.name)
        ax.set_xlabel("iteration")
        ax.set_ylabel(f"head discrepancy (mean over {args.window} iterations)")
        ax.set_ylim(bottom=0)
    else:
        with open(args.inputs[0], newline="") as fh:
            rows = list(csv.DictReader(fh))
        groups: dict[str, list] = {}
        for r in rows:
            groups.setdefault(r.get("setting", ""), []).append((float(r["temperature"]), float(r["map50"])))
        for name, pts in groups.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o", label=name or None)
        ax.set_xlabel("sharpening temperature T")
        ax.set_ylabel("mAP@.5")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    fig.tight_layout()
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.output, format="svg")
    plt.close(fig)
    print(f"wrote {args.output}")
    return 0


COMMANDS = {
    "inject-noise": cmd_inject_noise,
    "train": cmd_train,
    "eval": cmd_eval,
    "correct": cmd_correct,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, AnnotationFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
