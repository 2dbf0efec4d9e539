"""``segkit`` command line: split, train, predict, detect, evaluate, synth.

Exit status is 0 on success, 1 on any failure and 2 on invalid usage.
Logs go to stderr as ``key=value`` lines; results go to files (and short
summaries to stdout).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import postprocess as pp
from .config import RunConfig, load_config
from .data import (DataError, FoldSplit, Sample, center_crop, dataset_pairs, load_dataset, load_image,
                   load_mask, save_sample, split_folds, synth_blobs)
from .errors import ConfigError
from .nets import build
from .trainer import (CheckpointError, TrainingError, TrainState, checkpoint_load, checkpoint_save, evaluate,
                      predict_proba, train, write_history)

log = logging.getLogger("segkit")

REPORT_COLUMNS = ("model", "IOU", "Dice", "Time", "precision", "recall", "F1", "images")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _config(args, check_paths: bool = False) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in ("data_root", "output_dir", "val_fold", "folds_file")
                 if getattr(args, k, None) is not None}
    if overrides:
        cfg = replace(cfg, **overrides)
    errors = cfg.validate(check_paths)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def _crop(s: Sample, crop: int | None) -> Sample:
    if crop is None:
        return s
    h, w = s.image.shape[1:]
    if crop > min(h, w):
        raise DataError(f"{s.source_id}: image {h}x{w} is smaller than crop {crop} (set crop: null)")
    return center_crop(s, crop)


def _folds(cfg: RunConfig, ids: list[str]) -> FoldSplit:
    path = cfg.fold_table
    if path.is_file():
        split = FoldSplit.from_csv(path)
        missing = sorted(set(ids) - set(split.assignment))
        if missing:
            raise DataError(f"{path}: {len(missing)} sample ids not in fold table, e.g. {missing[0]}")
        return split
    split = split_folds(ids, cfg.folds, cfg.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    split.to_csv(path)
    log.info("event=fold_table_written path=%s sizes=%s", path, ",".join(map(str, split.sizes)))
    return split


def _fold_samples(cfg: RunConfig, folds: list[int]) -> tuple[list[Sample], list[Sample]]:
    samples = [_crop(s, cfg.crop) for s in load_dataset(cfg.data_root)]
    split = _folds(cfg, [s.source_id for s in samples])
    chosen = {i for f in folds for i in split.fold(f)}
    return ([s for s in samples if s.source_id in chosen], [s for s in samples if s.source_id not in chosen])


def _inputs(paths: list[str], suffixes=(".png",)) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in suffixes))
        else:
            out.append(p)
    if not out:
        raise DataError("no input images")
    return out


def _inference_settings(extra: dict, args) -> dict:
    settings = {"threshold": pp.THRESHOLD, "min_area": pp.MIN_AREA, "connectivity": pp.CONNECTIVITY,
                "crop": None, "mean": None, "std": None}
    settings.update({k: v for k, v in extra.get("inference", {}).items() if k in settings})
    for key in ("threshold", "min_area", "connectivity"):
        if getattr(args, key, None) is not None:
            settings[key] = getattr(args, key)
    return settings


def _predict_file(net, path: Path, s: dict) -> np.ndarray:
    sample = _crop(Sample(load_image(path), None, path.stem), s["crop"])
    kw = {k: s[k] for k in ("mean", "std") if s[k] is not None}
    return predict_proba(net, [sample], **kw)[0]


def _write_png(mask: np.ndarray, path: Path) -> None:
    Image.fromarray(mask.astype(np.uint8), "L").save(path)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    samples = synth_blobs(np.random.default_rng(args.seed), args.count, args.size, args.max_lesions,
                          args.empty_fraction)
    for s in samples:
        save_sample(s, args.out)
    log.info("event=synth_written path=%s count=%d size=%d", args.out, len(samples), args.size)
    return 0


def cmd_split(args) -> int:
    cfg = _config(args)
    k = args.k if args.k is not None else cfg.folds
    seed = args.seed if args.seed is not None else cfg.seed
    ids = [stem for stem, _, mask in dataset_pairs(cfg.data_root) if mask is not None]
    if not ids:
        raise DataError(f"no annotated images under {cfg.data_root}")
    split = split_folds(ids, k, seed)
    out = Path(args.out) if args.out else cfg.fold_table
    out.parent.mkdir(parents=True, exist_ok=True)
    split.to_csv(out)
    print("fold_sizes=" + ",".join(map(str, split.sizes)))
    return 0


def cmd_train(args) -> int:
    if not args.config:
        raise UsageError("train needs --config")
    cfg = _config(args, check_paths=True)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    val, tr = _fold_samples(cfg, [cfg.val_fold])
    last, best = out / "last.ckpt", out / "best.ckpt"
    if args.resume and last.is_file():
        net, state, _ = checkpoint_load(last, expected_spec=cfg.network)
        state = state or TrainState()
        log.info("event=resume path=%s epochs_done=%d", last, state.epochs_done)
    else:
        net, state = build(cfg.network), TrainState()
    inference = {"threshold": cfg.threshold, "min_area": cfg.min_area, "connectivity": cfg.connectivity,
                 "crop": cfg.crop, "mean": list(cfg.mean), "std": list(cfg.std)}

    def on_epoch(net, state, row):
        if row["val_iou"] > state.best_iou:
            state.best_iou = row["val_iou"]
            checkpoint_save(best, net, state, {"inference": inference, "selected": "best"})
        checkpoint_save(last, net, state, {"inference": inference, "selected": "last"})
        write_history(state.history, out / "history.csv")

    log.info("event=train_start train=%d val=%d epochs=%d", len(tr), len(val), cfg.schedule.total_epochs)
    state = train(net, tr, val, cfg.schedule, cfg.loss_variant, cfg.augment, state, cfg.mean, cfg.std,
                  cfg.threshold, args.threads, on_epoch)
    write_history(state.history, out / "history.csv")
    final = state.history[-1]
    print(f"epochs={state.epochs_done} val_iou={final['val_iou']!r} val_dice={final['val_dice']!r} "
          f"best_iou={state.best_iou!r}")
    return 0


def cmd_predict(args) -> int:
    net, _, extra = checkpoint_load(args.checkpoint)
    s = _inference_settings(extra, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for path in _inputs(args.images):
        try:
            mask = pp.binarize(_predict_file(net, path, s), s["threshold"])
            _write_png(mask, out / f"{path.stem}.png")
        except (DataError, ValueError) as exc:
            failed += 1
            log.error("event=predict_failed path=%s error=%s", path, json.dumps(str(exc)))
    log.info("event=predict_done out=%s failed=%d", out, failed)
    return 1 if failed else 0


def cmd_detect(args) -> int:
    if bool(args.masks) == bool(args.checkpoint):
        raise UsageError("detect needs either --masks or --checkpoint with --images")
    if args.checkpoint:
        if not args.images:
            raise UsageError("--checkpoint needs --images")
        net, _, extra = checkpoint_load(args.checkpoint)
        s = _inference_settings(extra, args)
        paths = _inputs(args.images)
    else:
        net, s = None, _inference_settings({}, args)
        paths = _inputs(args.masks, (".png", ".jpg", ".jpeg"))
    lines, failed = [], 0
    for path in paths:
        try:
            if net is None:
                det = pp.detect_mask(load_mask(path), s["connectivity"], s["min_area"])
            else:
                det = pp.detect(_predict_file(net, path, s), s["threshold"], s["connectivity"], s["min_area"])
        except (DataError, ValueError) as exc:
            failed += 1
            log.error("event=detect_failed path=%s error=%s", path, json.dumps(str(exc)))
            continue
        lines.append(json.dumps({"id": path.stem, "present": det.present, "lesions": det.records()}))
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 1 if failed else 0


def lesion_histograms(samples: list[Sample], connectivity: int = pp.CONNECTIVITY, area_bins: int = 10) -> dict:
    """Lesions per image and lesion area distributions of the ground-truth masks."""
    counts, areas = [], []
    for s in samples:
        comps = pp.connected_components_with_stats(s.mask, connectivity)
        counts.append(len(comps))
        areas.extend(c.area for c in comps)
    per_image = np.bincount(counts) if counts else np.zeros(0, int)
    if areas:
        area_counts, edges = np.histogram(areas, bins=area_bins)
    else:
        area_counts, edges = np.zeros(0, int), np.zeros(0)
    return {
        "lesions_per_image": {"lesions": list(range(len(per_image))), "images": per_image.tolist()},
        "lesion_area": {"edges": edges.tolist(), "lesions": area_counts.tolist()},
        "images": len(samples),
        "lesions": len(areas),
    }


def _prediction_reader(root: Path):
    def predict(samples):
        out = []
        for s in samples:
            matches = [root / f"{s.source_id}{ext}" for ext in (".png", ".jpg", ".jpeg")]
            path = next((p for p in matches if p.is_file()), None)
            if path is None:
                raise DataError(f"no prediction for {s.source_id} in {root}")
            out.append(load_mask(path).astype(np.float32))
        return out
    return predict


def cmd_evaluate(args) -> int:
    cfg = _config(args, check_paths=True)
    folds = args.fold if args.fold else [cfg.val_fold]
    samples, _ = _fold_samples(cfg, folds)
    if not samples:
        raise DataError(f"folds {folds} are empty")
    models = []
    if args.predictions:
        models.append((Path(args.predictions).name, None, _prediction_reader(Path(args.predictions))))
    for ck in args.checkpoint or []:
        models.append((Path(ck).stem, checkpoint_load(ck, expected_spec=cfg.network)[0], None))
    if not models:
        for name in ("best", "last"):
            path = Path(cfg.output_dir) / f"{name}.ckpt"
            if path.is_file():
                models.append((name, checkpoint_load(path, expected_spec=cfg.network)[0], None))
    if not models:
        raise UsageError("nothing to evaluate: give --checkpoint or --predictions, or train first")

    rows, details = [], []
    for name, net, predictor in models:
        res = evaluate(net, samples, cfg.threshold, cfg.min_area, cfg.connectivity, cfg.match_radius,
                       args.timing, cfg.timing_repeats, cfg.mean, cfg.std, predictor=predictor)
        rows.append({"model": name, "IOU": 100 * res.iou, "Dice": 100 * res.dice, "Time": res.ms_per_image,
                     "precision": res.precision, "recall": res.recall, "F1": res.f1, "images": len(samples)})
        details.append({"model": name, "tp": res.tp, "fp": res.fp, "fn": res.fn, "per_image": res.per_image})
        log.info("event=evaluated model=%s iou=%.4f dice=%.4f f1=%.4f", name, res.iou, res.dice, res.f1)

    out = Path(args.out) if args.out else Path(cfg.output_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row[k] is None else row[k] for k in REPORT_COLUMNS})
    report = {
        "folds": folds,
        "units": {"IOU": "%", "Dice": "%", "Time": "ms per image"},
        "notes": {
            "Time": "environment-specific: median of warm repetitions on this machine; empty unless --timing",
            "F1": "lesion-level precision/recall/F1 from greedy centroid matching within "
                  f"{cfg.match_radius} px; a stand-in, not an official challenge score",
        },
        "environment": {"machine": platform.machine(), "python": platform.python_version(),
                        "threads": args.threads} if args.timing else None,
        "models": rows,
        "details": details,
        "histograms": lesion_histograms(samples, cfg.connectivity),
    }
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    for row in rows:
        time = "" if row["Time"] is None else f" Time={row['Time']:.2f}"
        print(f"model={row['model']} IOU={row['IOU']:.2f} Dice={row['Dice']:.2f}{time} F1={row['F1']:.3f}")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker and BLAS threads; 1 gives bitwise-reproducible runs")

    parser = argparse.ArgumentParser(prog="segkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--max-lesions", type=int, default=3)
    p.add_argument("--empty-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", parents=[common], help="assign annotated images to folds")
    p.add_argument("--data-root")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="fold table CSV (default: folds_file from the config)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="train one model on all folds but the validation fold")
    p.add_argument("--data-root")
    p.add_argument("--output-dir")
    p.add_argument("--folds-file")
    p.add_argument("--val-fold", type=int)
    p.add_argument("--resume", action="store_true", help="continue from <output_dir>/last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="write {0,255} mask PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("images", nargs="+", help="image files or directories of PNGs")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("detect", parents=[common], help="lesion centroids as JSON lines")
    p.add_argument("--masks", nargs="+")
    p.add_argument("--checkpoint")
    p.add_argument("--images", nargs="+")
    p.add_argument("--out", help="JSON-lines file (default: stdout)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-area", type=int)
    p.add_argument("--connectivity", type=int, choices=(4, 8))
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", parents=[common], help="IOU/Dice/Time table and lesion statistics")
    p.add_argument("--data-root")
    p.add_argument("--output-dir")
    p.add_argument("--folds-file")
    p.add_argument("--fold", type=int, action="append", help="fold to score (repeatable)")
    p.add_argument("--checkpoint", action="append", help="model checkpoint (repeatable)")
    p.add_argument("--predictions", help="directory of predicted masks named by sample id")
    p.add_argument("--timing", action="store_true")
    p.add_argument("--out", help="report directory (default: <output_dir>/report)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr, force=True,
                        format="ts=%(asctime)s level=%(levelname)s cmd=" + args.command + " %(message)s")
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("segkit: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"segkit: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, CheckpointError, TrainingError, OSError, ValueError) as exc:
        log.error("event=failed error=%s", json.dumps(str(exc)))
        return 1


if __name__ == "__main__":
    sys.exit(main())
