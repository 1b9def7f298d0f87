"""Command-line entry point: ingest, synth, crossval, cam, report.

Configs are single JSON files validated strictly (unknown keys are typos and
get rejected) and echoed into the output directory as config_used.json.
Exit codes: 0 ok, 2 usage/config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation
from .classifier import (ClassifierModel, CrossvalConfig, CrossvalResult, TrainConfig,
                         grad_cam, load_classifier, run_crossval, save_classifier)
from .data import (ABNORMAL, CLASS_ORDER, AugmentConfig, generate_synthetic,
                   ingest_herlev, load_tree, plan_stratified_kfold, write_manifest,
                   write_synthetic_tree)
from .imaging import RasterImage, apply_mask, decode_image, encode_png, mask_to_image, normalize01, resize_bilinear
from .unet import UNetTrainConfig, save_unet

DATA_ROOT_ENV = "PAPNET_DATA_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetSettings:
    base_width: int = 16
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    threshold: float = 0.5
    refine: bool = True
    blur_sigma: float | None = 1.0
    max_train_samples: int | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    k: int = 5
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    l2_lambda: float = 1e-4
    dropout_rate: float = 0.5
    mode: str = "raw"
    data_root: str | None = None
    out_dir: str = "crossval_out"
    input_size: int = 128
    workers: int | None = None
    cam_samples: int = 2
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    unet: UNetSettings = field(default_factory=UNetSettings)


def _reject_unknown(raw: dict, allowed, where: str) -> None:
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where}: {unknown}")


def _build(cls, raw: dict, where: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    _reject_unknown(raw, fields, where)
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where} config: {exc}") from exc


def parse_run_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    aug_raw = raw.pop("aug", {})
    unet_raw = raw.pop("unet", {})
    if not isinstance(aug_raw, dict) or not isinstance(unet_raw, dict):
        raise ConfigError("'aug' and 'unet' must be JSON objects")
    if "rotations" in aug_raw:
        aug_raw["rotations"] = tuple(aug_raw["rotations"])
    if "contrast_range" in aug_raw:
        aug_raw["contrast_range"] = tuple(aug_raw["contrast_range"])
    fields = {f.name for f in dataclasses.fields(RunConfig)} - {"aug", "unet"}
    _reject_unknown(raw, fields, "top level")
    cfg = RunConfig(aug=_build(AugmentConfig, aug_raw, "aug"),
                    unet=_build(UNetSettings, unet_raw, "unet"), **raw)
    _validate_run_config(cfg)
    return cfg


def _validate_run_config(cfg: RunConfig) -> None:
    checks = [
        (isinstance(cfg.seed, int) and abs(cfg.seed) < 2 ** 63, "seed must be a 64-bit int"),
        (isinstance(cfg.k, int) and cfg.k >= 2, "k must be an int >= 2"),
        (isinstance(cfg.epochs, int) and cfg.epochs >= 0, "epochs must be a non-negative int"),
        (isinstance(cfg.batch_size, int) and cfg.batch_size >= 1, "batch_size must be >= 1"),
        (cfg.learning_rate > 0, "learning_rate must be positive"),
        (cfg.l2_lambda >= 0, "l2_lambda must be non-negative"),
        (0 <= cfg.dropout_rate < 1, "dropout_rate must be in [0, 1)"),
        (cfg.mode in ("raw", "segmented", "both"), "mode must be raw|segmented|both"),
        (cfg.input_size > 0 and cfg.input_size % 8 == 0, "input_size must be a positive multiple of 8"),
        (cfg.workers is None or (isinstance(cfg.workers, int) and cfg.workers >= 1),
         "workers must be a positive int or null"),
        (isinstance(cfg.cam_samples, int) and cfg.cam_samples >= 0,
         "cam_samples must be a non-negative int"),
        (cfg.unet.epochs >= 0 and cfg.unet.batch_size >= 1 and cfg.unet.learning_rate > 0,
         "unet epochs/batch_size/learning_rate out of range"),
        (0 < cfg.unet.threshold < 1, "unet.threshold must be in (0, 1)"),
        (cfg.unet.blur_sigma is None or cfg.unet.blur_sigma > 0,
         "unet.blur_sigma must be positive or null"),
        (cfg.unet.max_train_samples is None or cfg.unet.max_train_samples >= 1,
         "unet.max_train_samples must be a positive int or null"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["aug"]["rotations"] = list(cfg.aug.rotations)
    d["aug"]["contrast_range"] = list(cfg.aug.contrast_range)
    return d


def _sanitize(sample_id: str) -> str:
    return sample_id.replace("/", "__")


def _pct(v: float) -> str:
    return f"{evaluation.truncate_pct(v):.2f}%"


def _heatmap_csv(raw_map: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in raw_map:
        w.writerow([f"{v:.6f}" for v in row])
    return buf.getvalue()


def _write_heatmap(heat: np.ndarray, raw_map: np.ndarray, png_path: Path, csv_path: Path) -> None:
    img = RasterImage(np.clip(np.rint(heat * 255.0), 0, 255).astype(np.uint8)[..., None])
    png_path.write_bytes(encode_png(img))
    csv_path.write_text(_heatmap_csv(raw_map))


def cmd_ingest(args) -> int:
    try:
        samples, manifest = ingest_herlev(args.data_root)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, out / "manifest.json")
    counts = manifest["counts_by_label"]
    print(f"{manifest['total']} samples ({counts['Normal']} Normal / {counts['Abnormal']} Abnormal)")
    for warning in manifest["warnings"]:
        print(f"warning: {warning}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        samples = generate_synthetic(args.n, args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = write_synthetic_tree(samples, args.out)
    counts = manifest["counts_by_label"]
    print(f"wrote {manifest['total']} synthetic samples to {args.out} "
          f"({counts['Normal']} Normal / {counts['Abnormal']} Abnormal)")
    return EXIT_OK


def _crossval_config(cfg: RunConfig) -> CrossvalConfig:
    workers = cfg.workers if cfg.workers is not None else min(cfg.k, os.cpu_count() or 1)
    return CrossvalConfig(
        seed=cfg.seed,
        input_size=cfg.input_size,
        dropout_rate=cfg.dropout_rate,
        train=TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                          learning_rate=cfg.learning_rate, l2_lambda=cfg.l2_lambda),
        aug=cfg.aug,
        unet_base_width=cfg.unet.base_width,
        unet_train=UNetTrainConfig(epochs=cfg.unet.epochs, batch_size=cfg.unet.batch_size,
                                   learning_rate=cfg.unet.learning_rate,
                                   input_size=cfg.input_size, blur_sigma=cfg.unet.blur_sigma,
                                   threshold=cfg.unet.threshold,
                                   max_train_samples=cfg.unet.max_train_samples),
        refine_masks=cfg.unet.refine,
        workers=workers,
    )


def _emit_mode_outputs(result: CrossvalResult, mode_dir: Path, samples_by_id: dict,
                       cfg: RunConfig, mode: str) -> None:
    evaluation.write_report_files(result.report, mode_dir)
    for art in result.folds:
        fold_dir = mode_dir / f"fold_{art.fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        save_classifier(art.model, fold_dir / "classifier.ckpt")
        if art.unet is not None:
            save_unet(art.unet, fold_dir / "unet.ckpt")
        (fold_dir / "epochs.csv").write_text(evaluation.epochs_csv_text(art.logs))
        if art.val_masks:
            mask_dir = fold_dir / "masks"
            mask_dir.mkdir(exist_ok=True)
            for sid, mask in sorted(art.val_masks.items()):
                (mask_dir / f"{_sanitize(sid)}.png").write_bytes(encode_png(mask_to_image(mask)))
        if cfg.cam_samples:
            cam_dir = fold_dir / "cam"
            cam_dir.mkdir(exist_ok=True)
            for pred in sorted(art.predictions, key=lambda p: p.sample_id)[:cfg.cam_samples]:
                sample = samples_by_id[pred.sample_id]
                img = resize_bilinear(sample.image, cfg.input_size, cfg.input_size)
                if mode == "segmented":
                    img = apply_mask(img, art.val_masks[pred.sample_id])
                x = normalize01(img)
                heat, raw_map = grad_cam(art.model, x, CLASS_ORDER.index(pred.predicted))
                stem = f"{_sanitize(pred.sample_id)}_{pred.predicted}"
                _write_heatmap(heat, raw_map, cam_dir / f"{stem}.png", cam_dir / f"{stem}.csv")


def cmd_crossval(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.mode is not None:
        raw["mode"] = args.mode
    if args.out is not None:
        raw["out_dir"] = args.out
    if args.data_root is not None:
        raw["data_root"] = args.data_root
    elif raw.get("data_root") is None and os.environ.get(DATA_ROOT_ENV):
        raw["data_root"] = os.environ[DATA_ROOT_ENV]
    try:
        cfg = parse_run_config(raw)
        if cfg.data_root is None:
            raise ConfigError(f"data_root missing (set it in the config, via --data-root, "
                              f"or export {DATA_ROOT_ENV})")
        if not Path(cfg.data_root).is_dir():
            raise ConfigError(f"data_root {cfg.data_root} is not a directory")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_used.json").write_text(json.dumps(config_to_dict(cfg), indent=2,
                                                     sort_keys=True) + "\n")
    status_path = out / "status.json"
    modes = ["raw", "segmented"] if cfg.mode == "both" else [cfg.mode]
    done: list[str] = []
    try:
        samples, _ = load_tree(cfg.data_root)
        plan = plan_stratified_kfold(samples, k=cfg.k, seed=cfg.seed)
        samples_by_id = {s.id: s for s in samples}
        ccfg = _crossval_config(cfg)
        reports = {}
        for mode in modes:
            result = run_crossval(samples, plan, mode, ccfg)
            _emit_mode_outputs(result, out / mode, samples_by_id, cfg, mode)
            reports[mode] = result.report
            m = result.report.pooled_metrics
            print(f"[{mode}] pooled accuracy {_pct(m.accuracy)}, "
                  f"precision {_pct(m.precision_weighted)}, "
                  f"recall {_pct(m.recall_weighted)}, f1 {_pct(m.f1_weighted)}")
            done.append(mode)
        if cfg.mode == "both":
            rows = evaluation.compare_runs(reports["raw"], reports["segmented"])
            (out / "comparison.csv").write_text(evaluation.comparison_csv_text(rows))
    except Exception as exc:  # noqa: BLE001 - report, flag partial outputs, exit 3
        status_path.write_text(json.dumps({
            "status": "failed", "error": str(exc), "completed_modes": done}, indent=2) + "\n")
        print(f"error: crossval failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    status_path.write_text(json.dumps({
        "status": "ok", "completed_modes": done}, indent=2) + "\n")
    return EXIT_OK


def cmd_cam(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        print(f"error: checkpoint {ckpt} not found", file=sys.stderr)
        return EXIT_CONFIG
    image_path = Path(args.image)
    if not image_path.is_file():
        print(f"error: image {image_path} not found", file=sys.stderr)
        return EXIT_CONFIG
    if args.target_class in CLASS_ORDER:
        target = CLASS_ORDER.index(args.target_class)
    else:
        print(f"error: target class must be one of {CLASS_ORDER}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        model = load_classifier(ckpt)
        img = decode_image(image_path.read_bytes())
        x = normalize01(resize_bilinear(img, model.input_size, model.input_size))
        heat, raw_map = grad_cam(model, x, target)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"{image_path.stem}_{args.target_class}"
        _write_heatmap(heat, raw_map, out / f"{stem}.png", out / f"{stem}.csv")
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {stem}.png and {stem}.csv to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.report)
    if not path.is_file():
        print(f"error: report {path} not found", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = evaluation.report_from_dict(json.loads(path.read_text()))
        evaluation.write_report_files(report, args.out)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: cannot re-render report: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"re-rendered CSVs into {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="papnet",
                                     description="Cell image segmentation + classification engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a Herlev tree and write its manifest")
    p.add_argument("--data-root", default=os.environ.get(DATA_ROOT_ENV), required=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic dataset tree")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("crossval", help="run k-fold training + evaluation from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=["raw", "segmented", "both"], default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--data-root", default=None)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("cam", help="emit a class activation heatmap for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--target-class", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("report", help="re-render CSVs from an existing report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "ingest" and not args.data_root:
        parser.error(f"--data-root required (or export {DATA_ROOT_ENV})")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
