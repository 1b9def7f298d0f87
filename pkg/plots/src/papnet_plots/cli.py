"""plots <input_dir> --out <dir> --format png|svg [--dpi N]

The input is either a single-mode crossval directory (holding report.json,
epochs.csv, confusion_pooled.csv) or a crossval root whose raw/ and
segmented/ subdirectories hold them; a comparison.csv at the root adds the
metric-comparison chart.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from .render import plot_comparison, plot_confusion, plot_training_curves, save_figure

REQUIRED = ("report.json", "epochs.csv", "confusion_pooled.csv")


@dataclass(frozen=True)
class PlotJob:
    input_dir: Path
    out_dir: Path
    fmt: str
    dpi: int


def _check_mode_dir(mode_dir: Path) -> None:
    missing = [name for name in REQUIRED if not (mode_dir / name).is_file()]
    if missing:
        raise FileNotFoundError(f"{mode_dir} is missing {', '.join(missing)}")


def discover_mode_dirs(input_dir: Path) -> dict[str, Path]:
    """Map mode name -> directory holding the required report files."""
    if not input_dir.is_dir():
        raise FileNotFoundError(f"input directory {input_dir} does not exist")
    if (input_dir / "report.json").is_file():
        _check_mode_dir(input_dir)
        mode = json.loads((input_dir / "report.json").read_text()).get("mode", input_dir.name)
        return {mode: input_dir}
    modes = {}
    for name in ("raw", "segmented"):
        cand = input_dir / name
        if cand.is_dir():
            _check_mode_dir(cand)
            modes[name] = cand
    if not modes:
        raise FileNotFoundError(
            f"{input_dir} holds neither report.json nor raw/ or segmented/ subdirectories")
    return modes


def read_csv_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_job(job: PlotJob) -> list[Path]:
    modes = discover_mode_dirs(job.input_dir)
    job.out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    for mode, mode_dir in sorted(modes.items()):
        report = json.loads((mode_dir / "report.json").read_text())
        fig = plot_confusion(report["pooled"]["confusion"], mode)
        path = job.out_dir / f"confusion_{mode}.{job.fmt}"
        save_figure(fig, path, job.fmt, job.dpi)
        written.append(path)

        epoch_rows = read_csv_rows(mode_dir / "epochs.csv")
        if epoch_rows:
            fig = plot_training_curves(epoch_rows, mode)
            path = job.out_dir / f"training_curves_{mode}.{job.fmt}"
            save_figure(fig, path, job.fmt, job.dpi)
            written.append(path)

    comparison = job.input_dir / "comparison.csv"
    if comparison.is_file():
        fig = plot_comparison(read_csv_rows(comparison))
        path = job.out_dir / f"comparison.{job.fmt}"
        save_figure(fig, path, job.fmt, job.dpi)
        written.append(path)
    return written


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plots",
                                     description="Render figures from a crossval output directory")
    parser.add_argument("input_dir", type=Path)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--format", choices=["png", "svg"], default="png")
    parser.add_argument("--dpi", type=int, default=150)
    args = parser.parse_args(argv)
    job = PlotJob(input_dir=args.input_dir, out_dir=args.out, fmt=args.format, dpi=args.dpi)
    try:
        written = render_job(job)
    except (FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
