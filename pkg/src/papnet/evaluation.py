"""Confusion matrices, support-weighted metrics, fold aggregation, and the
CSV/JSON files that form the contract with the plotting component.

Metric arithmetic runs on exact rationals internally, so the algebraic
identity weighted-recall == accuracy holds bit-for-bit, then converts to
floats for reporting. Percentages shown at two decimals are truncated, not
rounded, matching how the reference results were printed.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping

from .data import ABNORMAL, NORMAL

WEIGHTED_METRICS = ("accuracy", "precision_weighted", "recall_weighted", "f1_weighted")


@dataclass(frozen=True)
class ConfusionMatrix2:
    """2x2 counts with Abnormal as the positive class."""
    tp: int
    fn: int
    fp: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fn", "fp", "tn"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{name} must be a non-negative int, got {v!r}")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def __add__(self, other: "ConfusionMatrix2") -> "ConfusionMatrix2":
        return ConfusionMatrix2(self.tp + other.tp, self.fn + other.fn,
                                self.fp + other.fp, self.tn + other.tn)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision_weighted: float
    recall_weighted: float
    f1_weighted: float
    per_class: dict[str, dict[str, float]]
    degenerate: bool = False  # some 0/0 cell was defined as 0


@dataclass(frozen=True)
class FoldResult:
    fold: int
    confusion: ConfusionMatrix2
    metrics: MetricsReport


@dataclass(frozen=True)
class RunReport:
    mode: str
    fold_plan_seed: int
    k: int
    folds: list[FoldResult]
    pooled_confusion: ConfusionMatrix2
    pooled_metrics: MetricsReport
    averaged_metrics: MetricsReport
    epoch_logs: list = field(default_factory=list)


def truncate_pct(value: float, digits: int = 2) -> float:
    """Percentage truncated to `digits` decimals (81.02508% -> 81.02)."""
    scale = 10 ** digits
    return float(int(value * 100 * scale)) / scale


def confusion(preds: Iterable, truths: Mapping[str, str]) -> ConfusionMatrix2:
    """Count (truth, predicted) pairs; order of predictions is irrelevant."""
    tp = fn = fp = tn = 0
    for p in preds:
        truth = truths[p.sample_id]
        predicted = p.predicted
        if truth == ABNORMAL:
            if predicted == ABNORMAL:
                tp += 1
            else:
                fn += 1
        else:
            if predicted == ABNORMAL:
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix2(tp=tp, fn=fn, fp=fp, tn=tn)


def _safe_div(num: int, den: int) -> tuple[Fraction, bool]:
    if den == 0:
        return Fraction(0), True
    return Fraction(num, den), False


def metrics_from_matrix(m: ConfusionMatrix2) -> MetricsReport:
    """Per-class precision/recall/F1 plus support-weighted averages.

    0/0 ratios are defined as 0 and flagged via ``degenerate``. Weighted
    averaging uses true-class supports, which makes weighted recall equal
    accuracy identically.
    """
    if m.total == 0:
        raise ValueError("cannot compute metrics of an empty confusion matrix")
    degenerate = False

    def f1_of(p: Fraction, r: Fraction) -> Fraction:
        nonlocal degenerate
        if p + r == 0:
            degenerate = True
            return Fraction(0)
        return 2 * p * r / (p + r)

    prec_ab, d1 = _safe_div(m.tp, m.tp + m.fp)
    rec_ab, d2 = _safe_div(m.tp, m.tp + m.fn)
    prec_no, d3 = _safe_div(m.tn, m.tn + m.fn)
    rec_no, d4 = _safe_div(m.tn, m.tn + m.fp)
    degenerate = d1 or d2 or d3 or d4
    f1_ab = f1_of(prec_ab, rec_ab)
    f1_no = f1_of(prec_no, rec_no)

    supp_ab = m.tp + m.fn
    supp_no = m.tn + m.fp
    total = Fraction(m.total)
    return MetricsReport(
        accuracy=float(Fraction(m.tp + m.tn, m.total)),
        precision_weighted=float((supp_ab * prec_ab + supp_no * prec_no) / total),
        recall_weighted=float((supp_ab * rec_ab + supp_no * rec_no) / total),
        f1_weighted=float((supp_ab * f1_ab + supp_no * f1_no) / total),
        per_class={
            ABNORMAL: {"precision": float(prec_ab), "recall": float(rec_ab), "f1": float(f1_ab)},
            NORMAL: {"precision": float(prec_no), "recall": float(rec_no), "f1": float(f1_no)},
        },
        degenerate=degenerate,
    )


def _mean_metrics(reports: list[MetricsReport]) -> MetricsReport:
    n = len(reports)
    per_class = {
        label: {key: sum(r.per_class[label][key] for r in reports) / n
                for key in ("precision", "recall", "f1")}
        for label in (ABNORMAL, NORMAL)
    }
    return MetricsReport(
        accuracy=sum(r.accuracy for r in reports) / n,
        precision_weighted=sum(r.precision_weighted for r in reports) / n,
        recall_weighted=sum(r.recall_weighted for r in reports) / n,
        f1_weighted=sum(r.f1_weighted for r in reports) / n,
        per_class=per_class,
        degenerate=any(r.degenerate for r in reports),
    )


def aggregate(folds: list[FoldResult], mode: str, fold_plan_seed: int, k: int,
              epoch_logs: list | None = None) -> RunReport:
    """Pooled (summed-matrix) and fold-averaged (unweighted mean) views."""
    if not folds:
        raise ValueError("cannot aggregate zero folds")
    pooled = folds[0].confusion
    for fr in folds[1:]:
        pooled = pooled + fr.confusion
    return RunReport(
        mode=mode,
        fold_plan_seed=fold_plan_seed,
        k=k,
        folds=sorted(folds, key=lambda fr: fr.fold),
        pooled_confusion=pooled,
        pooled_metrics=metrics_from_matrix(pooled),
        averaged_metrics=_mean_metrics([fr.metrics for fr in folds]),
        epoch_logs=list(epoch_logs or []),
    )


def compare_runs(raw: RunReport, seg: RunReport) -> list[dict]:
    """Segmented-minus-raw deltas in percentage points, per metric, for the
    pooled and fold-averaged variants."""
    rows = []
    for metric in WEIGHTED_METRICS:
        row = {"metric": metric}
        for variant, raw_m, seg_m in (("pooled", raw.pooled_metrics, seg.pooled_metrics),
                                      ("averaged", raw.averaged_metrics, seg.averaged_metrics)):
            rv = getattr(raw_m, metric)
            sv = getattr(seg_m, metric)
            row[f"raw_{variant}"] = rv
            row[f"segmented_{variant}"] = sv
            row[f"delta_{variant}_pp"] = (sv - rv) * 100.0
        rows.append(row)
    return rows


# --- serialization ----------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def report_to_dict(report: RunReport) -> dict:
    return {
        "mode": report.mode,
        "fold_plan_seed": report.fold_plan_seed,
        "k": report.k,
        "folds": [{
            "fold": fr.fold,
            "confusion": asdict(fr.confusion),
            "metrics": asdict(fr.metrics),
        } for fr in report.folds],
        "pooled": {
            "confusion": asdict(report.pooled_confusion),
            "metrics": asdict(report.pooled_metrics),
        },
        "averaged": {"metrics": asdict(report.averaged_metrics)},
        "epochs": [asdict(e) if not isinstance(e, dict) else e for e in report.epoch_logs],
    }


def report_from_dict(d: dict) -> RunReport:
    def metrics(md) -> MetricsReport:
        return MetricsReport(**md)

    folds = [FoldResult(fold=f["fold"], confusion=ConfusionMatrix2(**f["confusion"]),
                        metrics=metrics(f["metrics"])) for f in d["folds"]]
    return RunReport(
        mode=d["mode"], fold_plan_seed=d["fold_plan_seed"], k=d["k"], folds=folds,
        pooled_confusion=ConfusionMatrix2(**d["pooled"]["confusion"]),
        pooled_metrics=metrics(d["pooled"]["metrics"]),
        averaged_metrics=metrics(d["averaged"]["metrics"]),
        epoch_logs=d.get("epochs", []),
    )


def metrics_csv_text(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "metric", "value"])
    for variant, metrics in (("pooled", report.pooled_metrics),
                             ("averaged", report.averaged_metrics)):
        for metric in WEIGHTED_METRICS:
            w.writerow([variant, metric, _fmt(getattr(metrics, metric))])
    return buf.getvalue()


def epochs_csv_text(epoch_logs: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fold", "epoch", "train_loss", "train_acc", "val_acc"])
    for e in epoch_logs:
        d = asdict(e) if not isinstance(e, dict) else e
        w.writerow([d["fold"], d["epoch"], _fmt(d["train_loss"]),
                    _fmt(d["train_accuracy"]), _fmt(d["val_accuracy"])])
    return buf.getvalue()


def confusion_csv_text(m: ConfusionMatrix2) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["", f"pred_{NORMAL}", f"pred_{ABNORMAL}"])
    w.writerow([f"true_{NORMAL}", m.tn, m.fp])
    w.writerow([f"true_{ABNORMAL}", m.fn, m.tp])
    return buf.getvalue()


def comparison_csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["metric", "raw_pooled", "segmented_pooled", "delta_pooled_pp",
              "raw_averaged", "segmented_averaged", "delta_averaged_pp"]
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row[h]) for h in header])
    return buf.getvalue()


def write_report_files(report: RunReport, out_dir) -> None:
    """Emit report.json, metrics.csv, epochs.csv, confusion_pooled.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    (out / "metrics.csv").write_text(metrics_csv_text(report))
    (out / "epochs.csv").write_text(epochs_csv_text(report.epoch_logs))
    (out / "confusion_pooled.csv").write_text(confusion_csv_text(report.pooled_confusion))
