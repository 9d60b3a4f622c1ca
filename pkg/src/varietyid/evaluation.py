"""Accuracy, per-class precision/recall/F1, macro-F1 and multi-run aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import EncoderParams, predict

SUMMARY_METRICS = ("accuracy", "macro_f1")


class EvaluationError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are true regions, columns predicted regions, both in ``regions`` order."""

    counts: np.ndarray
    regions: list[str]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        r = len(self.regions)
        if self.counts.shape != (r, r):
            raise EvaluationError(f"confusion shape {self.counts.shape} does not match {r} regions")
        if np.any(self.counts < 0):
            raise EvaluationError("negative confusion counts")

    @classmethod
    def from_predictions(cls, y_true: Sequence[int], y_pred: Sequence[int], regions: Sequence[str]):
        r = len(regions)
        counts = np.zeros((r, r), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(counts, list(regions))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class EvalReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    confusion: ConfusionMatrix
    n_runs: int = 1
    std: dict[str, float] = field(default_factory=dict)

    @property
    def regions(self) -> list[str]:
        return self.confusion.regions

    def mean_std(self, metric: str) -> tuple[float, float]:
        return float(getattr(self, metric)), self.std.get(metric, 0.0)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 -> 0 for undefined precision, recall or F1.
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def report_from_confusion(cm: ConfusionMatrix) -> EvalReport:
    if cm.total == 0:
        raise EvaluationError("cannot evaluate an empty split")
    tp = np.diag(cm.counts).astype(np.float64)
    precision = _safe_div(tp, cm.counts.sum(axis=0))
    recall = _safe_div(tp, cm.counts.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return EvalReport(
        accuracy=float(tp.sum() / cm.total),
        precision=precision,
        recall=recall,
        f1=f1,
        macro_f1=float(f1.mean()),
        confusion=cm,
    )


def evaluate_predictions(y_true, y_pred, regions) -> EvalReport:
    return report_from_confusion(ConfusionMatrix.from_predictions(y_true, y_pred, regions))


def evaluate(params: EncoderParams, frames: Sequence[np.ndarray], labels: Sequence[int],
             regions: Sequence[str]) -> EvalReport:
    """Classify each utterance by its arg-max logit (lowest index wins ties)."""
    if len(frames) == 0:
        raise EvaluationError("cannot evaluate an empty split")
    if params.dims[2] != len(regions):
        raise EvaluationError(f"model has {params.dims[2]} outputs but split has {len(regions)} regions")
    _, logits = predict(params, frames)
    return evaluate_predictions(labels, np.argmax(logits, axis=1), regions)


def aggregate(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean and population standard deviation over runs; confusion matrices are summed."""
    if not reports:
        raise EvaluationError("nothing to aggregate")
    regions = reports[0].regions
    for r in reports[1:]:
        if r.regions != regions:
            raise EvaluationError("reports cover different region sets")
    stack = lambda attr: np.array([getattr(r, attr) for r in reports], dtype=np.float64)
    counts = sum(r.confusion.counts for r in reports)
    std = {m: float(stack(m).std(ddof=0)) for m in SUMMARY_METRICS}
    return EvalReport(
        accuracy=float(stack("accuracy").mean()),
        precision=stack("precision").mean(axis=0),
        recall=stack("recall").mean(axis=0),
        f1=stack("f1").mean(axis=0),
        macro_f1=float(stack("macro_f1").mean()),
        confusion=ConfusionMatrix(counts, list(regions)),
        n_runs=len(reports),
        std=std,
    )


def format_pm(mean: float, std: float) -> str:
    """Percent mean and std as ``60.18±0.55``."""
    return f"{100 * mean:.2f}±{100 * std:.2f}"


def write_report_tsv(report: EvalReport, path: str | Path) -> None:
    lines = [
        f"# n_runs={report.n_runs}\tstd=population (ddof=0)",
        "metric\tmean\tstd",
    ]
    for metric in SUMMARY_METRICS:
        mean, std = report.mean_std(metric)
        lines.append(f"{metric}\t{mean:.6f}\t{std:.6f}")
    for region, f in zip(report.regions, report.f1):
        lines.append(f"f1_{region}\t{f:.6f}\t")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report_tsv(path: str | Path) -> dict[str, tuple[float, float]]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#") or line.startswith("metric\t"):
            continue
        name, mean, std = line.split("\t")
        out[name] = (float(mean), float(std) if std else 0.0)
    return out


def write_confusion_tsv(cm: ConfusionMatrix, path: str | Path) -> None:
    lines = ["true\\pred\t" + "\t".join(cm.regions)]
    for region, row in zip(cm.regions, cm.counts):
        lines.append(region + "\t" + "\t".join(str(int(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_confusion_tsv(path: str | Path) -> ConfusionMatrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    regions = lines[0].split("\t")[1:]
    counts = [[int(v) for v in line.split("\t")[1:]] for line in lines[1:] if line]
    return ConfusionMatrix(np.array(counts, dtype=np.int64).reshape(len(regions), len(regions)), regions)
