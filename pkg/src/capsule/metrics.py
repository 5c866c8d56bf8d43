"""Confusion matrices, support-weighted metrics and comparison tables."""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import _accel


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple[str, ...]
    counts: np.ndarray  # rows = true, columns = predicted

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        n = len(self.labels)
        if counts.shape != (n, n):
            raise ValueError(f"counts must be {n}x{n}, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(true_labels: Sequence[str], predicted_labels: Sequence[str], label_space: Sequence[str]) -> ConfusionMatrix:
    if len(true_labels) != len(predicted_labels):
        raise ValueError("true and predicted label sequences differ in length")
    if len(true_labels) == 0:
        raise ValueError("cannot build a confusion matrix from no samples")
    index = {name: i for i, name in enumerate(label_space)}
    try:
        t = np.fromiter((index[x] for x in true_labels), dtype=np.int64, count=len(true_labels))
        p = np.fromiter((index[x] for x in predicted_labels), dtype=np.int64, count=len(predicted_labels))
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} is not in the label space {list(label_space)}") from None
    return ConfusionMatrix(tuple(label_space), _accel.confusion_counts(t, p, len(index)))


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    per_class: dict[str, ClassMetrics]
    accuracy: float
    precision: float
    recall: float
    f1: float
    method_name: str = ""
    confusion: list[list[int]] = field(default_factory=list)

    @property
    def weighted(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}

    def to_dict(self) -> dict:
        return {
            "method_name": self.method_name,
            "weighted": self.weighted,
            "per_class": {c: vars(m) for c, m in self.per_class.items()},
            "confusion": self.confusion,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_markdown(self) -> str:
        lines = [f"### {self.method_name or 'Metrics'}", "", "| Class | Precision | Recall | F1 | Support |", "|---|---|---|---|---|"]
        for c, m in self.per_class.items():
            lines.append(f"| {c} | {m.precision:.3f} | {m.recall:.3f} | {m.f1:.3f} | {m.support} |")
        w = self.weighted
        lines.append(
            f"| **weighted** | {w['precision']:.3f} | {w['recall']:.3f} | {w['f1']:.3f} | {sum(m.support for m in self.per_class.values())} |"
        )
        lines += ["", f"Accuracy: {100 * self.accuracy:.2f}%", ""]
        return "\n".join(lines)


def _ratio(num, den) -> Fraction:
    return Fraction(num, den) if den > 0 else Fraction(0)


def weighted_report(cm: ConfusionMatrix, method_name: str = "") -> MetricsReport:
    """Per-class precision/recall/F1 and their support-weighted means.

    Empty denominators give 0. Everything is computed in exact rational
    arithmetic and rounded to float once, so accuracy (trace / total) and the
    weighted recall are the same number.
    """
    c = cm.counts
    total = int(c.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = [int(v) for v in np.diag(c)]
    predicted = [int(v) for v in c.sum(axis=0)]
    support = [int(v) for v in c.sum(axis=1)]
    exact = []
    for i in range(len(cm.labels)):
        p = _ratio(tp[i], predicted[i])
        r = _ratio(tp[i], support[i])
        f = 2 * p * r / (p + r) if p + r > 0 else Fraction(0)
        exact.append((p, r, f))

    def weighted(k: int) -> float:
        return float(sum(support[i] * exact[i][k] for i in range(len(exact))) / total)

    per_class = {
        name: ClassMetrics(float(p), float(r), float(f), support[i]) for i, (name, (p, r, f)) in enumerate(zip(cm.labels, exact))
    }
    return MetricsReport(
        per_class,
        accuracy=float(Fraction(sum(tp), total)),
        precision=weighted(0),
        recall=weighted(1),
        f1=weighted(2),
        method_name=method_name,
        confusion=c.tolist(),
    )


# ----------------------------------------------------------------------------
# comparison table


@dataclass(frozen=True)
class ReportedRow:
    """A published result kept at its published precision."""

    method: str
    accuracy_pct: float
    precision: float
    recall: float
    f1: float
    acc_digits: int
    digits: int

    def cells(self) -> list[str]:
        d = self.digits
        return [
            f"{self.method} *",
            f"{self.accuracy_pct:.{self.acc_digits}f}%",
            f"{self.precision:.{d}f}",
            f"{self.recall:.{d}f}",
            f"{self.f1:.{d}f}",
        ]


# Published validation-set results (weighted averages), reported rather than reproduced.
REFERENCE_BASELINES = (
    ReportedRow("ResNet50 (baseline)", 76, 0.78, 0.76, 0.76, 0, 2),
    ReportedRow("SVM (baseline)", 82, 0.81, 0.82, 0.78, 0, 2),
)
REFERENCE_ROWS = REFERENCE_BASELINES + (
    ReportedRow("ResNet50 (curriculum)", 89.57, 0.893, 0.895, 0.894, 2, 3),
    ReportedRow("ViT-CNN Hybrid (curriculum)", 89.79, 0.909, 0.897, 0.902, 2, 3),
)

COLUMNS = ("Method", "Avg ACC", "Avg Precision", "Avg Recall", "Avg F1")


def _report_cells(r: MetricsReport) -> list[str]:
    return [r.method_name or "model", f"{100 * r.accuracy:.2f}%", f"{r.precision:.3f}", f"{r.recall:.3f}", f"{r.f1:.3f}"]


def render_comparison(
    reports: Sequence[MetricsReport], baselines: Sequence[ReportedRow] = REFERENCE_BASELINES, fmt: str = "markdown"
) -> str:
    rows = [_report_cells(r) for r in reports] + [b.cells() for b in baselines]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown table format {fmt!r}")
    lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    if baselines:
        lines += ["", "\\* reported values on the challenge validation set, not reproduced here."]
    return "\n".join(lines) + "\n"
