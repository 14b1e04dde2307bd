"""Weighted forensic scoring and report files.

The headline number weights the unaltered-subset accuracy at 0.7 and the
manipulated-subset accuracy at 0.3. Reports include the full class confusion
matrix and, when manipulation tags are present, a per-manipulation accuracy
breakdown.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InvalidConfig, MissingPrediction

W_UNALTERED = 0.7
W_MANIPULATED = 0.3


def weighted_score(acc_unaltered: float, acc_manipulated: float) -> float:
    return W_UNALTERED * acc_unaltered + W_MANIPULATED * acc_manipulated


@dataclass
class ScoreReport:
    acc_unaltered: float
    acc_manipulated: float
    weighted_score: float
    confusion: np.ndarray  # rows: truth, cols: prediction
    class_names: list[str]
    n_unaltered: int = 0
    n_manipulated: int = 0
    per_manip_accuracy: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        k = len(self.class_names)
        if k < 1:
            raise InvalidConfig("empty class set")
        if self.confusion.shape != (k, k):
            raise InvalidConfig(
                f"confusion must be {k}x{k}, got {self.confusion.shape}"
            )

    def to_json(self) -> dict:
        return {
            "acc_unaltered": self.acc_unaltered,
            "acc_manipulated": self.acc_manipulated,
            "weighted_score": self.weighted_score,
            "class_names": self.class_names,
            "confusion": self.confusion.tolist(),
            "n_unaltered": self.n_unaltered,
            "n_manipulated": self.n_manipulated,
            "per_manip_accuracy": self.per_manip_accuracy,
        }

    @classmethod
    def from_json(cls, record: dict) -> "ScoreReport":
        return cls(
            acc_unaltered=record["acc_unaltered"],
            acc_manipulated=record["acc_manipulated"],
            weighted_score=record["weighted_score"],
            confusion=np.asarray(record["confusion"], dtype=np.int64),
            class_names=list(record["class_names"]),
            n_unaltered=record.get("n_unaltered", 0),
            n_manipulated=record.get("n_manipulated", 0),
            per_manip_accuracy=record.get("per_manip_accuracy", {}),
        )


def score(predictions: dict, truth_rows, num_classes: int,
          class_names: list[str] | None = None) -> ScoreReport:
    """Compare per-image predictions against the truth manifest.

    `predictions` maps source_id to a predicted class label; every truth row
    must be covered.
    """
    truth_rows = list(truth_rows)
    if class_names is None:
        class_names = [str(i) for i in range(num_classes)]
    if len(class_names) != num_classes:
        raise InvalidConfig("class_names length must equal num_classes")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    subset_hits = {"unaltered": 0, "manipulated": 0}
    subset_total = {"unaltered": 0, "manipulated": 0}
    manip_hits: dict[str, int] = {}
    manip_total: dict[str, int] = {}
    for row in truth_rows:
        if row.source_id not in predictions:
            raise MissingPrediction(f"no prediction for {row.source_id!r}")
        pred = int(predictions[row.source_id])
        if not 0 <= pred < num_classes or not 0 <= row.label < num_classes:
            raise InvalidConfig(
                f"label out of range for {row.source_id!r}: truth {row.label}, pred {pred}"
            )
        confusion[row.label, pred] += 1
        hit = int(pred == row.label)
        tag = row.manipulation or "unaltered"
        subset = "unaltered" if tag == "unaltered" else "manipulated"
        subset_hits[subset] += hit
        subset_total[subset] += 1
        manip_hits[tag] = manip_hits.get(tag, 0) + hit
        manip_total[tag] = manip_total.get(tag, 0) + 1

    def ratio(h, t):
        return h / t if t else 0.0

    acc_u = ratio(subset_hits["unaltered"], subset_total["unaltered"])
    acc_m = ratio(subset_hits["manipulated"], subset_total["manipulated"])
    return ScoreReport(
        acc_unaltered=acc_u,
        acc_manipulated=acc_m,
        weighted_score=weighted_score(acc_u, acc_m),
        confusion=confusion,
        class_names=class_names,
        n_unaltered=subset_total["unaltered"],
        n_manipulated=subset_total["manipulated"],
        per_manip_accuracy={
            tag: ratio(manip_hits[tag], manip_total[tag]) for tag in sorted(manip_total)
        },
    )


def save_report_json(report: ScoreReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json(), indent=2) + "\n")
    return path


def load_report_json(path) -> ScoreReport:
    return ScoreReport.from_json(json.loads(Path(path).read_text()))


def write_report(report: ScoreReport, out_dir) -> tuple[Path, Path]:
    """CSV confusion matrix plus a human-readable summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "confusion.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["truth\\pred"] + report.class_names)
        for i, name in enumerate(report.class_names):
            writer.writerow([name] + report.confusion[i].tolist())

    lines = [
        "Evaluation summary",
        "==================",
        f"Unaltered accuracy   (weight {W_UNALTERED:.1f}): "
        f"{100 * report.acc_unaltered:6.2f}%  (n={report.n_unaltered})",
        f"Manipulated accuracy (weight {W_MANIPULATED:.1f}): "
        f"{100 * report.acc_manipulated:6.2f}%  (n={report.n_manipulated})",
        f"Weighted score: {100 * report.weighted_score:6.2f}%",
        "",
    ]
    if report.per_manip_accuracy:
        lines.append("Per-manipulation accuracy:")
        for tag, acc in report.per_manip_accuracy.items():
            lines.append(f"  {tag:12s} {100 * acc:6.2f}%")
        lines.append("")
    lines.append("Confusion matrix (rows: truth, cols: prediction):")
    header = " ".join(f"{name:>10s}" for name in report.class_names)
    lines.append(f"{'':12s}{header}")
    for i, name in enumerate(report.class_names):
        counts = " ".join(f"{int(v):>10d}" for v in report.confusion[i])
        lines.append(f"{name:12s}{counts}")
    txt_path = out_dir / "summary.txt"
    txt_path.write_text("\n".join(lines) + "\n")
    return csv_path, txt_path
