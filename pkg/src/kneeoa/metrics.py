"""Confusion-matrix metrics: accuracy, per-class F1, multi-run aggregation.

F1 uses the total zero convention: any division by zero (no predictions, no
instances, or P+R=0) yields 0, which keeps the 5-vector schema total for
minority classes. Aggregation uses the sample standard deviation (n-1),
with n=1 reported as 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

NUM_CLASSES = 5


def confusion(
    preds: Sequence[int], labels: Sequence[int], num_classes: int = NUM_CLASSES
) -> np.ndarray:
    """Counts[t][p] over (label t, prediction p) pairs."""
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(labels)} labels")
    if len(preds) == 0:
        raise ValueError("empty input")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(labels, preds):
        cm[t, p] += 1
    return cm


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm) / total)


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    """One-vs-rest F1 per class; undefined cases yield 0."""
    n = cm.shape[0]
    f1 = np.zeros(n, dtype=np.float64)
    for c in range(n):
        tp = cm[c, c]
        col = cm[:, c].sum()
        row = cm[c, :].sum()
        if col == 0 or row == 0:
            continue
        precision = tp / col
        recall = tp / row
        if precision + recall == 0:
            continue
        f1[c] = 2 * precision * recall / (precision + recall)
    return f1


@dataclass
class RunResult:
    confusion: np.ndarray
    accuracy: float
    f1_per_class: np.ndarray

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "RunResult":
        return cls(confusion=cm, accuracy=accuracy(cm), f1_per_class=per_class_f1(cm))

    @classmethod
    def from_predictions(
        cls, preds: Sequence[int], labels: Sequence[int]
    ) -> "RunResult":
        return cls.from_confusion(confusion(preds, labels))

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1": [float(x) for x in self.f1_per_class],
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            accuracy=float(d["accuracy"]),
            f1_per_class=np.asarray(d["f1"], dtype=np.float64),
        )


@dataclass
class AggregateResult:
    mean_accuracy: float
    std_accuracy: float
    mean_f1: np.ndarray
    std_f1: np.ndarray
    n_runs: int

    def to_dict(self) -> dict:
        return {
            "n_runs": self.n_runs,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "mean_f1": [float(x) for x in self.mean_f1],
            "std_f1": [float(x) for x in self.std_f1],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AggregateResult":
        return cls(
            mean_accuracy=float(d["mean_accuracy"]),
            std_accuracy=float(d["std_accuracy"]),
            mean_f1=np.asarray(d["mean_f1"], dtype=np.float64),
            std_f1=np.asarray(d["std_f1"], dtype=np.float64),
            n_runs=int(d["n_runs"]),
        )


def _sample_std(values: np.ndarray, axis: int = 0) -> np.ndarray:
    if values.shape[axis] < 2:
        return np.zeros(values.sum(axis=axis).shape)
    std = values.std(axis=axis, ddof=1)
    # identical inputs must report exactly 0, not mean-subtraction noise
    constant = values.max(axis=axis) == values.min(axis=axis)
    return np.where(constant, 0.0, std)


def aggregate(results: Sequence[RunResult]) -> AggregateResult:
    """Elementwise mean and sample std across runs."""
    if not results:
        raise ValueError("aggregate requires at least one RunResult")
    accs = np.array([r.accuracy for r in results], dtype=np.float64)
    f1s = np.stack([np.asarray(r.f1_per_class, dtype=np.float64) for r in results])
    return AggregateResult(
        mean_accuracy=float(accs.mean()),
        std_accuracy=float(_sample_std(accs)),
        mean_f1=f1s.mean(axis=0),
        std_f1=_sample_std(f1s),
        n_runs=len(results),
    )


def write_json(obj: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def format_mean_std(mean: float, std: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def render_table(rows: list[dict], header: list[str]) -> str:
    """Plain text table; rows are dicts keyed by header entries."""
    cells = [header] + [[str(r.get(h, "")) for h in header] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
