"""Confusion matrix, accuracy, per-class and macro F1, CSV emission."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class ConfusionMatrix:
    """K x K count matrix; rows are truth, columns are prediction."""

    def __init__(self, class_names: list[str]):
        if not class_names:
            raise ContractError("confusion matrix needs at least one class")
        self.class_names = list(class_names)
        k = len(class_names)
        self.counts = np.zeros((k, k), dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, truth: int, pred: int) -> None:
        k = self.num_classes
        if not (0 <= truth < k and 0 <= pred < k):
            raise IndexError(f"labels ({truth},{pred}) outside [0,{k})")
        self.counts[truth, pred] += 1

    def update_batch(self, truth: np.ndarray, pred: np.ndarray) -> None:
        truth = np.asarray(truth)
        pred = np.asarray(pred)
        k = self.num_classes
        if truth.shape != pred.shape:
            raise ContractError("truth and pred must have matching shapes")
        if truth.size and (
            truth.min() < 0 or truth.max() >= k or pred.min() < 0 or pred.max() >= k
        ):
            raise IndexError(f"labels outside [0,{k})")
        np.add.at(self.counts, (truth, pred), 1)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_names != self.class_names:
            raise ContractError("cannot merge matrices over different class lists")
        out = ConfusionMatrix(self.class_names)
        out.counts = self.counts + other.counts
        return out


def cm_scores(cm: ConfusionMatrix) -> dict:
    """Accuracy, per-class F1, macro F1, and row-normalized rates.

    Precision/recall use the 0/0 -> 0 convention. Classes with zero
    support in both truth and prediction are left out of the macro
    average; a class present in the truth but never predicted counts as
    F1 = 0 and stays in.
    """
    total = cm.total
    if total < 1:
        raise ContractError("cannot score an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    truth_support = counts.sum(axis=1)
    pred_support = counts.sum(axis=0)

    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_support > 0, tp / pred_support, 0.0)
        recall = np.where(truth_support > 0, tp / truth_support, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)

    present = (truth_support > 0) | (pred_support > 0)
    macro_f1 = float(f1[present].mean()) if present.any() else 0.0

    row_normalized = np.zeros_like(counts)
    nz = truth_support > 0
    row_normalized[nz] = counts[nz] / truth_support[nz, None]

    return {
        "accuracy": float(tp.sum() / total),
        "per_class_f1": {name: float(v) for name, v in zip(cm.class_names, f1)},
        "macro_f1": macro_f1,
        "present": {name: bool(p) for name, p in zip(cm.class_names, present)},
        "row_normalized": row_normalized,
    }


def cm_to_csv(cm: ConfusionMatrix, path) -> None:
    """Counts with a header of class names, then accuracy/F1 footer rows."""
    scores = cm_scores(cm)
    lines = ["truth\\pred," + ",".join(cm.class_names)]
    for name, row in zip(cm.class_names, cm.counts):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    lines.append(f"accuracy,{scores['accuracy']:.6f}")
    for name in cm.class_names:
        lines.append(f"f1_{name},{scores['per_class_f1'][name]:.6f}")
    lines.append(f"macro_f1,{scores['macro_f1']:.6f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
