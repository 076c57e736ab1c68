"""Confusion matrix and OA / AA / Kappa."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


@dataclass
class ConfusionMatrix:
    """``counts[i, j]`` = samples of true class i predicted as class j (0-based)."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix counts must be non-negative")

    @classmethod
    def from_pairs(cls, truth, pred, num_classes: int) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (truth, pred), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_recall(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / np.maximum(rows, 1), np.nan)


class Scores(NamedTuple):
    oa: float
    aa: float
    kappa: float


def metrics(cm: ConfusionMatrix) -> Scores:
    """Overall accuracy, average per-class recall and Cohen's kappa.

    AA averages only over classes present in the truth. Kappa is defined as 1
    for the degenerate perfect single-class case where chance agreement is 1.
    """
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise ValueError("metrics need a non-empty confusion matrix")
    p_o = np.trace(c) / total
    rows, cols = c.sum(axis=1), c.sum(axis=0)
    present = rows > 0
    aa = float(np.mean(np.diag(c)[present] / rows[present]))
    p_e = float((rows * cols).sum() / (total * total))
    if p_e == 1.0:
        kappa = 1.0 if p_o == 1.0 else 0.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    return Scores(float(p_o), aa, float(kappa))
