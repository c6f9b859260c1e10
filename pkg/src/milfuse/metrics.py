"""Accuracy, confusion matrices and rank-based one-vs-rest AUC."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, UndefinedAUCError

log = logging.getLogger(__name__)


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ContractError(f"need equal-length non-empty inputs, got {preds.shape} and {labels.shape}")
    return float(np.mean(preds == labels))


def predict(scores) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(scores), axis=1)


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Counts with true class on rows and predicted class on columns."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC; tied pos/neg pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_macro_ovr(scores, labels) -> tuple[float, np.ndarray]:
    """Macro one-vs-rest AUC over the classes present in ``labels``.

    Absent classes get NaN in the per-class vector and are left out of the mean.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0] or scores.shape[0] < 2:
        raise ContractError(f"need an M x N score matrix with M >= 2 matching labels, got {scores.shape}")
    if np.unique(labels).size < 2:
        raise UndefinedAUCError("AUC is undefined when only one class is present")
    per_class = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        pos = labels == c
        if not pos.any():
            log.warning("class %d absent from labels; skipped in macro AUC", c)
            continue
        per_class[c] = binary_auc(scores[:, c], pos)
    return float(np.nanmean(per_class)), per_class


@dataclass
class MetricsReport:
    acc: float
    auc_macro: float
    per_class_auc: np.ndarray
    confusion: np.ndarray
    fold_id: int = 0
    model: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def evaluate_scores(scores, labels, num_classes: int, fold_id: int = 0, model: str = "") -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    preds = predict(scores)
    cm = confusion_matrix(preds, labels, num_classes)
    try:
        auc, per_class = auc_macro_ovr(scores, labels)
    except UndefinedAUCError:
        auc, per_class = float("nan"), np.full(num_classes, np.nan)
    return MetricsReport(float(np.trace(cm)) / cm.sum(), auc, per_class, cm, fold_id, model)
