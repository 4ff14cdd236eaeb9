"""
Evaluation measures: MAE, ICC(3,1) and confusion matrices
"""
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from utils import setup_logging

logger = setup_logging(__name__)


class MetricError(ValueError):
    """Raised for mismatched, empty or out-of-range metric inputs"""


def _paired(pred: Sequence[float], truth: Sequence[float], minimum: int = 1):
    pred, truth = np.asarray(pred, dtype=float).ravel(), np.asarray(truth, dtype=float).ravel()
    if len(pred) != len(truth):
        raise MetricError(f"length mismatch: {len(pred)} predictions, {len(truth)} targets")
    if len(pred) < minimum:
        raise MetricError(f"need at least {minimum} pairs, got {len(pred)}")
    return pred, truth


def mae(pred: Sequence[float], truth: Sequence[float]) -> float:
    pred, truth = _paired(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def icc31(pred: Sequence[float], truth: Sequence[float]) -> Optional[float]:
    """
    Two-way mixed, single-measure, consistency ICC between two raters.

    Returns None when the between-target and residual mean squares both vanish
    (relative to the centred total sum of squares), e.g. when every rater is constant.
    """
    pred, truth = _paired(pred, truth, minimum=2)
    Y = np.column_stack([pred, truth])
    n, k = Y.shape
    grand = Y.mean()
    ss_rows = k * np.sum((Y.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((Y.mean(axis=0) - grand) ** 2)
    ss_total = np.sum((Y - grand) ** 2)
    bms = ss_rows / (n - 1)
    ems = max(ss_total - ss_rows - ss_cols, 0.0) / ((n - 1) * (k - 1))
    if ss_total == 0.0 or bms + ems <= 1e-12 * ss_total:
        logger.warning("ICC(3,1) undefined: no between-target or residual variance")
        return None
    return float((bms - ems) / (bms + (k - 1) * ems))


def confusion_matrix(pred: Sequence[int], truth: Sequence[int], n_labels: int) -> np.ndarray:
    """Entry (i, j) counts items with true label i predicted as j."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if len(pred) != len(truth):
        raise MetricError(f"length mismatch: {len(pred)} predictions, {len(truth)} targets")
    for name, labels in (('prediction', pred), ('truth', truth)):
        if labels.size and (labels.min() < 0 or labels.max() >= n_labels or np.any(labels != np.round(labels))):
            raise MetricError(f"{name} label outside [0, {n_labels - 1}]")
    counts = np.zeros((n_labels, n_labels), dtype=int)
    np.add.at(counts, (truth.astype(int), pred.astype(int)), 1)
    return counts


@dataclass
class EvalReport:
    mae: float
    icc31: Optional[float]
    confusion: np.ndarray
    n: int

    @property
    def icc_defined(self) -> bool:
        return self.icc31 is not None

    def to_dict(self) -> Dict[str, Any]:
        return {'mae': self.mae, 'icc31': self.icc31, 'icc_defined': self.icc_defined,
                'n': self.n, 'confusion': self.confusion.tolist()}


def evaluate(pred: Sequence[float], truth: Sequence[int], n_labels: int) -> EvalReport:
    """MAE and ICC on the raw predictions; the confusion matrix uses them rounded to the label grid."""
    pred_arr, truth_arr = _paired(pred, truth)
    labels = np.clip(np.floor(pred_arr + 0.5), 0, n_labels - 1).astype(int)
    icc = icc31(pred_arr, truth_arr) if len(pred_arr) >= 2 else None
    return EvalReport(mae=mae(pred_arr, truth_arr), icc31=icc,
                      confusion=confusion_matrix(labels, truth_arr.astype(int), n_labels), n=len(pred_arr))


def confusion_to_frame(confusion: np.ndarray) -> pd.DataFrame:
    labels = range(confusion.shape[0])
    return pd.DataFrame(confusion, index=pd.Index(labels, name='truth'),
                        columns=[f'pred_{j}' for j in labels])


def per_person_mae(pred: Sequence[float], truth: Sequence[float], person_ids: Sequence[str]) -> pd.DataFrame:
    """MAE per person, one row each, in order of first appearance."""
    pred_arr, truth_arr = _paired(pred, truth)
    if len(person_ids) != len(pred_arr):
        raise MetricError(f"{len(person_ids)} person ids for {len(pred_arr)} predictions")
    frame = pd.DataFrame({'person_id': list(person_ids), 'error': np.abs(pred_arr - truth_arr)})
    grouped = frame.groupby('person_id', sort=False)['error']
    return pd.DataFrame({'mae': grouped.mean(), 'n': grouped.size()}).reset_index()
