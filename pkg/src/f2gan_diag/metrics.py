"""Detection and classification metrics: confusion counts, P/R/F1, ROC/AUC, score summaries, KL."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)


def confusion(preds, truths, n_classes: int | None = None) -> np.ndarray:
    """Counts with rows = truth, columns = prediction.

    Boolean inputs give the 2x2 detection matrix where index 1 is the
    positive class (internal fault).
    """
    preds = np.asarray(preds)
    truths = np.asarray(truths)
    if preds.shape != truths.shape:
        raise ValueError(f"{preds.size} predictions vs {truths.size} truths")
    if preds.size == 0:
        raise ValueError("empty input")
    preds = preds.astype(np.int64)
    truths = truths.astype(np.int64)
    if n_classes is None:
        n_classes = int(max(preds.max(), truths.max())) + 1
    if preds.min() < 0 or truths.min() < 0 or max(preds.max(), truths.max()) >= n_classes:
        raise ValueError(f"labels outside 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truths, preds), 1)
    return cm


class Scores(NamedTuple):
    accuracy: float
    precision: float
    recall: float
    f1: float
    zero_division: bool = False


def _f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def prf1(cm, averaging: str = "binary") -> Scores:
    """Accuracy with precision/recall/F1 on the positive class or macro-averaged.

    Classes with a zero denominator contribute 0 and set ``zero_division``.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    acc = float(np.trace(cm) / total)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0).astype(np.float64)
    true_pos = cm.sum(axis=1).astype(np.float64)
    zero = False
    if averaging == "binary":
        if cm.shape != (2, 2):
            raise ValueError("binary averaging needs a 2x2 matrix")
        zero = pred_pos[1] == 0 or true_pos[1] == 0
        p = tp[1] / pred_pos[1] if pred_pos[1] else 0.0
        r = tp[1] / true_pos[1] if true_pos[1] else 0.0
        f = _f1(p, r)
    elif averaging == "macro":
        zero = bool(np.any(pred_pos == 0) or np.any(true_pos == 0))
        with np.errstate(invalid="ignore", divide="ignore"):
            ps = np.where(pred_pos > 0, tp / pred_pos, 0.0)
            rs = np.where(true_pos > 0, tp / true_pos, 0.0)
        p, r = float(ps.mean()), float(rs.mean())
        f = float(np.mean([_f1(a, b) for a, b in zip(ps, rs)]))
    else:
        raise ValueError(f"averaging must be 'binary' or 'macro', got {averaging!r}")
    if zero:
        log.warning("zero denominator in precision/recall; affected classes scored 0")
    return Scores(acc, float(p), float(r), float(f), bool(zero))


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def roc_auc(scores, truths) -> RocCurve:
    """ROC over every distinct score (tied scores move as one step), trapezoid AUC."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(truths).astype(bool).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and truths differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    tpr = np.r_[0, tp] / n_pos
    fpr = np.r_[0, fp] / n_neg
    thresholds = np.r_[np.inf, s[last_of_group]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc)


@dataclass
class ScoreStats:
    group: str
    mean: float
    std: float
    count: int


def score_stats(scores, group: str) -> ScoreStats:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError(f"no scores for group {group!r}")
    return ScoreStats(group, float(s.mean()), float(s.std()), int(s.size))


def kl_divergence(p_scores, q_scores, bins: int = 50, smoothing: float = 1e-6) -> float:
    """KL(P || Q) between score histograms on a shared [0, 1] grid.

    Every bin gets ``smoothing`` extra probability before renormalizing so
    empty bins never produce infinities.
    """
    p_scores = np.asarray(p_scores, dtype=np.float64).reshape(-1)
    q_scores = np.asarray(q_scores, dtype=np.float64).reshape(-1)
    if p_scores.size == 0 or q_scores.size == 0:
        raise ValueError("KL needs two nonempty samples")
    hp, _ = np.histogram(np.clip(p_scores, 0, 1), bins=bins, range=(0.0, 1.0))
    hq, _ = np.histogram(np.clip(q_scores, 0, 1), bins=bins, range=(0.0, 1.0))
    p = hp / hp.sum() + smoothing
    q = hq / hq.sum() + smoothing
    p /= p.sum()
    q /= q.sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


@dataclass
class DetectionReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    fault_mean: float
    fault_std: float
    fdi_mean: float
    fdi_std: float
    kl_divergence: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def detection_report(scores, is_fault, threshold: float = 0.5, bins: int = 50,
                     smoothing: float = 1e-6) -> DetectionReport:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(is_fault).astype(bool)
    sc = prf1(confusion(s > threshold, y, 2), "binary")
    fault, fdi = score_stats(s[y], "fault"), score_stats(s[~y], "fdi")
    return DetectionReport(sc.accuracy, sc.precision, sc.recall, sc.f1, roc_auc(s, y).auc,
                           fault.mean, fault.std, fdi.mean, fdi.std,
                           kl_divergence(s[y], s[~y], bins, smoothing))


@dataclass
class EvaluationReport:
    detection: dict[str, DetectionReport]
    classification: dict[str, Scores]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "detection": {k: v.as_dict() for k, v in self.detection.items()},
            "classification": {k: {"accuracy": v.accuracy, "precision": v.precision,
                                   "recall": v.recall, "f1": v.f1}
                               for k, v in self.classification.items()},
            "meta": self.meta,
        }
