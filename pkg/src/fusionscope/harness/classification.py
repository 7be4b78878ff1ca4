"""Binary classification metrics, ROC/AUC and fold aggregation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

METRICS = ("accuracy", "specificity", "sensitivity", "f1", "auc",
           "weighted_specificity", "weighted_sensitivity", "weighted_f1")


@dataclass
class ClassificationReport:
    accuracy: float
    specificity: float
    sensitivity: float
    f1: float
    auc: float
    confusion: list  # [[TN, FP], [FN, TP]]
    roc_points: list = field(default_factory=list)
    # support-weighted averages over both classes taken as "positive"
    weighted_specificity: float = float("nan")
    weighted_sensitivity: float = float("nan")
    weighted_f1: float = float("nan")

    @property
    def n(self) -> int:
        return int(np.sum(self.confusion))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassificationReport":
        d = dict(d)
        d["roc_points"] = [tuple(p) for p in d.get("roc_points", [])]
        return cls(**d)


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """ROC points from (0, 0) to (1, 1), one per distinct score threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC/AUC undefined: labels contain a single class")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # cut after the last index of each distinct score
    cuts = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y == 1)[cuts]
    fp = np.cumsum(y == 0)[cuts]
    points = [(0.0, 0.0)] + [(float(f / n_neg), float(t / n_pos)) for f, t in zip(fp, tp)]
    return points


def auc_trapezoid(points: Sequence[tuple[float, float]]) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def auc_pairwise(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def _safe_div(a, b):
    return float(a / b) if b else 0.0


def classification_metrics(probs, labels, threshold: float = 0.5) -> ClassificationReport:
    """Metrics for class-1 probabilities ``probs``; class 1 is predicted when ``prob >= threshold``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim == 2:
        probs = probs[:, 1]
    if probs.shape != labels.shape:
        raise ValueError(f"{probs.shape[0]} probabilities for {labels.shape[0]} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(int)
    points = roc_curve(probs, labels)
    pred = (probs >= threshold).astype(int)
    tp = int(((pred == 1) & (labels == 1)).sum())
    tn = int(((pred == 0) & (labels == 0)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    n = len(labels)
    sens = _safe_div(tp, tp + fn)
    spec = _safe_div(tn, tn + fp)
    f1_pos = _safe_div(2 * tp, 2 * tp + fp + fn)
    f1_neg = _safe_div(2 * tn, 2 * tn + fn + fp)
    w1, w0 = (tp + fn) / n, (tn + fp) / n
    return ClassificationReport(
        accuracy=(tp + tn) / n,
        specificity=spec,
        sensitivity=sens,
        f1=f1_pos,
        auc=auc_trapezoid(points),
        confusion=[[tn, fp], [fn, tp]],
        roc_points=points,
        # with class 0 as positive, its sensitivity is ``spec`` and its specificity is ``sens``
        weighted_specificity=w1 * spec + w0 * sens,
        weighted_sensitivity=w1 * sens + w0 * spec,
        weighted_f1=w1 * f1_pos + w0 * f1_neg,
    )


def aggregate_folds(reports: Sequence[ClassificationReport]) -> dict[str, tuple[float, float]]:
    """``{metric: (mean, sample std)}`` over folds."""
    if len(reports) < 2:
        raise ValueError("aggregation needs at least 2 fold reports")
    out = {}
    for m in METRICS:
        vals = np.array([getattr(r, m) for r in reports], dtype=np.float64)
        out[m] = (float(vals.mean()), float(vals.std(ddof=1)))
    return out
