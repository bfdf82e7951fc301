"""Evaluation statistics for binary screening predictions.

Conventions: a case is called positive when ``score >= threshold``; AUC gives
half credit to tied positive/negative pairs; AUPRC is the step-wise sum
``sum_k (R_k - R_{k-1}) * P_k`` without interpolation; log-loss clips scores to
``[eps, 1 - eps]`` with ``eps = 1e-15``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .errors import EmptyCounts, LengthMismatch, NoPositives, SingleClass, UndefinedMetric

LOG_LOSS_EPS = 1e-15
ACCURACY = "accuracy"
YOUDEN = "youden"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """Parallel arrays of case ids, scores in [0, 1], and 0/1 labels."""

    scores: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels).ravel()
        if scores.size != labels.size:
            raise LengthMismatch(f"{scores.size} scores but {labels.size} labels")
        if scores.size < 1:
            raise ValueError("a prediction set needs at least one case")
        if not np.all(np.isfinite(scores)) or scores.min() < 0 or scores.max() > 1:
            raise ValueError("scores must be finite and within [0, 1]")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0 or 1")
        ids = tuple(str(i) for i in self.ids) if len(self.ids) else tuple(str(i) for i in range(scores.size))
        if len(ids) != scores.size:
            raise LengthMismatch(f"{len(ids)} ids for {scores.size} scores")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return self.scores.size

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())


def _as_preds(preds, labels=None) -> PredictionSet:
    if isinstance(preds, PredictionSet):
        return preds
    return PredictionSet(preds, labels)


def _require_both_classes(p: PredictionSet) -> None:
    if p.n_pos == 0 or p.n_neg == 0:
        raise SingleClass(f"need both classes, got {p.n_pos} positives and {p.n_neg} negatives")


# -- confusion-derived -----------------------------------------------------

def confusion(preds, threshold: float = 0.5, labels=None) -> ConfusionCounts:
    p = _as_preds(preds, labels)
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    called = p.scores >= threshold
    truth = p.labels == 1
    return ConfusionCounts(
        tp=int(np.sum(called & truth)),
        tn=int(np.sum(~called & ~truth)),
        fp=int(np.sum(called & ~truth)),
        fn=int(np.sum(~called & truth)),
    )


def _ratio(num: int, den: int, name: str) -> float:
    if den == 0:
        raise UndefinedMetric(f"{name} is undefined (zero denominator)")
    return num / den


def accuracy(c: ConfusionCounts) -> float:
    if c.n == 0:
        raise EmptyCounts("accuracy of an empty confusion table")
    return (c.tp + c.tn) / c.n


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, "sensitivity")


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp, "specificity")


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, "precision")


def f1(c: ConfusionCounts) -> float:
    """Harmonic mean of precision and sensitivity."""
    prec = precision(c)
    sen = sensitivity(c)
    if prec + sen == 0:
        raise UndefinedMetric("f1 is undefined when precision and sensitivity are both zero")
    return 2.0 * prec * sen / (prec + sen)


def log_loss(preds, labels=None, clip_eps: float = LOG_LOSS_EPS) -> float:
    """Mean negative log-likelihood with probabilities kept ``clip_eps`` away from 0 and 1."""
    p = _as_preds(preds, labels)
    # clip the probability of the observed class, so 1 - eps is never formed
    prob = np.where(p.labels == 1, p.scores, 1.0 - p.scores)
    return float(-np.mean(np.log(np.clip(prob, clip_eps, 1.0 - clip_eps))))


# -- curves ----------------------------------------------------------------

@dataclass(frozen=True)
class Curve:
    """Curve samples; ``thresholds[k]`` produced point ``(x[k], y[k])``."""

    thresholds: np.ndarray
    x: np.ndarray
    y: np.ndarray


def _cumulative_counts(p: PredictionSet):
    """True/false positive counts when calling every distinct score (descending) positive."""
    order = np.argsort(-p.scores, kind="mergesort")
    s = p.scores[order]
    y = p.labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = np.cumsum(1 - y)[last_of_group]
    return s[last_of_group], tps, fps


def roc_curve(preds, labels=None) -> Curve:
    """(fpr, tpr) at every distinct score, starting at (0, 0) and ending at (1, 1)."""
    p = _as_preds(preds, labels)
    _require_both_classes(p)
    thr, tps, fps = _cumulative_counts(p)
    fpr = np.r_[0.0, fps / p.n_neg]
    tpr = np.r_[0.0, tps / p.n_pos]
    return Curve(np.r_[np.inf, thr], fpr, tpr)


def auc(preds, labels=None) -> float:
    """Trapezoidal area under the ROC curve (equals the tie-corrected Mann-Whitney statistic)."""
    p = _as_preds(preds, labels)
    _require_both_classes(p)
    _, tps, fps = _cumulative_counts(p)
    tp = np.r_[0, tps].astype(np.float64)
    fp = np.r_[0, fps].astype(np.float64)
    # integrate in counts, normalise once
    area = np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])) / 2.0
    return float(area / (p.n_pos * p.n_neg))


def pr_curve(preds, labels=None) -> Curve:
    """(recall, precision) at every distinct score, highest threshold first."""
    p = _as_preds(preds, labels)
    if p.n_pos == 0:
        raise NoPositives("precision-recall needs at least one positive")
    thr, tps, fps = _cumulative_counts(p)
    return Curve(thr, tps / p.n_pos, tps / (tps + fps))


def auprc(preds, labels=None) -> float:
    curve = pr_curve(preds, labels)
    recall_steps = np.diff(np.r_[0.0, curve.x])
    return float(np.sum(recall_steps * curve.y))


# -- DeLong ----------------------------------------------------------------

@dataclass(frozen=True)
class DelongResult:
    auc_a: float
    auc_b: float
    z: float
    p_value: float
    variance: float

    def __iter__(self):
        return iter((self.auc_a, self.auc_b, self.z, self.p_value))


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    n = x.size
    while i < n:
        j = i
        while j < n and xs[j] == xs[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def _placements(scores: np.ndarray, labels: np.ndarray):
    """Structural components: per-positive and per-negative placement values, via midranks."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    m, n = pos.size, neg.size
    r_all = _midranks(np.r_[pos, neg])
    r_pos = _midranks(pos)
    r_neg = _midranks(neg)
    v10 = (r_all[:m] - r_pos) / n
    v01 = 1.0 - (r_all[m:] - r_neg) / m
    return v10, v01


def delong_test(scores_a, scores_b, labels) -> DelongResult:
    """Compare two correlated AUCs measured on the same cases.

    Returns AUCs, the z statistic of ``auc_a - auc_b`` and its two-sided
    normal p-value. A zero variance with zero difference gives ``p = 1``.
    """
    a = np.asarray(scores_a, dtype=np.float64).ravel()
    b = np.asarray(scores_b, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if not (a.size == b.size == y.size):
        raise LengthMismatch(f"lengths differ: {a.size}, {b.size}, {y.size}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    m, n = int(np.sum(y == 1)), int(np.sum(y == 0))
    if m == 0 or n == 0:
        raise SingleClass(f"need both classes, got {m} positives and {n} negatives")
    v10_a, v01_a = _placements(a, y)
    v10_b, v01_b = _placements(b, y)
    auc_a, auc_b = float(v10_a.mean()), float(v10_b.mean())
    # variance of the difference straight from differenced components: exactly 0 for identical inputs
    d10 = v10_a - v10_b
    d01 = v01_a - v01_b
    var10 = float(np.var(d10, ddof=1)) if m > 1 else 0.0
    var01 = float(np.var(d01, ddof=1)) if n > 1 else 0.0
    var = var10 / m + var01 / n
    diff = float(d10.mean())
    if var <= 0.0:
        if diff == 0.0:
            return DelongResult(auc_a, auc_b, 0.0, 1.0, 0.0)
        return DelongResult(auc_a, auc_b, math.copysign(math.inf, diff), 0.0, 0.0)
    z = diff / math.sqrt(var)
    p = float(2.0 * norm.sf(abs(z)))
    return DelongResult(auc_a, auc_b, z, min(p, 1.0), var)


# -- threshold sweeps ------------------------------------------------------

@dataclass(frozen=True)
class SweepResult:
    threshold: float
    objective: str
    value: float
    counts: ConfusionCounts
    candidates: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    values: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))


def candidate_thresholds(preds, labels=None) -> np.ndarray:
    """0, 1, and the midpoints between consecutive distinct scores, ascending."""
    p = _as_preds(preds, labels)
    u = np.unique(p.scores)
    mids = (u[:-1] + u[1:]) / 2.0
    return np.unique(np.r_[0.0, mids, 1.0])


def objective_at(preds, threshold: float, objective: str = ACCURACY, labels=None) -> float:
    c = confusion(preds, threshold, labels)
    if objective == ACCURACY:
        return accuracy(c)
    if objective == YOUDEN:
        return sensitivity(c) + specificity(c)
    raise ValueError(f"unknown objective {objective!r}; use {ACCURACY!r} or {YOUDEN!r}")


def threshold_sweep(preds, objective: str = ACCURACY, labels=None) -> SweepResult:
    """Best threshold for accuracy or Youden (sensitivity + specificity).

    Ties go to the higher threshold.
    """
    p = _as_preds(preds, labels)
    _require_both_classes(p)
    cands = candidate_thresholds(p)
    values = np.array([objective_at(p, t, objective) for t in cands])
    # objective sums of ratios can differ by rounding only; treat those as ties
    best = np.flatnonzero(values >= values.max() - 1e-12)[-1]
    t = float(cands[best])
    return SweepResult(t, objective, float(values[best]), confusion(p, t), cands, values)


# -- reporting -------------------------------------------------------------

def _maybe(fn, *args) -> float:
    try:
        return fn(*args)
    except (UndefinedMetric, SingleClass, NoPositives, EmptyCounts):
        return math.nan


@dataclass(frozen=True)
class EvalReport:
    counts: ConfusionCounts
    threshold: float
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    log_loss: float
    auc: float
    auprc: float
    roc: Curve | None
    pr: Curve | None

    @classmethod
    def from_predictions(cls, preds, threshold: float = 0.5, labels=None) -> "EvalReport":
        p = _as_preds(preds, labels)
        c = confusion(p, threshold)
        both = p.n_pos > 0 and p.n_neg > 0
        return cls(
            counts=c,
            threshold=threshold,
            accuracy=accuracy(c),
            sensitivity=_maybe(sensitivity, c),
            specificity=_maybe(specificity, c),
            precision=_maybe(precision, c),
            f1=_maybe(f1, c),
            log_loss=log_loss(p),
            auc=auc(p) if both else math.nan,
            auprc=auprc(p) if p.n_pos else math.nan,
            roc=roc_curve(p) if both else None,
            pr=pr_curve(p) if p.n_pos else None,
        )

    def as_dict(self) -> dict[str, float]:
        c = self.counts
        return {
            "total": c.n,
            "positives": c.positives,
            "negatives": c.negatives,
            "tp": c.tp,
            "tn": c.tn,
            "fp": c.fp,
            "fn": c.fn,
            "threshold": self.threshold,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "precision": self.precision,
            "f1": self.f1,
            "log_loss": self.log_loss,
            "auc": self.auc,
            "auprc": self.auprc,
        }

    def to_text(self) -> str:
        """Flat ``name=value`` block, full precision."""
        return "".join(f"{k}={v!r}\n" for k, v in self.as_dict().items())

    def table(self) -> str:
        """Two-column summary, one metric per row."""
        c = self.counts
        rows = [
            ("Total", str(c.n)),
            ("# Positive", str(c.positives)),
            ("# Negative", str(c.negatives)),
            ("AUC", _fmt(self.auc)),
            ("AUPRC", _fmt(self.auprc)),
            ("Accuracy", _fmt(self.accuracy)),
            ("LogLoss", _fmt(self.log_loss)),
            ("f1-score", _fmt(self.f1)),
            ("Sensitivity", _fmt(self.sensitivity)),
            ("Specificity", _fmt(self.specificity)),
            ("# False Positives", str(c.fp)),
            ("# False Negatives", str(c.fn)),
        ]
        width = max(len(name) for name, _ in rows)
        return "".join(f"{name:<{width}}  {value}\n" for name, value in rows)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.3f}"


def write_curve_csv(path, curve: Curve, x_name: str, y_name: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", x_name, y_name])
        for t, x, y in zip(curve.thresholds, curve.x, curve.y):
            writer.writerow([repr(float(t)), repr(float(x)), repr(float(y))])


def write_predictions(path, preds: PredictionSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "score", "label"])
        for i, s, y in zip(preds.ids, preds.scores, preds.labels):
            writer.writerow([i, repr(float(s)), int(y)])


def read_predictions(path) -> PredictionSet:
    ids, scores, labels = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["id", "score", "label"]:
            raise ValueError(f"{path}: expected header id,score,label")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) < 3 or row[2].strip() == "":
                raise ValueError(f"{path}:{lineno}: row needs id, score and a 0/1 label")
            ids.append(row[0])
            scores.append(float(row[1]))
            labels.append(int(row[2]))
    return PredictionSet(np.array(scores), np.array(labels, dtype=np.int64), tuple(ids))


def align(a: PredictionSet, b: PredictionSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scores of ``a`` and ``b`` on their shared ids (in ``a``'s order) plus the labels."""
    index_b = {i: k for k, i in enumerate(b.ids)}
    if set(a.ids) != set(index_b):
        raise LengthMismatch("prediction files cover different case ids")
    order = np.array([index_b[i] for i in a.ids])
    if not np.array_equal(a.labels, b.labels[order]):
        raise ValueError("prediction files disagree on labels")
    return a.scores, b.scores[order], a.labels


__all__ = [
    "ACCURACY",
    "YOUDEN",
    "ConfusionCounts",
    "Curve",
    "DelongResult",
    "EvalReport",
    "PredictionSet",
    "SweepResult",
    "accuracy",
    "align",
    "auc",
    "auprc",
    "candidate_thresholds",
    "confusion",
    "delong_test",
    "f1",
    "log_loss",
    "objective_at",
    "pr_curve",
    "precision",
    "read_predictions",
    "roc_curve",
    "sensitivity",
    "specificity",
    "threshold_sweep",
    "write_curve_csv",
    "write_predictions",
]
