"""Classification metrics with explicit conventions, plus patient-level
percentile bootstrap confidence intervals.

Conventions that matter downstream:
  - per-class rates use one-vs-rest reductions; a zero denominator yields 0.0
    with the class flagged undefined rather than NaN or an exception
  - ROC-AUC is the midrank (tie-aware) concordance estimator
  - AUPRC is step-interpolated average precision, no trapezoids
  - the Brier score sums squared error over classes before averaging over
    samples, so its range is [0, 2]
  - MCC is the multi-class generalization over the confusion matrix
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DataError


def _as_labels(y, n_classes: int, name: str) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be 1-d, got shape {arr.shape}")
    if len(arr) == 0:
        raise DataError(f"{name} is empty")
    if arr.min() < 0 or arr.max() >= n_classes:
        raise ContractError(f"{name} has labels outside [0, {n_classes})")
    return arr.astype(int)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """(n_classes, n_classes) counts; rows are true classes, columns predicted."""
    yt = _as_labels(y_true, n_classes, "y_true")
    yp = _as_labels(y_pred, n_classes, "y_pred")
    if len(yt) != len(yp):
        raise ContractError(f"length mismatch: {len(yt)} true vs {len(yp)} predicted")
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (yt, yp), 1)
    return cm


def accuracy(y_true, y_pred) -> float:
    yt = np.asarray(y_true)
    yp = np.asarray(y_pred)
    return float(np.mean(yt == yp))


@dataclass
class PerClassRates:
    precision: np.ndarray
    recall: np.ndarray
    specificity: np.ndarray
    npv: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    undefined: dict[str, np.ndarray] = field(default_factory=dict)


def per_class_rates(cm: np.ndarray) -> PerClassRates:
    """One-vs-rest precision, recall, specificity, NPV, F1 per class.

    A zero denominator gives 0.0 and sets the class flag in `undefined`.
    """
    cm = np.asarray(cm, dtype=float)
    k = cm.shape[0]
    tp = np.diag(cm)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = cm.sum() - tp - fn - fp

    def safe(num, den):
        den = np.asarray(den, dtype=float)
        flag = den == 0
        out = np.zeros(k)
        np.divide(num, den, out=out, where=~flag)
        return out, flag

    precision, p_flag = safe(tp, tp + fp)
    recall, r_flag = safe(tp, tp + fn)
    specificity, s_flag = safe(tn, tn + fp)
    npv, n_flag = safe(tn, tn + fn)
    f1, f_flag = safe(2 * tp, 2 * tp + fp + fn)
    return PerClassRates(
        precision=precision, recall=recall, specificity=specificity, npv=npv, f1=f1,
        support=cm.sum(axis=1).astype(int),
        undefined={"precision": p_flag, "recall": r_flag, "specificity": s_flag,
                   "npv": n_flag, "f1": f_flag},
    )


def macro_f1(y_true, y_pred, n_classes: int) -> float:
    rates = per_class_rates(confusion_matrix(y_true, y_pred, n_classes))
    return float(rates.f1.mean())


def weighted_f1(y_true, y_pred, n_classes: int) -> float:
    rates = per_class_rates(confusion_matrix(y_true, y_pred, n_classes))
    total = rates.support.sum()
    if total == 0:
        raise DataError("weighted F1 over empty input")
    return float((rates.f1 * rates.support).sum() / total)


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their rank run."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc_binary(y_true, scores) -> float:
    """Tie-aware concordance AUC. NaN when one class is absent."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=float)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = _midranks(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision_binary(y_true, scores) -> float:
    """Step-interpolated area under the precision-recall curve: the sum of
    precision at each distinct threshold weighted by the recall increment.
    NaN when there are no positives.
    """
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=float)
    n_pos = int(y.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-s, kind="mergesort")
    y_sorted = y[order]
    s_sorted = s[order]
    tp = np.cumsum(y_sorted)
    n_seen = np.arange(1, len(y) + 1)
    # thresholds sit at the last row of each equal-score run
    boundary = np.append(s_sorted[1:] != s_sorted[:-1], True)
    precision = tp[boundary] / n_seen[boundary]
    recall = tp[boundary] / n_pos
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - recall_prev) * precision))


def roc_curve_points(y_true, scores):
    """(fpr, tpr, thresholds) at each distinct score, descending, with the
    (0, 0) origin prepended.
    """
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=float)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC curve needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    y_sorted = y[order]
    s_sorted = s[order]
    boundary = np.append(s_sorted[1:] != s_sorted[:-1], True)
    tp = np.cumsum(y_sorted)[boundary]
    fp = np.cumsum(~y_sorted)[boundary]
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    thresholds = np.concatenate([[np.inf], s_sorted[boundary]])
    return fpr, tpr, thresholds


def pr_curve_points(y_true, scores):
    """(recall, precision, thresholds) at each distinct score, descending."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=float)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DataError("PR curve needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    y_sorted = y[order]
    s_sorted = s[order]
    boundary = np.append(s_sorted[1:] != s_sorted[:-1], True)
    tp = np.cumsum(y_sorted)[boundary]
    seen = np.arange(1, len(y) + 1)[boundary]
    return tp / n_pos, tp / seen, s_sorted[boundary]


def roc_auc_ovr(y_true, probs, n_classes: int) -> np.ndarray:
    yt = _as_labels(y_true, n_classes, "y_true")
    p = np.asarray(probs, dtype=float)
    return np.array([roc_auc_binary(yt == c, p[:, c]) for c in range(n_classes)])


def auprc_ovr(y_true, probs, n_classes: int) -> np.ndarray:
    yt = _as_labels(y_true, n_classes, "y_true")
    p = np.asarray(probs, dtype=float)
    return np.array([average_precision_binary(yt == c, p[:, c]) for c in range(n_classes)])


def brier_score(y_true, probs, n_classes: int) -> float:
    """Mean over samples of the summed squared probability error (range [0, 2])."""
    yt = _as_labels(y_true, n_classes, "y_true")
    p = np.asarray(probs, dtype=float)
    if p.shape != (len(yt), n_classes):
        raise ContractError(f"probability matrix shape {p.shape} != {(len(yt), n_classes)}")
    onehot = np.zeros_like(p)
    onehot[np.arange(len(yt)), yt] = 1.0
    return float(np.mean(np.sum((p - onehot) ** 2, axis=1)))


def matthews_corrcoef(y_true, y_pred, n_classes: int) -> float:
    """Multi-class MCC from the confusion matrix. Returns 0.0 when a marginal
    is degenerate (all one class on either axis).
    """
    cm = confusion_matrix(y_true, y_pred, n_classes).astype(float)
    t = cm.sum(axis=1)
    q = cm.sum(axis=0)
    s = cm.sum()
    c = np.trace(cm)
    num = c * s - float(t @ q)
    den = np.sqrt(s * s - float(q @ q)) * np.sqrt(s * s - float(t @ t))
    if den == 0:
        return 0.0
    return float(num / den)


def validate_probability_matrix(probs, n_classes: int, atol: float = 1e-6) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.ndim != 2 or p.shape[1] != n_classes:
        raise ContractError(f"expected (n, {n_classes}) probabilities, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ContractError("probabilities contain non-finite values")
    if p.min() < -atol:
        raise ContractError(f"negative probability {p.min()}")
    rows = p.sum(axis=1)
    bad = np.abs(rows - 1.0) > atol
    if bad.any():
        raise ContractError(f"{int(bad.sum())} probability rows do not sum to 1")
    return p


@dataclass
class MetricsReport:
    class_order: tuple[str, ...]
    n_samples: int
    confusion: np.ndarray
    accuracy: float
    macro_f1: float
    weighted_f1: float
    per_class: PerClassRates
    auc: np.ndarray
    auprc: np.ndarray
    macro_auc: float
    macro_auprc: float
    brier: float
    mcc: float

    def to_rows(self) -> list[dict]:
        rows = []
        for i, cls in enumerate(self.class_order):
            rows.append({
                "class": cls,
                "support": int(self.per_class.support[i]),
                "precision": self.per_class.precision[i],
                "recall": self.per_class.recall[i],
                "specificity": self.per_class.specificity[i],
                "npv": self.per_class.npv[i],
                "f1": self.per_class.f1[i],
                "auc": self.auc[i],
                "auprc": self.auprc[i],
            })
        return rows


def evaluate_predictions(y_true, probs, class_order: Sequence[str]) -> MetricsReport:
    """Full metric panel for one target from true label indices and a
    probability matrix (predicted class = argmax).
    """
    k = len(class_order)
    p = validate_probability_matrix(probs, k)
    yt = _as_labels(y_true, k, "y_true")
    if len(yt) != p.shape[0]:
        raise ContractError(f"{len(yt)} labels vs {p.shape[0]} probability rows")
    yp = p.argmax(axis=1)
    cm = confusion_matrix(yt, yp, k)
    rates = per_class_rates(cm)
    auc = roc_auc_ovr(yt, p, k)
    auprc = auprc_ovr(yt, p, k)
    return MetricsReport(
        class_order=tuple(class_order),
        n_samples=len(yt),
        confusion=cm,
        accuracy=accuracy(yt, yp),
        macro_f1=float(rates.f1.mean()),
        weighted_f1=float((rates.f1 * rates.support).sum() / max(rates.support.sum(), 1)),
        per_class=rates,
        auc=auc,
        auprc=auprc,
        macro_auc=float(np.nanmean(auc)) if np.any(np.isfinite(auc)) else float("nan"),
        macro_auprc=float(np.nanmean(auprc)) if np.any(np.isfinite(auprc)) else float("nan"),
        brier=brier_score(yt, p, k),
        mcc=matthews_corrcoef(yt, yp, k),
    )


# ---------------------------------------------------------------------------
# Patient-level bootstrap
# ---------------------------------------------------------------------------

@dataclass
class BootstrapResult:
    point: float
    low: float
    high: float
    n_replicates: int
    n_degenerate: int
    replicates: np.ndarray
    alpha: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.point, self.low, self.high)


def patient_bootstrap_ci(
    statistic: Callable[[np.ndarray], float],
    patient_of_row: Sequence,
    n_replicates: int = 1000,
    seed: int = 0,
    alpha: float = 0.05,
) -> BootstrapResult:
    """Percentile CI by resampling patients with replacement.

    `statistic` receives row indices (a resampled patient contributes all of
    its rows once per draw) and returns a scalar; non-finite replicate values
    are dropped from the percentile computation but counted. Replicate b uses
    its own generator seeded with SeedSequence([seed, b]), so the whole run is
    reproducible and insensitive to evaluation order.
    """
    patients = np.asarray(patient_of_row)
    if patients.ndim != 1 or len(patients) == 0:
        raise DataError("patient_of_row must be a non-empty 1-d sequence")
    if n_replicates < 1:
        raise DataError(f"need at least one replicate, got {n_replicates}")
    unique = np.unique(patients)
    rows_of = {pid: np.flatnonzero(patients == pid) for pid in unique}
    point = float(statistic(np.arange(len(patients))))

    stats = np.empty(n_replicates)
    for b in range(n_replicates):
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        draw = rng.integers(0, len(unique), size=len(unique))
        rows = np.concatenate([rows_of[unique[i]] for i in draw])
        stats[b] = statistic(rows)

    finite = stats[np.isfinite(stats)]
    if len(finite) == 0:
        raise DataError("all bootstrap replicates were degenerate")
    low, high = np.percentile(finite, [100 * alpha / 2.0, 100 * (1 - alpha / 2.0)])
    return BootstrapResult(
        point=point, low=float(low), high=float(high),
        n_replicates=n_replicates, n_degenerate=int(n_replicates - len(finite)),
        replicates=stats, alpha=alpha,
    )
