"""Patient-level aggregation of event probability vectors.

Three strategies are combined linearly: soft voting (mean), confidence-weighted
voting (max-probability weights), and majority voting. The majority component
only participates when its gate is active, meaning enough events agree on the
modal class and enough are high-confidence; otherwise it falls back to the
soft vote, so the combination is always a convex mix of simplex vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .metrics import macro_f1

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VotingConfig:
    w_soft: float = 0.30
    w_conf: float = 0.40
    w_major: float = 0.30
    agreement_threshold: float = 0.60
    high_conf_share_threshold: float = 0.50
    high_conf_prob: float = 0.70
    majority_style: str = "onehot"   # "onehot" or "frequency"
    high_conf_scope: str = "all"     # share over "all" events or "modal" ones only

    def __post_init__(self):
        if abs(self.w_soft + self.w_conf + self.w_major - 1.0) > 1e-12:
            raise ConfigError("voting weights must sum to 1")
        if min(self.w_soft, self.w_conf, self.w_major) < 0:
            raise ConfigError("voting weights must be non-negative")
        for name in ("agreement_threshold", "high_conf_share_threshold", "high_conf_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.majority_style not in ("onehot", "frequency"):
            raise ConfigError(f"unknown majority_style {self.majority_style!r}")
        if self.high_conf_scope not in ("all", "modal"):
            raise ConfigError(f"unknown high_conf_scope {self.high_conf_scope!r}")


@dataclass
class PatientPrediction:
    patient_id: str
    probabilities: np.ndarray
    hard_class: int
    gate_active: bool
    soft: np.ndarray
    confidence_weighted: np.ndarray
    majority_component: np.ndarray
    modal_class: int
    agreement_share: float
    high_conf_share: float
    n_events: int


def _validate_rows(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.ndim != 2:
        raise ContractError(f"expected an (n, K) probability matrix, got shape {p.shape}")
    if p.shape[0] == 0:
        raise DataError("patient has no events to aggregate")
    if not np.all(np.isfinite(p)):
        raise ContractError("event probabilities contain non-finite values")
    if p.min() < -1e-9:
        raise ContractError(f"negative event probability {p.min()}")
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ContractError("event probability rows do not sum to 1")
    return p


def soft_vote(probs: np.ndarray) -> np.ndarray:
    p = _validate_rows(probs)
    return p.mean(axis=0)


def confidence_weighted_vote(probs: np.ndarray) -> np.ndarray:
    p = _validate_rows(probs)
    weights = p.max(axis=1)
    return (weights[:, None] * p).sum(axis=0) / weights.sum()


def majority_gate(probs: np.ndarray, config: VotingConfig) -> tuple[bool, np.ndarray, dict]:
    """Gate decision and majority component.

    agreement = share of events whose argmax is the modal argmax class;
    high-confidence share = share of events with max probability strictly
    above high_conf_prob (over all events, or over modal-class events when
    high_conf_scope is "modal"). Active iff both shares reach their
    thresholds; inactive falls back to the soft vote.
    """
    p = _validate_rows(probs)
    n, k = p.shape
    argmaxes = p.argmax(axis=1)
    counts = np.bincount(argmaxes, minlength=k)
    modal = int(counts.argmax())  # ties resolve toward the lower class index
    if (counts == counts[modal]).sum() > 1:
        logger.debug("modal-class tie resolved toward class %d", modal)
    agreement = counts[modal] / n

    if config.high_conf_scope == "modal":
        scope = argmaxes == modal
        high_conf = (float(np.mean(p[scope].max(axis=1) > config.high_conf_prob))
                     if scope.any() else 0.0)
    else:
        high_conf = float(np.mean(p.max(axis=1) > config.high_conf_prob))

    active = agreement >= config.agreement_threshold and high_conf >= config.high_conf_share_threshold
    if active:
        if config.majority_style == "frequency":
            component = counts / n
        else:
            component = np.zeros(k)
            component[modal] = 1.0
    else:
        component = p.mean(axis=0)
    trace = {"modal_class": modal, "agreement_share": float(agreement),
             "high_conf_share": high_conf}
    return bool(active), component, trace


def ensemble_patient_prediction(
    patient_id: str, probs: np.ndarray, config: Optional[VotingConfig] = None
) -> PatientPrediction:
    """w_soft * soft + w_conf * confidence-weighted + w_major * majority
    component (the soft vote again when the gate is inactive). Hard class is
    the argmax with lowest-index tie-break.
    """
    config = config or VotingConfig()
    p = _validate_rows(probs)
    soft = p.mean(axis=0)
    conf = confidence_weighted_vote(p)
    active, component, trace = majority_gate(p, config)
    final = config.w_soft * soft + config.w_conf * conf + config.w_major * component
    return PatientPrediction(
        patient_id=patient_id,
        probabilities=final,
        hard_class=int(final.argmax()),
        gate_active=active,
        soft=soft,
        confidence_weighted=conf,
        majority_component=component,
        modal_class=trace["modal_class"],
        agreement_share=trace["agreement_share"],
        high_conf_share=trace["high_conf_share"],
        n_events=len(p),
    )


def aggregate_patients(
    probs_by_patient: Mapping[str, np.ndarray], config: Optional[VotingConfig] = None
) -> dict[str, PatientPrediction]:
    return {
        pid: ensemble_patient_prediction(pid, probs_by_patient[pid], config)
        for pid in sorted(probs_by_patient)
    }


def weight_candidates(step: float = 0.1) -> list[tuple[float, float, float]]:
    """All weight triples on a simplex grid with the given step."""
    n = int(round(1.0 / step))
    out = []
    for i in range(n + 1):
        for j in range(n + 1 - i):
            out.append((i / n, j / n, (n - i - j) / n))
    return out


def search_voting_weights(
    probs_by_patient: Mapping[str, np.ndarray],
    true_class_by_patient: Mapping[str, int],
    n_classes: int,
    base_config: Optional[VotingConfig] = None,
    candidates: Optional[Sequence[tuple[float, float, float]]] = None,
) -> tuple[VotingConfig, list[dict]]:
    """Grid search over weight triples on a validation cohort, maximizing
    patient-level macro-F1. Gate thresholds come from base_config. Ties keep
    the earlier candidate, so the default-ordered grid is deterministic.
    """
    base = base_config or VotingConfig()
    cands = list(candidates) if candidates is not None else weight_candidates()
    pids = sorted(set(probs_by_patient) & set(true_class_by_patient))
    if not pids:
        raise DataError("no patients shared between predictions and truth")
    y_true = np.array([true_class_by_patient[p] for p in pids])

    best_cfg, best_score, history = None, -np.inf, []
    for ws, wc, wm in cands:
        cfg = VotingConfig(
            w_soft=ws, w_conf=wc, w_major=wm,
            agreement_threshold=base.agreement_threshold,
            high_conf_share_threshold=base.high_conf_share_threshold,
            high_conf_prob=base.high_conf_prob,
            majority_style=base.majority_style,
            high_conf_scope=base.high_conf_scope,
        )
        y_pred = np.array([
            ensemble_patient_prediction(p, probs_by_patient[p], cfg).hard_class
            for p in pids
        ])
        score = macro_f1(y_true, y_pred, n_classes)
        history.append({"weights": (ws, wc, wm), "macro_f1": score})
        if score > best_score:
            best_cfg, best_score = cfg, score
    return best_cfg, history


def predictions_to_rows(
    predictions: Mapping[str, PatientPrediction], class_order: Sequence[str]
) -> list[dict]:
    """Delimited-table form: patient_id, per-class probabilities, hard class,
    gate flag.
    """
    rows = []
    for pid in sorted(predictions):
        pred = predictions[pid]
        if len(pred.probabilities) != len(class_order):
            raise ContractError(
                f"patient {pid}: {len(pred.probabilities)} probabilities for "
                f"{len(class_order)} classes"
            )
        row = {"patient_id": pid}
        for cls, prob in zip(class_order, pred.probabilities):
            row[f"p_{cls}"] = float(prob)
        row["predicted_class"] = class_order[pred.hard_class]
        row["gate_active"] = pred.gate_active
        rows.append(row)
    return rows
