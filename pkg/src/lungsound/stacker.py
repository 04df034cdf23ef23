"""Out-of-fold stacking: patient-grouped fold assignment, leakage-audited
out-of-fold base probabilities, meta-feature assembly, and a gradient-boosted
meta-learner per target with sequential model-based hyperparameter search.

Boosting is realized with sklearn's GradientBoostingClassifier. Leaf-wise
parameter names map onto it as max_leaf_nodes (num_leaves), min_samples_leaf
(min_child_samples), and max_features (colsample). Early stopping is done
against a patient-grouped evaluation split by scanning staged predictions,
never with a row-level internal split, so patients cannot leak across the
stop decision.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from sklearn.ensemble import GradientBoostingClassifier
from sklearn.linear_model import LogisticRegression

from .errors import ConfigError, ContractError, DataError, IntegrityError
from .metrics import macro_f1

logger = logging.getLogger(__name__)

META_FEATURE_NAMES = (
    "sp_normal", "sp_crackles", "sp_rhonchi",
    "scr_abnormal",
    "dg_pneumonia", "dg_bronchial", "dg_normal", "dg_others",
    "age", "sex", "location",
)

OOF_PROB_COLUMNS = (
    "sp_normal", "sp_crackles", "sp_rhonchi",
    "scr_normal", "scr_abnormal",
    "dg_pneumonia", "dg_bronchial", "dg_normal", "dg_others",
)


# ---------------------------------------------------------------------------
# Fold assignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignment: Mapping[str, int]  # patient_id -> fold
    seed: int
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"need at least 2 folds, got {self.k}")
        bad = {p: f for p, f in self.assignment.items() if not 0 <= f < self.k}
        if bad:
            raise IntegrityError(f"fold indices outside [0, {self.k}): {bad}")

    def fold_of(self, patient_id: str) -> int:
        try:
            return self.assignment[patient_id]
        except KeyError:
            raise IntegrityError(f"patient {patient_id} has no fold assignment") from None

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed,
                "assignment": dict(sorted(self.assignment.items())),
                "warnings": list(self.warnings)}

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: Path) -> "FoldAssignment":
        d = json.loads(Path(path).read_text())
        return cls(d["k"], d["assignment"], d["seed"], tuple(d.get("warnings", ())))


def assign_folds(strata_by_patient: Mapping[str, str], k: int, seed: int = 0) -> FoldAssignment:
    """Patient-grouped, stratum-balanced fold assignment.

    Patients of each stratum are shuffled and dealt across folds; a global
    cursor carries over between strata so overall fold sizes stay within one
    patient of each other. Strata smaller than k get a warning (their patients
    cannot reach every fold).
    """
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    if not strata_by_patient:
        raise DataError("no patients to assign")
    rng = np.random.default_rng(seed)
    by_stratum: dict[str, list[str]] = {}
    for pid in sorted(strata_by_patient):
        by_stratum.setdefault(strata_by_patient[pid], []).append(pid)

    assignment: dict[str, int] = {}
    warnings: list[str] = []
    cursor = 0
    for stratum in sorted(by_stratum):
        ids = by_stratum[stratum]
        if len(ids) < k:
            msg = f"stratum {stratum!r} has {len(ids)} patients for {k} folds"
            warnings.append(msg)
            logger.warning(msg)
        for idx in rng.permutation(len(ids)):
            assignment[ids[idx]] = cursor % k
            cursor += 1
    return FoldAssignment(k, assignment, seed, tuple(warnings))


# ---------------------------------------------------------------------------
# Out-of-fold probability generation
# ---------------------------------------------------------------------------

def generate_oof_probabilities(
    folds: FoldAssignment,
    event_ids: Sequence[str],
    patient_of_event: Sequence[str],
    task_ids: Sequence[str],
    train_predict_fn: Callable[[str, np.ndarray, np.ndarray], np.ndarray],
) -> tuple[dict[str, np.ndarray], list[dict]]:
    """For each fold f and task, train on events of the other folds and predict
    fold f. Returns per-task (n_events, K) matrices aligned to event_ids and an
    audit trail naming, for every prediction, which folds the producing model
    saw; the leakage invariant is that an event's own fold is never among them.

    train_predict_fn(task_id, train_row_indices, predict_row_indices) must
    return probabilities for the predict rows.
    """
    event_folds = np.array([folds.fold_of(p) for p in patient_of_event])
    n = len(event_ids)
    if n != len(event_folds):
        raise ContractError("event_ids and patient_of_event length mismatch")
    probs_by_task: dict[str, np.ndarray] = {}
    audit: list[dict] = []
    for task_id in task_ids:
        task_probs: Optional[np.ndarray] = None
        for f in range(folds.k):
            predict_idx = np.flatnonzero(event_folds == f)
            train_idx = np.flatnonzero(event_folds != f)
            if len(predict_idx) == 0:
                continue
            if len(train_idx) == 0:
                raise DataError(f"fold {f} holds every event; cannot train")
            out = np.asarray(train_predict_fn(task_id, train_idx, predict_idx))
            if out.ndim != 2 or out.shape[0] != len(predict_idx):
                raise ContractError(
                    f"task {task_id} fold {f}: predictions shape {out.shape} "
                    f"for {len(predict_idx)} rows"
                )
            if task_probs is None:
                task_probs = np.full((n, out.shape[1]), np.nan)
            task_probs[predict_idx] = out
            model_folds = sorted(set(range(folds.k)) - {f})
            for i in predict_idx:
                audit.append({
                    "event_id": event_ids[i],
                    "task": task_id,
                    "fold": int(f),
                    "model_folds": model_folds,
                })
        if task_probs is None or np.isnan(task_probs).any():
            raise ContractError(f"task {task_id}: out-of-fold matrix has holes")
        probs_by_task[task_id] = task_probs
    return probs_by_task, audit


def verify_oof_audit(audit: Sequence[dict]) -> None:
    """Raises if any prediction's producing model saw the event's own fold."""
    for row in audit:
        if row["fold"] in row["model_folds"]:
            raise IntegrityError(
                f"leakage: event {row['event_id']} (fold {row['fold']}) predicted "
                f"by a model trained on folds {row['model_folds']}"
            )


def save_oof_matrix(path: Path, event_ids: Sequence[str], event_folds: Sequence[int],
                    sp: np.ndarray, scr: np.ndarray, dg: np.ndarray) -> None:
    if not (len(event_ids) == len(event_folds) == len(sp) == len(scr) == len(dg)):
        raise ContractError("out-of-fold blocks are not row-aligned")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("event_id", "fold") + OOF_PROB_COLUMNS)
        for i, eid in enumerate(event_ids):
            row = [eid, int(event_folds[i])]
            row += [repr(float(v)) for v in (*sp[i], *scr[i], *dg[i])]
            writer.writerow(row)


def load_oof_matrix(path: Path) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != ("event_id", "fold") + OOF_PROB_COLUMNS:
            raise DataError(f"{path}: unexpected out-of-fold header {header}")
        event_ids, folds, values = [], [], []
        for row in reader:
            event_ids.append(row[0])
            folds.append(int(row[1]))
            values.append([float(v) for v in row[2:]])
    arr = np.array(values)
    return event_ids, np.array(folds), arr[:, 0:3], arr[:, 3:5], arr[:, 5:9]


# ---------------------------------------------------------------------------
# Meta features
# ---------------------------------------------------------------------------

SEX_CODES = {"male": 1.0, "female": 0.0}
LOCATION_CODES = {"p1": 1.0, "p2": 2.0, "p3": 3.0, "p4": 4.0}


def build_meta_features(
    sp_probs: np.ndarray,
    scr_probs: np.ndarray,
    dg_probs: np.ndarray,
    ages: Sequence[float],
    sexes: Sequence[str],
    locations: Sequence[str],
    include_screening_normal: bool = False,
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Assemble the meta-feature matrix: 8 base probabilities (the screening
    Normal column is dropped as the complement of Abnormal), then age, sex
    (male=1), and location code. The switch keeps the redundant screening
    column for a 12-wide variant.
    """
    sp = np.asarray(sp_probs, dtype=float)
    scr = np.asarray(scr_probs, dtype=float)
    dg = np.asarray(dg_probs, dtype=float)
    n = len(sp)
    if sp.shape != (n, 3) or scr.shape != (n, 2) or dg.shape != (n, 4):
        raise ContractError(
            f"expected (n,3)/(n,2)/(n,4) probability blocks, got {sp.shape}/{scr.shape}/{dg.shape}"
        )
    if not (len(ages) == len(sexes) == len(locations) == n):
        raise ContractError("metadata columns are not row-aligned with probabilities")
    for name, block in (("sound_pattern", sp), ("screening", scr), ("disease_group", dg)):
        if block.min() < -1e-9 or block.max() > 1 + 1e-9:
            raise ContractError(f"{name} probabilities outside [0, 1]")
        if np.abs(block.sum(axis=1) - 1.0).max() > 1e-6:
            raise ContractError(f"{name} probability rows do not sum to 1")

    try:
        sex_col = np.array([SEX_CODES[s] for s in sexes])
    except KeyError as exc:
        raise DataError(f"unknown sex value {exc.args[0]!r}") from None
    try:
        loc_col = np.array([LOCATION_CODES[l] for l in locations])
    except KeyError as exc:
        raise DataError(f"unknown location value {exc.args[0]!r}") from None
    age_col = np.asarray(ages, dtype=float)
    if age_col.min() < 0:
        raise DataError("negative age in metadata")

    if include_screening_normal:
        blocks = [sp, scr[:, [0]], scr[:, [1]], dg]
        names = META_FEATURE_NAMES[:3] + ("scr_normal",) + META_FEATURE_NAMES[3:]
    else:
        blocks = [sp, scr[:, [1]], dg]
        names = META_FEATURE_NAMES
    X = np.column_stack(blocks + [age_col, sex_col, loc_col])
    if X.shape[1] != len(names):
        raise ContractError(f"meta matrix has {X.shape[1]} columns, expected {len(names)}")
    return X, names


# ---------------------------------------------------------------------------
# Hyperparameter space and sequential search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamSpec:
    name: str
    low: float
    high: float
    integer: bool = False
    log: bool = False

    def clip(self, value: float):
        v = min(max(value, self.low), self.high)
        return int(round(v)) if self.integer else float(v)


@dataclass(frozen=True)
class HyperparameterSpace:
    n_estimators: tuple = (50, 500)
    max_depth: tuple = (3, 15)
    learning_rate: tuple = (0.01, 0.3)
    num_leaves: tuple = (15, 300)
    min_child_samples: tuple = (5, 100)
    subsample: tuple = (0.6, 1.0)
    colsample: tuple = (0.6, 1.0)
    early_stopping_rounds: int = 20
    n_trials: int = 100

    def param_specs(self) -> list[ParamSpec]:
        return [
            ParamSpec("n_estimators", *self.n_estimators, integer=True),
            ParamSpec("max_depth", *self.max_depth, integer=True),
            ParamSpec("learning_rate", *self.learning_rate, log=True),
            ParamSpec("num_leaves", *self.num_leaves, integer=True),
            ParamSpec("min_child_samples", *self.min_child_samples, integer=True),
            ParamSpec("subsample", *self.subsample),
            ParamSpec("colsample", *self.colsample),
        ]

    def defaults(self) -> dict:
        """Midpoint of each range (geometric midpoint on log scales)."""
        out = {}
        for spec in self.param_specs():
            mid = math.sqrt(spec.low * spec.high) if spec.log else 0.5 * (spec.low + spec.high)
            out[spec.name] = spec.clip(mid)
        return out


class SequentialSearch:
    """Density-ratio sequential search over a box of parameters.

    After a random startup phase, observed trials are split at the score
    quantile gamma into good and bad sets; candidates are drawn from a kernel
    density over the good set and scored by the good/bad density ratio, and the
    best candidate is suggested. Log-scaled parameters are modeled in log space.
    """

    def __init__(self, specs: Sequence[ParamSpec], seed: int = 0,
                 n_startup: int = 10, gamma: float = 0.25, n_candidates: int = 24):
        self.specs = list(specs)
        self.rng = np.random.default_rng(seed)
        self.n_startup = n_startup
        self.gamma = gamma
        self.n_candidates = n_candidates
        self.trials: list[tuple[dict, float]] = []

    def _transform(self, spec: ParamSpec, value: float) -> float:
        return math.log(value) if spec.log else float(value)

    def _sample_uniform(self, spec: ParamSpec) -> float:
        if spec.log:
            v = math.exp(self.rng.uniform(math.log(spec.low), math.log(spec.high)))
        else:
            v = self.rng.uniform(spec.low, spec.high)
        return spec.clip(v)

    @staticmethod
    def _kde_logpdf(points: np.ndarray, x: np.ndarray, low: float, high: float) -> np.ndarray:
        bw = max(1.06 * points.std() * len(points) ** -0.2, 0.05 * (high - low), 1e-9)
        diff = (x[:, None] - points[None, :]) / bw
        dens = np.exp(-0.5 * diff ** 2).sum(axis=1) / (len(points) * bw * math.sqrt(2 * math.pi))
        return np.log(dens + 1e-300)

    def suggest(self) -> dict:
        if len(self.trials) < self.n_startup:
            return {spec.name: self._sample_uniform(spec) for spec in self.specs}
        scores = np.array([s for _, s in self.trials])
        n_good = max(1, int(math.ceil(self.gamma * len(scores))))
        good_idx = np.argsort(-scores, kind="mergesort")[:n_good]
        good_mask = np.zeros(len(scores), dtype=bool)
        good_mask[good_idx] = True

        out = {}
        for spec in self.specs:
            values = np.array([self._transform(spec, t[0][spec.name]) for t in self.trials])
            lo, hi = self._transform(spec, spec.low), self._transform(spec, spec.high)
            good, bad = values[good_mask], values[~good_mask]
            if len(bad) == 0:
                out[spec.name] = self._sample_uniform(spec)
                continue
            bw = max(1.06 * good.std() * len(good) ** -0.2, 0.05 * (hi - lo), 1e-9)
            centers = good[self.rng.integers(0, len(good), self.n_candidates)]
            cands = np.clip(centers + self.rng.standard_normal(self.n_candidates) * bw, lo, hi)
            ratio = self._kde_logpdf(good, cands, lo, hi) - self._kde_logpdf(bad, cands, lo, hi)
            best = cands[int(np.argmax(ratio))]
            out[spec.name] = spec.clip(math.exp(best) if spec.log else best)
        return out

    def observe(self, params: dict, score: float) -> None:
        self.trials.append((dict(params), float(score)))


# ---------------------------------------------------------------------------
# Boosted-tree meta-learner
# ---------------------------------------------------------------------------

def _make_learner(params: dict, n_features: int, seed: int, learner: str):
    if learner == "logistic":
        return LogisticRegression(max_iter=1000, C=1.0, random_state=seed)
    if learner != "gbdt":
        raise ConfigError(f"unknown meta-learner {learner!r}")
    max_features = max(1, int(round(params["colsample"] * n_features)))
    return GradientBoostingClassifier(
        n_estimators=int(params["n_estimators"]),
        max_depth=int(params["max_depth"]),
        learning_rate=float(params["learning_rate"]),
        max_leaf_nodes=int(params["num_leaves"]),
        min_samples_leaf=int(params["min_child_samples"]),
        subsample=float(params["subsample"]),
        max_features=max_features,
        random_state=seed,
    )


def _full_proba(model, X: np.ndarray, n_classes: int) -> np.ndarray:
    """predict_proba padded out to the full class set (absent classes get 0)."""
    raw = model.predict_proba(X)
    out = np.zeros((len(X), n_classes))
    for j, cls in enumerate(model.classes_):
        out[:, int(cls)] = raw[:, j]
    return out


def _staged_best(model, X_eval, y_eval, n_classes: int, patience: int) -> tuple[int, float]:
    """Scan staged predictions on a held-out patient-grouped eval set; return
    (best stage count, best macro-F1), stopping the scan once `patience`
    consecutive stages fail to improve.
    """
    best_score, best_stage, stale = -np.inf, 1, 0
    for stage, probs in enumerate(model.staged_predict_proba(X_eval), start=1):
        score = macro_f1(y_eval, _full_proba_from_raw(model, probs, n_classes).argmax(axis=1),
                         n_classes)
        if score > best_score:
            best_score, best_stage, stale = score, stage, 0
        else:
            stale += 1
            if stale >= patience:
                break
    return best_stage, float(best_score)


def _full_proba_from_raw(model, raw: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((raw.shape[0], n_classes))
    for j, cls in enumerate(model.classes_):
        out[:, int(cls)] = raw[:, j]
    return out


def _grouped_eval_split(groups: np.ndarray, seed: int, fraction: float = 0.2):
    """Deterministic patient-grouped holdout of about `fraction` of patients."""
    unique = np.unique(groups)
    rng = np.random.default_rng(seed)
    n_eval = max(1, int(round(len(unique) * fraction)))
    if n_eval >= len(unique):
        raise DataError("too few patients for a grouped evaluation split")
    eval_patients = set(unique[rng.permutation(len(unique))[:n_eval]])
    eval_mask = np.array([g in eval_patients for g in groups])
    return ~eval_mask, eval_mask


@dataclass
class MetaModel:
    target_id: str
    class_order: tuple[str, ...]
    feature_names: tuple[str, ...]
    model: object
    params: dict
    learner: str
    best_n_estimators: int
    feature_importances: Optional[np.ndarray]
    tuning_history: list[dict] = field(default_factory=list)

    def predict_proba(self, X_meta: np.ndarray) -> np.ndarray:
        X = np.asarray(X_meta, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise ContractError(
                f"expected (n, {len(self.feature_names)}) meta features, got {X.shape}"
            )
        return _full_proba(self.model, X, len(self.class_order))

    def feature_importance(self) -> list[tuple[str, float]]:
        """Ranked (name, importance) pairs, normalized to sum to 1."""
        if self.feature_importances is None:
            raise ContractError(
                f"meta-model for {self.target_id} exposes no importances "
                f"(learner {self.learner!r})"
            )
        raw = np.clip(np.asarray(self.feature_importances, dtype=float), 0.0, None)
        total = raw.sum()
        share = raw / total if total > 0 else np.full(len(raw), 1.0 / len(raw))
        pairs = sorted(zip(self.feature_names, share), key=lambda kv: -kv[1])
        return [(name, float(v)) for name, v in pairs]

    def save(self, path: Path) -> None:
        with open(path, "wb") as fh:
            pickle.dump(self, fh)

    @classmethod
    def load(cls, path: Path) -> "MetaModel":
        with open(path, "rb") as fh:
            obj = pickle.load(fh)
        if not isinstance(obj, cls):
            raise DataError(f"{path} does not hold a meta-model")
        return obj


def tune_meta_learner(
    X: np.ndarray,
    y: np.ndarray,
    groups: Sequence,
    space: HyperparameterSpace,
    n_classes: int,
    seed: int = 0,
    n_cv_folds: int = 3,
    learner: str = "gbdt",
) -> tuple[dict, list[dict]]:
    """Sequential search maximizing patient-grouped CV macro-F1.

    n_trials = 0 short-circuits to the midpoint defaults with no fitting.
    """
    groups = np.asarray(groups)
    if space.n_trials == 0 or learner == "logistic":
        return space.defaults(), []

    majority: dict = {}
    for g in np.unique(groups):
        vals, counts = np.unique(y[groups == g], return_counts=True)
        majority[g] = str(vals[np.argmax(counts)])
    folds = assign_folds(majority, k=min(n_cv_folds, len(majority)), seed=seed)
    row_fold = np.array([folds.fold_of(g) for g in groups])

    n_observed = len(np.unique(y))

    def objective(params: dict) -> float:
        scores = []
        for f in range(folds.k):
            tr, te = row_fold != f, row_fold == f
            if len(np.unique(y[tr])) < n_observed:
                continue
            model = _make_learner(params, X.shape[1], seed, learner)
            model.fit(X[tr], y[tr])
            _, best = _staged_best(model, X[te], y[te], n_classes,
                                   space.early_stopping_rounds)
            scores.append(best)
        if not scores:
            raise DataError("every CV fold was missing a class; cannot tune")
        return float(np.mean(scores))

    search = SequentialSearch(space.param_specs(), seed=seed)
    history = []
    best_params, best_score = None, -np.inf
    for trial in range(space.n_trials):
        params = search.suggest()
        score = objective(params)
        search.observe(params, score)
        history.append({"trial": trial, "params": dict(params), "score": score})
        if score > best_score:
            best_params, best_score = dict(params), score
    logger.info("tuning done: best CV macro-F1 %.4f with %s", best_score, best_params)
    return best_params, history


def fit_meta_model(
    target_id: str,
    class_order: Sequence[str],
    X: np.ndarray,
    y: np.ndarray,
    groups: Sequence,
    feature_names: Sequence[str],
    space: Optional[HyperparameterSpace] = None,
    seed: int = 0,
    learner: str = "gbdt",
) -> MetaModel:
    """Tune, early-stop against a patient-grouped holdout, then refit on all
    rows at the chosen round count.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    groups = np.asarray(groups)
    if len(X) != len(y) or len(y) != len(groups):
        raise ContractError("meta-training rows are not aligned")
    space = space or HyperparameterSpace()
    params, history = tune_meta_learner(X, y, groups, space, len(class_order),
                                        seed=seed, learner=learner)

    if learner == "gbdt":
        tr_mask, ev_mask = _grouped_eval_split(groups, seed)
        if len(np.unique(y[tr_mask])) < len(np.unique(y)):
            # rare class concentrated in the holdout; fall back to no early stop
            best_n = int(params["n_estimators"])
        else:
            probe = _make_learner(params, X.shape[1], seed, learner)
            probe.fit(X[tr_mask], y[tr_mask])
            best_n, _ = _staged_best(probe, X[ev_mask], y[ev_mask], len(class_order),
                                     space.early_stopping_rounds)
        final_params = dict(params, n_estimators=best_n)
        model = _make_learner(final_params, X.shape[1], seed, learner)
        model.fit(X, y)
        importances = getattr(model, "feature_importances_", None)
    else:
        best_n = 0
        final_params = dict(params)
        model = _make_learner(final_params, X.shape[1], seed, learner)
        model.fit(X, y)
        importances = np.abs(model.coef_).sum(axis=0) if hasattr(model, "coef_") else None

    return MetaModel(
        target_id=target_id,
        class_order=tuple(class_order),
        feature_names=tuple(feature_names),
        model=model,
        params=final_params,
        learner=learner,
        best_n_estimators=best_n,
        feature_importances=(np.asarray(importances, dtype=float)
                             if importances is not None else None),
        tuning_history=history,
    )
