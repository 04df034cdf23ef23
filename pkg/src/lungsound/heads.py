"""Task-specific classification heads over clip embeddings.

A head is a single hidden layer (512 to 256, rectifier), inverted dropout, and
a softmax output. Training runs in two phases: phase 1 optimizes the head only;
phase 2 continues at a much smaller learning rate and, when the encoder backend
is trainable, also pushes gradients into the encoder. Early stopping watches
validation macro-F1 with a patience counter that is global across both phases,
and the best-validation checkpoint is what gets returned.

The forward/backward math is explicit numpy so the gradients are auditable and
checkable against finite differences.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, LungsoundError
from .metrics import macro_f1

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeadConfig:
    n_classes: int
    input_dim: int = 512
    hidden_dim: int = 256
    dropout_p: float = 0.3

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if self.input_dim <= 0 or self.hidden_dim <= 0:
            raise ConfigError("layer dimensions must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


@dataclass(frozen=True)
class TrainingSchedule:
    phase1_epochs: int = 10
    phase1_lr: float = 1e-4
    phase2_epochs: int = 40
    phase2_lr: float = 5e-7
    batch_size: int = 32
    early_stop_patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.phase1_lr <= 0 or self.phase2_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be at least 1")


def config_hash(config: HeadConfig, schedule: TrainingSchedule) -> str:
    payload = json.dumps({"config": asdict(config), "schedule": asdict(schedule)},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def compute_class_weights(labels, n_classes: int) -> np.ndarray:
    """weight_c = N / (K * count_c). Every class must be present."""
    y = np.asarray(labels, dtype=int)
    counts = np.bincount(y, minlength=n_classes)
    absent = np.flatnonzero(counts == 0)
    if absent.size:
        raise DataError(f"classes {absent.tolist()} absent from the training labels")
    return len(y) / (n_classes * counts.astype(float))


# ---------------------------------------------------------------------------
# Functional core
# ---------------------------------------------------------------------------

def init_params(config: HeadConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    w1 = rng.standard_normal((config.input_dim, config.hidden_dim)) * np.sqrt(2.0 / config.input_dim)
    w2 = rng.standard_normal((config.hidden_dim, config.n_classes)) * np.sqrt(1.0 / config.hidden_dim)
    return {
        "W1": w1, "b1": np.zeros(config.hidden_dim),
        "W2": w2, "b2": np.zeros(config.n_classes),
    }


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: dict, X: np.ndarray, dropout_p: float = 0.0,
            rng: Optional[np.random.Generator] = None):
    """Returns (probs, cache). Dropout is inverted scaling and only applied
    when dropout_p > 0 and an rng is supplied (training mode).
    """
    pre = X @ params["W1"] + params["b1"]
    hidden = np.maximum(pre, 0.0)
    if dropout_p > 0.0 and rng is not None:
        mask = (rng.random(hidden.shape) >= dropout_p) / (1.0 - dropout_p)
        hidden = hidden * mask
    else:
        mask = None
    logits = hidden @ params["W2"] + params["b2"]
    probs = _softmax(logits)
    cache = {"X": X, "pre": pre, "hidden": hidden, "mask": mask, "probs": probs}
    return probs, cache


def weighted_cross_entropy(probs: np.ndarray, y: np.ndarray,
                           class_weights: np.ndarray) -> float:
    """Sum of per-sample weighted CE normalized by the summed weights, so
    all-ones weights reduce exactly to the unweighted mean.
    """
    w = class_weights[y]
    ce = -np.log(np.clip(probs[np.arange(len(y)), y], 1e-12, None))
    return float((w * ce).sum() / w.sum())


def loss_and_grads(params: dict, X: np.ndarray, y: np.ndarray,
                   class_weights: np.ndarray, dropout_p: float = 0.0,
                   rng: Optional[np.random.Generator] = None):
    """Returns (loss, grads dict, dL/dX)."""
    probs, cache = forward(params, X, dropout_p, rng)
    n = len(y)
    w = class_weights[y]
    loss = weighted_cross_entropy(probs, y, class_weights)

    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits *= (w / w.sum())[:, None]

    grads = {
        "W2": cache["hidden"].T @ dlogits,
        "b2": dlogits.sum(axis=0),
    }
    dhidden = dlogits @ params["W2"].T
    if cache["mask"] is not None:
        dhidden = dhidden * cache["mask"]
    dpre = dhidden * (cache["pre"] > 0.0)
    grads["W1"] = cache["X"].T @ dpre
    grads["b1"] = dpre.sum(axis=0)
    grad_X = dpre @ params["W1"].T
    return loss, grads, grad_X


class Adam:
    """Adaptive-moment optimizer with the standard defaults."""

    def __init__(self, param_shapes: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(s) for k, s in param_shapes.items()}
        self.v = {k: np.zeros(s) for k, s in param_shapes.items()}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1 ** self.t)
            v_hat = self.v[k] / (1 - self.beta2 ** self.t)
            params[k] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Trained model container
# ---------------------------------------------------------------------------

@dataclass
class TrainedTaskModel:
    task_id: str
    config: HeadConfig
    schedule: TrainingSchedule
    class_order: tuple[str, ...]
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    encoder_state: Optional[dict] = None
    encoder_backend_id: Optional[str] = None
    encoder_checksum: Optional[str] = None

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.config.input_dim:
            raise ContractError(
                f"expected (n, {self.config.input_dim}) inputs, got {X.shape}"
            )
        probs, _ = forward(self.params, X)
        return probs

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def save(self, path: Path) -> None:
        meta = {
            "task_id": self.task_id,
            "config": asdict(self.config),
            "schedule": asdict(self.schedule),
            "class_order": list(self.class_order),
            "history": self.history,
            "best_epoch": self.best_epoch,
            "config_hash": config_hash(self.config, self.schedule),
            "encoder_backend_id": self.encoder_backend_id,
            "encoder_checksum": self.encoder_checksum,
            "has_encoder_state": self.encoder_state is not None,
        }
        arrays = {f"param_{k}": v for k, v in self.params.items()}
        if self.encoder_state is not None:
            for k, v in self.encoder_state.items():
                if isinstance(v, np.ndarray):
                    arrays[f"enc_{k}"] = v
                else:
                    meta[f"enc_scalar_{k}"] = v
        np.savez(path, meta=np.bytes_(json.dumps(meta).encode()), **arrays)

    @classmethod
    def load(cls, path: Path, expected_config: Optional[HeadConfig] = None,
             expected_schedule: Optional[TrainingSchedule] = None) -> "TrainedTaskModel":
        try:
            with np.load(path, allow_pickle=False) as data:
                meta = json.loads(data["meta"].item().decode())
                arrays = {k: data[k].copy() for k in data.files if k != "meta"}
        except FileNotFoundError:
            raise DataError(f"checkpoint not found: {path}") from None
        config = HeadConfig(**meta["config"])
        schedule = TrainingSchedule(**meta["schedule"])
        stored_hash = meta["config_hash"]
        if config_hash(config, schedule) != stored_hash:
            raise ConfigError(f"checkpoint {path} fails its own config hash; file corrupted?")
        if expected_config is not None or expected_schedule is not None:
            want = config_hash(expected_config or config, expected_schedule or schedule)
            if want != stored_hash:
                raise ConfigError(
                    f"checkpoint {path} was trained under a different configuration "
                    f"(stored {stored_hash[:12]}, expected {want[:12]})"
                )
        params = {k[len("param_"):]: v for k, v in arrays.items() if k.startswith("param_")}
        encoder_state = None
        if meta.get("has_encoder_state"):
            encoder_state = {k[len("enc_"):]: v for k, v in arrays.items() if k.startswith("enc_")}
            for k, v in meta.items():
                if k.startswith("enc_scalar_"):
                    encoder_state[k[len("enc_scalar_"):]] = v
        return cls(
            task_id=meta["task_id"], config=config, schedule=schedule,
            class_order=tuple(meta["class_order"]), params=params,
            history=meta["history"], best_epoch=meta["best_epoch"],
            encoder_state=encoder_state,
            encoder_backend_id=meta.get("encoder_backend_id"),
            encoder_checksum=meta.get("encoder_checksum"),
        )


# ---------------------------------------------------------------------------
# Two-phase training
# ---------------------------------------------------------------------------

def _snapshot(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def train_two_stage(
    task_id: str,
    config: HeadConfig,
    schedule: TrainingSchedule,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    class_order: Sequence[str],
    class_weights: Optional[np.ndarray] = None,
    backend=None,
    clips_train=None,
    clips_val=None,
) -> TrainedTaskModel:
    """Phase 1 trains the head on frozen embeddings; phase 2 drops the learning
    rate and, if `backend` is trainable and clips are supplied, updates the
    encoder through apply_embedding_gradients (embeddings are recomputed every
    epoch in that mode). Validation macro-F1 drives early stopping; its patience
    counter runs across the phase boundary.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=int)
    y_val = np.asarray(y_val, dtype=int)
    if len(X_train) == 0:
        raise DataError("empty training set")
    if len(X_train) != len(y_train) or len(X_val) != len(y_val):
        raise ContractError("feature/label length mismatch")
    if class_weights is None:
        class_weights = compute_class_weights(y_train, config.n_classes)
    class_weights = np.asarray(class_weights, dtype=np.float64)

    fine_tune = (
        backend is not None and getattr(backend, "trainable", False)
        and clips_train is not None and clips_val is not None
    )

    rng = np.random.default_rng(schedule.seed)
    params = init_params(config, rng)

    best_metric = -np.inf
    best_params = _snapshot(params)
    best_encoder_state = None
    best_epoch = -1
    stale = 0
    stopped = False
    history: list[dict] = []
    global_epoch = 0

    for phase, n_epochs, lr in (
        (1, schedule.phase1_epochs, schedule.phase1_lr),
        (2, schedule.phase2_epochs, schedule.phase2_lr),
    ):
        if stopped:
            break
        optimizer = Adam({k: v.shape for k, v in params.items()})
        for _ in range(n_epochs):
            tuning_now = fine_tune and phase == 2
            if tuning_now:
                X_tr = backend.embed_batch(clips_train).astype(np.float64)
                X_v = backend.embed_batch(clips_val).astype(np.float64)
            else:
                X_tr, X_v = X_train, X_val

            order = rng.permutation(len(X_tr))
            batch_losses = []
            for start in range(0, len(order), schedule.batch_size):
                idx = order[start:start + schedule.batch_size]
                loss, grads, grad_X = loss_and_grads(
                    params, X_tr[idx], y_train[idx], class_weights,
                    dropout_p=config.dropout_p, rng=rng,
                )
                if not np.isfinite(loss):
                    raise LungsoundError(
                        f"non-finite loss {loss} (task {task_id}, phase {phase}, "
                        f"epoch {global_epoch}, batch at {start})"
                    )
                optimizer.step(params, grads, lr)
                if tuning_now:
                    backend.apply_embedding_gradients(
                        [clips_train[i] for i in idx], grad_X, lr
                    )
                batch_losses.append(loss)

            val_probs, _ = forward(params, X_v)
            val_metric = macro_f1(y_val, val_probs.argmax(axis=1), config.n_classes)
            history.append({
                "epoch": global_epoch, "phase": phase,
                "train_loss": float(np.mean(batch_losses)),
                "val_macro_f1": float(val_metric),
            })
            if val_metric > best_metric:
                best_metric = val_metric
                best_params = _snapshot(params)
                best_epoch = global_epoch
                if fine_tune and hasattr(backend, "get_state"):
                    best_encoder_state = {
                        k: (v.copy() if isinstance(v, np.ndarray) else v)
                        for k, v in backend.get_state().items()
                    }
                stale = 0
            else:
                stale += 1
                if stale >= schedule.early_stop_patience:
                    logger.info("task %s: early stop at epoch %d (best %d)",
                                task_id, global_epoch, best_epoch)
                    stopped = True
                    break
            global_epoch += 1

    if fine_tune and best_encoder_state is not None and hasattr(backend, "set_state"):
        backend.set_state(best_encoder_state)

    return TrainedTaskModel(
        task_id=task_id,
        config=config,
        schedule=schedule,
        class_order=tuple(class_order),
        params=best_params,
        history=history,
        best_epoch=best_epoch,
        encoder_state=best_encoder_state,
        encoder_backend_id=getattr(backend, "backend_id", None),
        encoder_checksum=(backend.parameter_checksum()
                          if backend is not None and hasattr(backend, "parameter_checksum")
                          else None),
    )
