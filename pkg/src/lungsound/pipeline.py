"""Run-directory pipeline: configuration, manifest bookkeeping, and the stage
implementations behind the command suite.

A run directory is created by the first command and owns everything derived
from one configuration: config.json (whose hash keys the manifest), an
append-only manifest.json recording each completed stage with input and output
digests, and the stage artifacts themselves. Re-running a stage whose inputs
are digest-identical is a no-op. A lock file serializes commands per run
directory. No stage mutates its inputs.
"""

from __future__ import annotations

import contextlib
import csv
import datetime
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .aggregator import VotingConfig, aggregate_patients, predictions_to_rows
from .corpus import (
    BASE_TASKS,
    TARGETS,
    CohortSplit,
    Corpus,
    cohort_statistics,
    curate,
    ingest_corpus,
    map_label,
    patient_attribute,
    split_cohort,
    stratified_patient_split,
)
from .dsp import extract_event_clip, read_wav, resample, standardize_window
from .encoder import EmbeddingCache, clip_cache_key, get_backend
from .errors import ConfigError, ContractError, DataError, LungsoundError
from .heads import (
    HeadConfig,
    TrainedTaskModel,
    TrainingSchedule,
    compute_class_weights,
    train_two_stage,
)
from .metrics import (
    evaluate_predictions,
    macro_f1,
    patient_bootstrap_ci,
    roc_auc_ovr,
)
from .stacker import (
    FoldAssignment,
    HyperparameterSpace,
    MetaModel,
    assign_folds,
    build_meta_features,
    fit_meta_model,
    generate_oof_probabilities,
    load_oof_matrix,
    save_oof_matrix,
    verify_oof_audit,
)
from .synthcohort import SynthSpec, write_synth_cohort

logger = logging.getLogger(__name__)

STAGE_ORDER = ("ingest", "synth", "preprocess", "embed", "train-base",
               "stack", "aggregate", "evaluate", "report")

# which command produces each artifact, for actionable missing-input errors
_PRODUCERS = {
    "corpus/corpus.json": "ingest (or synth)",
    "split/split.json": "preprocess",
    "clips/clips_index.csv": "preprocess",
    "embeddings/embeddings.npz": "embed",
    "models": "train-base",
    "stack/folds.json": "stack",
    "stack/oof.csv": "stack",
    "stack/meta": "stack",
    "predictions": "aggregate",
    "metrics": "evaluate",
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_DEFAULT_CONFIG = {
    "seed": None,                      # mandatory
    "data_root": None,                 # required by ingest
    "adapter": "default",
    "backend": "mock",
    "backend_seed": 0,
    "trainable_encoder": False,
    "normalize_embeddings": False,
    "tasks": list(BASE_TASKS),
    "targets": list(BASE_TASKS),
    "test_fraction": 0.2,
    "split_strata": ["disease_group"],
    "margin": 0.1,
    "clip_duration_s": 2.0,
    "validation_fraction": 0.1,
    "schedule": {},
    "stack": {"k_folds": 5, "n_trials": 100, "learner": "gbdt"},
    "voting": {},
    "bootstrap": {"n_replicates": 1000, "alpha": 0.05},
    "synth": {},
    "fast": False,
}


@dataclass
class RunConfig:
    values: dict

    def __post_init__(self):
        merged = json.loads(json.dumps(_DEFAULT_CONFIG))
        unknown = set(self.values) - set(merged)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        for k, v in self.values.items():
            if isinstance(merged.get(k), dict) and isinstance(v, dict):
                merged[k].update(v)
            else:
                merged[k] = v
        self.values = merged
        if self.values["seed"] is None:
            raise ConfigError("configuration must set a seed")
        if self.values["backend"] not in ("mock", "foundation"):
            raise ConfigError(f"unknown backend {self.values['backend']!r}")
        if not 0 < self.values["test_fraction"] < 1:
            raise ConfigError("test_fraction must be in (0, 1)")
        for t in self.values["tasks"]:
            if t not in BASE_TASKS:
                raise ConfigError(f"unknown base task {t!r}")
        for t in self.values["targets"]:
            if t not in TARGETS:
                raise ConfigError(f"unknown target {t!r}; known: {sorted(TARGETS)}")

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.values, sort_keys=True).encode()
        ).hexdigest()

    def schedule(self) -> TrainingSchedule:
        kwargs = dict(self.values["schedule"])
        kwargs.setdefault("seed", self.seed)
        sched = TrainingSchedule(**kwargs)
        if self.values["fast"]:
            sched = TrainingSchedule(
                phase1_epochs=min(sched.phase1_epochs, 6),
                phase2_epochs=min(sched.phase2_epochs, 4),
                phase1_lr=sched.phase1_lr,
                phase2_lr=1e-4,  # frozen-embedding fast mode needs a usable rate
                batch_size=sched.batch_size,
                early_stop_patience=sched.early_stop_patience,
                seed=sched.seed,
            )
        return sched

    def stack_settings(self) -> dict:
        s = dict(self.values["stack"])
        if self.values["fast"]:
            s["n_trials"] = min(int(s.get("n_trials", 100)), 8)
        return s

    def voting(self) -> VotingConfig:
        return VotingConfig(**self.values["voting"])

    def synth_spec(self) -> SynthSpec:
        kwargs = dict(self.values["synth"])
        kwargs.setdefault("seed", self.seed)
        return SynthSpec(**kwargs)

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        try:
            return cls(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None


# ---------------------------------------------------------------------------
# Run directory, manifest, lock
# ---------------------------------------------------------------------------

def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def tree_digest(path: Path) -> str:
    """Digest of a directory: file names and contents, order-independent."""
    h = hashlib.sha256()
    for p in sorted(Path(path).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(path)).encode())
            h.update(file_digest(p).encode())
    return "sha256:" + h.hexdigest()


def artifact_digest(path: Path) -> str:
    return tree_digest(path) if Path(path).is_dir() else file_digest(path)


class RunDirectory:
    def __init__(self, root: Path, config: Optional[RunConfig] = None):
        self.root = Path(root)
        config_path = self.root / "config.json"
        if config_path.exists():
            existing = RunConfig.from_file(config_path)
            if config is not None and config.hash() != existing.hash():
                raise ConfigError(
                    f"run directory {self.root} was created with a different "
                    "configuration; refusing to mix artifacts (start a new run "
                    "directory or pass the original config)"
                )
            self.config = existing
        else:
            if config is None:
                raise ConfigError(
                    f"{config_path} not found; the first command needs --config"
                )
            self.root.mkdir(parents=True, exist_ok=True)
            config_path.write_text(json.dumps(config.values, indent=2, sort_keys=True))
            self.config = config

    # -- manifest ----------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def _load_manifest(self) -> dict:
        if self.manifest_path.exists():
            manifest = json.loads(self.manifest_path.read_text())
            if manifest["config_hash"] != self.config.hash():
                raise ConfigError(
                    f"manifest in {self.root} belongs to config hash "
                    f"{manifest['config_hash'][:12]}, current is "
                    f"{self.config.hash()[:12]}; refusing to resume"
                )
            return manifest
        return {"config_hash": self.config.hash(), "tool_version": __version__,
                "stages": []}

    def record_stage(self, stage: str, inputs: dict[str, str], outputs: dict[str, str]) -> None:
        manifest = self._load_manifest()
        manifest["stages"].append({
            "stage": stage,
            "completed_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "inputs": inputs,
            "outputs": outputs,
        })
        self.manifest_path.write_text(json.dumps(manifest, indent=2))

    def last_stage_record(self, stage: str) -> Optional[dict]:
        for record in reversed(self._load_manifest()["stages"]):
            if record["stage"] == stage:
                return record
        return None

    def is_up_to_date(self, stage: str, inputs: dict[str, str]) -> bool:
        record = self.last_stage_record(stage)
        if record is None or record["inputs"] != inputs:
            return False
        for rel, digest in record["outputs"].items():
            path = self.root / rel
            if not path.exists() or artifact_digest(path) != digest:
                return False
        return True

    # -- paths and helpers ---------------------------------------------------

    def path(self, rel: str) -> Path:
        return self.root / rel

    def require(self, rel: str) -> Path:
        path = self.root / rel
        if not path.exists():
            producer = _PRODUCERS.get(rel) or _PRODUCERS.get(rel.split("/")[0], "an earlier stage")
            raise DataError(
                f"missing artifact {rel} under {self.root}; run `lungsound {producer}` first"
            )
        return path

    @contextlib.contextmanager
    def lock(self):
        lock_path = self.root / ".lock"
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LungsoundError(
                f"run directory {self.root} is locked by another command "
                f"(remove {lock_path} if that process is gone)"
            ) from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            with contextlib.suppress(FileNotFoundError):
                lock_path.unlink()


def run_stage(run: RunDirectory, stage: str, input_rels: Sequence[str], stage_fn,
              params: Optional[dict] = None) -> bool:
    """Shared stage protocol: under the run lock, digest the inputs (plus any
    stage parameters, which count as inputs for staleness), skip when up to
    date, else execute stage_fn() -> list of output rel-paths and record their
    digests. Returns True when work was done.
    """
    with run.lock():
        inputs = {rel: artifact_digest(run.require(rel)) for rel in input_rels}
        for key, value in sorted((params or {}).items()):
            inputs[f"param:{key}"] = json.dumps(value)
        if run.is_up_to_date(stage, inputs):
            print(f"{stage}: up to date")
            return False
        output_rels = stage_fn()
        outputs = {rel: artifact_digest(run.path(rel)) for rel in output_rels}
        run.record_stage(stage, inputs, outputs)
    print(f"{stage}: done ({len(output_rels)} artifacts)")
    return True


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def stage_ingest(run: RunDirectory) -> bool:
    config = run.config

    def body():
        root = config["data_root"]
        if not root:
            raise ConfigError("ingest needs data_root in the configuration")
        corpus = curate(ingest_corpus(Path(root), config["adapter"]))
        if not corpus.events:
            raise DataError(f"no events survived curation under {root}")
        out = run.path("corpus")
        out.mkdir(exist_ok=True)
        corpus.save(out / "corpus.json")
        return ["corpus/corpus.json"]

    return run_stage(run, "ingest", [], body)


def stage_synth(run: RunDirectory) -> bool:
    config = run.config

    def body():
        spec = config.synth_spec()
        data_dir = run.path("synth_data")
        write_synth_cohort(spec, data_dir)
        corpus = curate(ingest_corpus(data_dir, "default"))
        out = run.path("corpus")
        out.mkdir(exist_ok=True)
        corpus.save(out / "corpus.json")
        return ["corpus/corpus.json", "synth_data/ground_truth.json"]

    return run_stage(run, "synth", [], body)


def _load_corpus(run: RunDirectory) -> Corpus:
    return Corpus.load(run.require("corpus/corpus.json"))


def stage_preprocess(run: RunDirectory) -> bool:
    config = run.config

    def body():
        corpus = _load_corpus(run)
        split = split_cohort(corpus, config["test_fraction"],
                             tuple(config["split_strata"]), config.seed)
        split_dir = run.path("split")
        split_dir.mkdir(exist_ok=True)
        split.save(split_dir / "split.json")

        clips_dir = run.path("clips")
        clips_dir.mkdir(exist_ok=True)
        with open(clips_dir / "clips_index.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["event_id", "record_id", "patient_id", "side",
                             "start_ms", "end_ms", "label", "location"])
            for ev in corpus.events:
                rec = corpus.records[ev.record_id]
                side = split.side_of(rec.patient_id)
                writer.writerow([ev.event_id, ev.record_id, rec.patient_id, side,
                                 ev.start_ms, ev.end_ms, ev.event_label, ev.location])
        return ["split/split.json", "clips/clips_index.csv"]

    return run_stage(run, "preprocess", ["corpus/corpus.json"], body)


def load_clips_index(run: RunDirectory) -> list[dict]:
    rows = []
    with open(run.require("clips/clips_index.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            row["start_ms"] = int(row["start_ms"])
            row["end_ms"] = int(row["end_ms"])
            rows.append(row)
    if not rows:
        raise DataError("clips index is empty")
    return rows


def _make_backend(config: RunConfig, trainable: Optional[bool] = None):
    return get_backend(
        config["backend"],
        seed=config["backend_seed"],
        trainable=config["trainable_encoder"] if trainable is None else trainable,
    )


def prepare_event_clips(corpus: Corpus, rows: Sequence[dict], margin: float,
                        duration_s: float) -> list:
    """Waveform clips for the given index rows, reading and resampling each
    source recording once.
    """
    by_record: dict[str, list[dict]] = {}
    for row in rows:
        by_record.setdefault(row["record_id"], []).append(row)
    clips_by_event: dict[str, object] = {}
    for record_id in sorted(by_record):
        rec = corpus.records[record_id]
        if rec.audio_path is None:
            raise DataError(f"record {record_id} has no audio file reference")
        wave = resample(read_wav(rec.audio_path))
        for row in by_record[record_id]:
            clip = extract_event_clip(wave, row["start_ms"], row["end_ms"], margin)
            clips_by_event[row["event_id"]] = standardize_window(clip, duration_s)
    return [clips_by_event[row["event_id"]] for row in rows]


def stage_embed(run: RunDirectory) -> bool:
    config = run.config

    def body():
        corpus = _load_corpus(run)
        rows = load_clips_index(run)
        backend = _make_backend(config, trainable=False)
        cache = EmbeddingCache.for_backend(run.path("cache"), backend)

        X = np.empty((len(rows), backend.dim), dtype=np.float32)
        misses = []
        for i, row in enumerate(rows):
            key = clip_cache_key(row["record_id"], row["start_ms"], row["end_ms"],
                                 config["margin"], config["clip_duration_s"])
            hit = cache.get(cache.digest_for(key))
            if hit is None:
                misses.append((i, row, key))
            else:
                X[i] = hit
        if misses:
            clips = prepare_event_clips(corpus, [m[1] for m in misses],
                                        config["margin"], config["clip_duration_s"])
            embedded = backend.embed_batch(clips)
            for (i, _, key), vec in zip(misses, embedded):
                X[i] = vec
                cache.put(cache.digest_for(key), vec)
        logger.info("embed: %d clips (%d cache hits)", len(rows), len(rows) - len(misses))

        if config["normalize_embeddings"]:
            norms = np.linalg.norm(X, axis=1, keepdims=True)
            X = (X / np.maximum(norms, 1e-12)).astype(np.float32)

        out = run.path("embeddings")
        out.mkdir(exist_ok=True)
        np.savez(out / "embeddings.npz",
                 event_ids=np.array([r["event_id"] for r in rows]),
                 X=X,
                 backend_id=np.bytes_(backend.backend_id.encode()),
                 backend_version=np.bytes_(backend.version.encode()),
                 backend_checksum=np.bytes_(backend.parameter_checksum().encode()))
        return ["embeddings/embeddings.npz"]

    return run_stage(run, "embed", ["corpus/corpus.json", "clips/clips_index.csv"], body)


def load_embeddings(run: RunDirectory) -> tuple[list[str], np.ndarray]:
    path = run.require("embeddings/embeddings.npz")
    with np.load(path, allow_pickle=False) as data:
        event_ids = [str(e) for e in data["event_ids"]]
        X = data["X"].astype(np.float64)
    return event_ids, X


def _event_table(run: RunDirectory, corpus: Corpus) -> list[dict]:
    """Clip-index rows joined with patient metadata, aligned to the embedding order."""
    rows = load_clips_index(run)
    for row in rows:
        patient = corpus.patients[row["patient_id"]]
        row["age"] = patient.age
        row["sex"] = patient.sex
        row["diagnosis"] = patient.diagnosis
    return rows


def _target_labels(rows: Sequence[dict], target_id: str) -> np.ndarray:
    """Class indices aligned to rows; -1 marks excluded events."""
    target = TARGETS[target_id]
    out = np.full(len(rows), -1, dtype=int)
    for i, row in enumerate(rows):
        source = row["label"] if target.label_source == "event" else row["diagnosis"]
        if source in target.excluded_source_labels:
            continue
        out[i] = target.taxonomy.class_index(map_label(source, target.taxonomy))
    return out


def _carve_validation(rows: Sequence[dict], indices: np.ndarray, fraction: float,
                      seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Patient-level stratified (by disease group) validation carve within the
    given rows. Returns (train_idx, val_idx) as positions into `rows`.
    """
    strata = {}
    for i in indices:
        row = rows[i]
        strata[row["patient_id"]] = (map_label(row["diagnosis"],
                                               TARGETS["disease_group"].taxonomy),)
    train_p, val_p, _ = stratified_patient_split(strata, fraction, seed)
    train_idx = np.array([i for i in indices if rows[i]["patient_id"] in train_p])
    val_idx = np.array([i for i in indices if rows[i]["patient_id"] in val_p])
    if len(val_idx) == 0 or len(train_idx) == 0:
        raise DataError("validation carve produced an empty side; too few patients")
    return train_idx, val_idx


def stage_train_base(run: RunDirectory) -> bool:
    config = run.config

    def body():
        corpus = _load_corpus(run)
        rows = _event_table(run, corpus)
        event_ids, X = load_embeddings(run)
        if [r["event_id"] for r in rows] != event_ids:
            raise ContractError("embeddings are not aligned with the clips index")
        schedule = config.schedule()
        train_rows = np.array([i for i, r in enumerate(rows) if r["side"] == "train"])
        if len(train_rows) == 0:
            raise DataError("no training-side events")

        models_dir = run.path("models")
        models_dir.mkdir(exist_ok=True)
        outputs = []
        for task_id in config["tasks"]:
            labels = _target_labels(rows, task_id)
            usable = train_rows[labels[train_rows] >= 0]
            tr_idx, val_idx = _carve_validation(rows, usable,
                                                config["validation_fraction"],
                                                config.seed)
            target = TARGETS[task_id]
            head_config = HeadConfig(n_classes=target.taxonomy.n_classes)
            weights = compute_class_weights(labels[tr_idx], head_config.n_classes)

            backend = None
            clips_tr = clips_val = None
            if config["trainable_encoder"] and config["backend"] == "mock":
                backend = _make_backend(config, trainable=True)
                clips_tr = prepare_event_clips(corpus, [rows[i] for i in tr_idx],
                                               config["margin"], config["clip_duration_s"])
                clips_val = prepare_event_clips(corpus, [rows[i] for i in val_idx],
                                                config["margin"], config["clip_duration_s"])
            model = train_two_stage(
                task_id, head_config, schedule,
                X[tr_idx], labels[tr_idx], X[val_idx], labels[val_idx],
                class_order=target.taxonomy.class_order,
                class_weights=weights,
                backend=backend, clips_train=clips_tr, clips_val=clips_val,
            )
            model.save(models_dir / f"{task_id}.npz")
            outputs.append(f"models/{task_id}.npz")
            best = max((h["val_macro_f1"] for h in model.history), default=float("nan"))
            logger.info("train-base %s: best val macro-F1 %.4f", task_id, best)
        return outputs

    return run_stage(
        run, "train-base",
        ["corpus/corpus.json", "clips/clips_index.csv", "embeddings/embeddings.npz"],
        body,
    )


def _load_base_models(run: RunDirectory) -> dict[str, TrainedTaskModel]:
    models = {}
    for task_id in run.config["tasks"]:
        models[task_id] = TrainedTaskModel.load(run.require(f"models/{task_id}.npz"))
    return models


def stage_stack(run: RunDirectory) -> bool:
    config = run.config

    def body():
        corpus = _load_corpus(run)
        rows = _event_table(run, corpus)
        event_ids, X = load_embeddings(run)
        schedule = config.schedule()
        settings = config.stack_settings()

        train_positions = np.array([i for i, r in enumerate(rows) if r["side"] == "train"])
        train_rows = [rows[i] for i in train_positions]
        strata = {r["patient_id"]: map_label(r["diagnosis"],
                                             TARGETS["disease_group"].taxonomy)
                  for r in train_rows}
        folds = assign_folds(strata, int(settings["k_folds"]), config.seed)

        stack_dir = run.path("stack")
        stack_dir.mkdir(exist_ok=True)
        folds.save(stack_dir / "folds.json")

        labels_by_task = {t: _target_labels(rows, t) for t in BASE_TASKS}

        def train_predict(task_id: str, tr: np.ndarray, pr: np.ndarray) -> np.ndarray:
            # tr/pr index into train_rows; map back to corpus-wide positions
            tr_pos = train_positions[tr]
            pr_pos = train_positions[pr]
            labels = labels_by_task[task_id]
            sub_tr, sub_val = _carve_validation(rows, tr_pos,
                                                config["validation_fraction"],
                                                config.seed + 1)
            target = TARGETS[task_id]
            head_config = HeadConfig(n_classes=target.taxonomy.n_classes)
            model = train_two_stage(
                task_id, head_config, schedule,
                X[sub_tr], labels[sub_tr], X[sub_val], labels[sub_val],
                class_order=target.taxonomy.class_order,
            )
            return model.predict_proba(X[pr_pos])

        probs_by_task, audit = generate_oof_probabilities(
            folds,
            [r["event_id"] for r in train_rows],
            [r["patient_id"] for r in train_rows],
            list(BASE_TASKS),
            train_predict,
        )
        verify_oof_audit(audit)
        (stack_dir / "oof_audit.json").write_text(json.dumps(audit))
        event_folds = [folds.fold_of(r["patient_id"]) for r in train_rows]
        save_oof_matrix(stack_dir / "oof.csv",
                        [r["event_id"] for r in train_rows], event_folds,
                        probs_by_task["sound_pattern"], probs_by_task["screening"],
                        probs_by_task["disease_group"])

        meta_dir = stack_dir / "meta"
        meta_dir.mkdir(exist_ok=True)
        outputs = ["stack/folds.json", "stack/oof.csv", "stack/oof_audit.json"]
        space = HyperparameterSpace(n_trials=int(settings["n_trials"]))
        for target_id in config["targets"]:
            labels = _target_labels(rows, target_id)[train_positions]
            keep = labels >= 0
            if keep.sum() == 0:
                raise DataError(f"target {target_id}: every training event excluded")
            X_meta, names = build_meta_features(
                probs_by_task["sound_pattern"][keep],
                probs_by_task["screening"][keep],
                probs_by_task["disease_group"][keep],
                [train_rows[i]["age"] for i in np.flatnonzero(keep)],
                [train_rows[i]["sex"] for i in np.flatnonzero(keep)],
                [train_rows[i]["location"] for i in np.flatnonzero(keep)],
            )
            meta = fit_meta_model(
                target_id, TARGETS[target_id].taxonomy.class_order,
                X_meta, labels[keep],
                [train_rows[i]["patient_id"] for i in np.flatnonzero(keep)],
                names, space=space, seed=config.seed,
                learner=settings.get("learner", "gbdt"),
            )
            meta.save(meta_dir / f"{target_id}.pkl")
            outputs.append(f"stack/meta/{target_id}.pkl")
        return outputs

    return run_stage(
        run, "stack",
        ["corpus/corpus.json", "clips/clips_index.csv", "embeddings/embeddings.npz"],
        body,
    )


def stage_aggregate(run: RunDirectory) -> bool:
    config = run.config

    def body():
        corpus = _load_corpus(run)
        rows = _event_table(run, corpus)
        event_ids, X = load_embeddings(run)
        base_models = _load_base_models(run)

        test_positions = np.array([i for i, r in enumerate(rows) if r["side"] == "test"])
        if len(test_positions) == 0:
            raise DataError("no test-side events to aggregate")
        test_rows = [rows[i] for i in test_positions]
        X_test = X[test_positions]

        base_probs = {t: base_models[t].predict_proba(X_test) for t in config["tasks"]}

        pred_dir = run.path("predictions")
        pred_dir.mkdir(exist_ok=True)
        outputs = []
        for task_id, probs in base_probs.items():
            rel = f"predictions/{task_id}_events_base.csv"
            _write_event_probs(run.path(rel), test_rows,
                               TARGETS[task_id].taxonomy.class_order, probs)
            outputs.append(rel)

        X_meta, _ = build_meta_features(
            base_probs["sound_pattern"], base_probs["screening"],
            base_probs["disease_group"],
            [r["age"] for r in test_rows],
            [r["sex"] for r in test_rows],
            [r["location"] for r in test_rows],
        )
        voting = config.voting()
        for target_id in config["targets"]:
            meta = MetaModel.load(run.require(f"stack/meta/{target_id}.pkl"))
            probs = meta.predict_proba(X_meta)
            rel = f"predictions/{target_id}_events_meta.csv"
            _write_event_probs(run.path(rel), test_rows,
                               TARGETS[target_id].taxonomy.class_order, probs)
            outputs.append(rel)

            if TARGETS[target_id].label_source == "diagnosis":
                by_patient: dict[str, list[int]] = {}
                for i, row in enumerate(test_rows):
                    by_patient.setdefault(row["patient_id"], []).append(i)
                predictions = aggregate_patients(
                    {pid: probs[idx] for pid, idx in by_patient.items()}, voting
                )
                rel = f"predictions/{target_id}_patients.csv"
                _write_patient_predictions(run.path(rel), predictions,
                                           TARGETS[target_id].taxonomy.class_order)
                outputs.append(rel)
        return outputs

    return run_stage(
        run, "aggregate",
        ["corpus/corpus.json", "clips/clips_index.csv", "embeddings/embeddings.npz",
         "models", "stack/meta"],
        body,
    )


def _write_event_probs(path: Path, rows: Sequence[dict], class_order, probs: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["event_id", "patient_id", "label"]
                        + [f"p_{c}" for c in class_order])
        for row, p in zip(rows, probs):
            writer.writerow([row["event_id"], row["patient_id"], row["label"]]
                            + [repr(float(v)) for v in p])


def load_event_probs(path: Path, n_classes: int):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows, probs = [], []
        for line in reader:
            rows.append({"event_id": line[0], "patient_id": line[1], "label": line[2]})
            probs.append([float(v) for v in line[3:]])
    arr = np.array(probs)
    if arr.shape[1] != n_classes:
        raise ContractError(f"{path}: expected {n_classes} probability columns, "
                            f"found {arr.shape[1]}")
    return rows, arr


def _write_patient_predictions(path: Path, predictions, class_order):
    rows = predictions_to_rows(predictions, class_order)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def load_patient_predictions(path: Path, class_order):
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            out.append({
                "patient_id": row["patient_id"],
                "probs": np.array([float(row[f"p_{c}"]) for c in class_order]),
                "predicted_class": row["predicted_class"],
                "gate_active": row["gate_active"] == "True",
            })
    return out


def stage_evaluate(run: RunDirectory, level: str = "both",
                   n_bootstrap: Optional[int] = None,
                   bootstrap_seed: Optional[int] = None) -> bool:
    config = run.config
    if level not in ("event", "patient", "both"):
        raise ConfigError(f"unknown evaluation level {level!r}")
    boot = dict(config["bootstrap"])
    if n_bootstrap is not None:
        boot["n_replicates"] = n_bootstrap
    seed = config.seed if bootstrap_seed is None else bootstrap_seed

    def body():
        corpus = _load_corpus(run)
        rows = _event_table(run, corpus)
        by_event = {r["event_id"]: r for r in rows}
        metrics_dir = run.path("metrics")
        metrics_dir.mkdir(exist_ok=True)
        outputs = []

        def evaluate_event_file(rel: str, target_id: str, tag: str):
            target = TARGETS[target_id]
            class_order = target.taxonomy.class_order
            pred_rows, probs = load_event_probs(run.require(rel), len(class_order))
            y, keep = [], []
            for i, pr in enumerate(pred_rows):
                source = (pr["label"] if target.label_source == "event"
                          else by_event[pr["event_id"]]["diagnosis"])
                if source in target.excluded_source_labels:
                    continue
                keep.append(i)
                y.append(target.taxonomy.class_index(map_label(source, target.taxonomy)))
            y = np.array(y)
            kept_probs = probs[keep]
            patients = [pred_rows[i]["patient_id"] for i in keep]
            report = evaluate_predictions(y, kept_probs, class_order)
            out_rel = f"metrics/event_{target_id}_{tag}.json"
            _write_metrics_json(run.path(out_rel), report, "event", target_id, tag,
                                _bootstrap_block(y, kept_probs, patients, class_order,
                                                 boot, seed))
            outputs.append(out_rel)

        def evaluate_patient_file(target_id: str):
            target = TARGETS[target_id]
            class_order = target.taxonomy.class_order
            rel = f"predictions/{target_id}_patients.csv"
            preds = load_patient_predictions(run.require(rel), class_order)
            y = np.array([
                target.taxonomy.class_index(
                    map_label(corpus.patients[p["patient_id"]].diagnosis, target.taxonomy))
                for p in preds
            ])
            probs = np.stack([p["probs"] for p in preds])
            patients = [p["patient_id"] for p in preds]
            report = evaluate_predictions(y, probs, class_order)
            out_rel = f"metrics/patient_{target_id}.json"
            _write_metrics_json(run.path(out_rel), report, "patient", target_id, "meta",
                                _bootstrap_block(y, probs, patients, class_order,
                                                 boot, seed))
            outputs.append(out_rel)

        if level in ("event", "both"):
            for task_id in config["tasks"]:
                evaluate_event_file(f"predictions/{task_id}_events_base.csv",
                                    task_id, "base")
            for target_id in config["targets"]:
                evaluate_event_file(f"predictions/{target_id}_events_meta.csv",
                                    target_id, "meta")
        if level in ("patient", "both"):
            for target_id in config["targets"]:
                if TARGETS[target_id].label_source == "diagnosis":
                    evaluate_patient_file(target_id)
        return outputs

    return run_stage(
        run, "evaluate", ["predictions"], body,
        params={"level": level, "n_replicates": boot.get("n_replicates"),
                "seed": seed},
    )


def _bootstrap_block(y, probs, patients, class_order, boot: dict, seed: int) -> dict:
    n = int(boot.get("n_replicates", 1000))
    if n <= 0:
        return {}
    alpha = float(boot.get("alpha", 0.05))
    k = len(class_order)
    y = np.asarray(y)
    probs = np.asarray(probs)

    def stat_fn(metric: str):
        def fn(idx: np.ndarray) -> float:
            sub_y, sub_p = y[idx], probs[idx]
            if metric == "accuracy":
                return float(np.mean(sub_y == sub_p.argmax(axis=1)))
            if metric == "macro_f1":
                return macro_f1(sub_y, sub_p.argmax(axis=1), k)
            if metric == "macro_auc":
                auc = roc_auc_ovr(sub_y, sub_p, k)
                return float(np.nanmean(auc)) if np.any(np.isfinite(auc)) else float("nan")
            raise ContractError(metric)
        return fn

    block = {"n_replicates": n, "alpha": alpha}
    for metric in ("accuracy", "macro_f1", "macro_auc"):
        result = patient_bootstrap_ci(stat_fn(metric), patients,
                                      n_replicates=n, seed=seed, alpha=alpha)
        block[metric] = {"point": result.point, "low": result.low,
                         "high": result.high, "degenerate": result.n_degenerate}
    return block


def _write_metrics_json(path: Path, report, level: str, target_id: str, tag: str,
                        bootstrap_block: dict) -> None:
    payload = {
        "level": level,
        "target": target_id,
        "source": tag,
        "n_samples": report.n_samples,
        "class_order": list(report.class_order),
        "accuracy": report.accuracy,
        "macro_f1": report.macro_f1,
        "weighted_f1": report.weighted_f1,
        "macro_auc": report.macro_auc,
        "macro_auprc": report.macro_auprc,
        "brier": report.brier,
        "mcc": report.mcc,
        "confusion": report.confusion.tolist(),
        "per_class": report.to_rows(),
        "bootstrap": bootstrap_block,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def stage_report(run: RunDirectory) -> bool:
    from . import report as report_mod

    def body():
        return report_mod.emit_report(run)

    return run_stage(run, "report", ["metrics", "predictions"], body)
