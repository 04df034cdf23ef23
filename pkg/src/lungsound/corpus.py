"""Corpus ingestion, curation, label taxonomies, patient-level splitting, and cohort statistics.

The on-disk adapter layout (layout name ``default``) is:

    <root>/patients.csv             header: patient_id,age,sex,diagnosis
    <root>/records/<record_id>.json one annotation document per record with fields
                                    record_id, patient_id, location, quality, audio (optional,
                                    path relative to root) and events: [{start_ms, end_ms, label}]
    <root>/audio/<record_id>.wav    PCM WAV referenced by record_id unless the record
                                    document overrides it with an explicit audio path

Age is fractional years, sex is male/female, diagnosis is one of the 16 canonical
diagnosis strings below. All fields are mandatory; missing values are a hard error.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats as scipy_stats

from .errors import DataError, IntegrityError, ParseError, UnknownLabelError

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Closed label sets
# ---------------------------------------------------------------------------

EVENT_LABELS = (
    "Normal",
    "Fine Crackle",
    "Coarse Crackle",
    "Wheeze",
    "Wheeze+Crackle",
    "Rhonchi",
    "Stridor",
    "No Event",
)

DIAGNOSES = (
    "Pneumonia (severe)",
    "Pneumonia (non-severe)",
    "Asthma",
    "Bronchitis",
    "Bronchiolitis",
    "Bronchiectasis",
    "Protracted bacterial bronchitis",
    "Control Group",
    "Acute upper respiratory infection",
    "Airway foreign body",
    "Chronic cough",
    "Hemoptysis",
    "Kawasaki disease",
    "Other respiratory diseases",
    "Pulmonary hemosiderosis",
    "Unknown",
)

SOUND_PATTERN_CLASSES = ("Normal", "Crackles", "Rhonchi")
SCREENING_CLASSES = ("Normal", "Abnormal")
DISEASE_GROUP_CLASSES = ("Pneumonia", "Bronchial diseases", "Normal", "Others")
LOCATIONS = ("p1", "p2", "p3", "p4")
SEXES = ("male", "female")
QUALITY_FLAGS = ("good", "poor")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatientMeta:
    patient_id: str
    age: float
    sex: str
    diagnosis: str

    def __post_init__(self):
        if self.age < 0:
            raise DataError(f"patient {self.patient_id}: age must be non-negative, got {self.age}")
        if self.sex not in SEXES:
            raise DataError(f"patient {self.patient_id}: sex must be one of {SEXES}, got {self.sex!r}")
        if self.diagnosis not in DIAGNOSES:
            raise UnknownLabelError(
                f"patient {self.patient_id}: diagnosis {self.diagnosis!r} is not in the 16-label set"
            )


@dataclass(frozen=True)
class EventAnnotation:
    event_id: str
    record_id: str
    start_ms: int
    end_ms: int
    event_label: str
    location: str

    def __post_init__(self):
        if not (0 <= self.start_ms < self.end_ms):
            raise DataError(
                f"event {self.event_id}: need 0 <= start < end, got [{self.start_ms}, {self.end_ms}]"
            )
        if self.event_label not in EVENT_LABELS:
            raise UnknownLabelError(f"event {self.event_id}: unknown label {self.event_label!r}")
        if self.location not in LOCATIONS:
            raise DataError(f"event {self.event_id}: unknown location {self.location!r}")

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms


@dataclass(frozen=True)
class Record:
    record_id: str
    patient_id: str
    location: str
    quality: str
    audio_path: Optional[Path] = None

    def __post_init__(self):
        if self.location not in LOCATIONS:
            raise DataError(f"record {self.record_id}: unknown location {self.location!r}")
        if self.quality not in QUALITY_FLAGS:
            raise DataError(f"record {self.record_id}: quality must be one of {QUALITY_FLAGS}")


@dataclass(frozen=True)
class Corpus:
    """Patients, records, and event annotations. Immutable after construction."""

    patients: Mapping[str, PatientMeta]
    records: Mapping[str, Record]
    events: tuple[EventAnnotation, ...]

    def __post_init__(self):
        for rec in self.records.values():
            if rec.patient_id not in self.patients:
                raise IntegrityError(
                    f"record {rec.record_id} references unknown patient {rec.patient_id}"
                )
        seen = set()
        for ev in self.events:
            if ev.record_id not in self.records:
                raise IntegrityError(f"event {ev.event_id} references unknown record {ev.record_id}")
            if ev.event_id in seen:
                raise IntegrityError(f"duplicate event id {ev.event_id}")
            seen.add(ev.event_id)

    def events_of_record(self, record_id: str) -> list[EventAnnotation]:
        return [e for e in self.events if e.record_id == record_id]

    def patient_of_event(self, event: EventAnnotation) -> PatientMeta:
        return self.patients[self.records[event.record_id].patient_id]

    def to_dict(self) -> dict:
        return {
            "patients": [
                {"patient_id": p.patient_id, "age": p.age, "sex": p.sex, "diagnosis": p.diagnosis}
                for p in sorted(self.patients.values(), key=lambda p: p.patient_id)
            ],
            "records": [
                {
                    "record_id": r.record_id,
                    "patient_id": r.patient_id,
                    "location": r.location,
                    "quality": r.quality,
                    "audio": str(r.audio_path) if r.audio_path else None,
                }
                for r in sorted(self.records.values(), key=lambda r: r.record_id)
            ],
            "events": [
                {
                    "event_id": e.event_id,
                    "record_id": e.record_id,
                    "start_ms": e.start_ms,
                    "end_ms": e.end_ms,
                    "label": e.event_label,
                    "location": e.location,
                }
                for e in self.events
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Corpus":
        patients = {
            p["patient_id"]: PatientMeta(p["patient_id"], float(p["age"]), p["sex"], p["diagnosis"])
            for p in data["patients"]
        }
        records = {
            r["record_id"]: Record(
                r["record_id"],
                r["patient_id"],
                r["location"],
                r["quality"],
                Path(r["audio"]) if r.get("audio") else None,
            )
            for r in data["records"]
        }
        events = tuple(
            EventAnnotation(
                e["event_id"], e["record_id"], int(e["start_ms"]), int(e["end_ms"]),
                e["label"], e["location"],
            )
            for e in data["events"]
        )
        return cls(patients, records, events)

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Path) -> "Corpus":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Label taxonomies and classification targets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelTaxonomy:
    """Total mapping from source labels to an ordered list of target classes."""

    name: str
    mapping: Mapping[str, str]
    class_order: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.class_order)) != len(self.class_order):
            raise DataError(f"taxonomy {self.name}: duplicate classes in class_order")
        missing = set(self.mapping.values()) - set(self.class_order)
        if missing:
            raise DataError(f"taxonomy {self.name}: mapped classes {missing} not in class_order")

    @property
    def n_classes(self) -> int:
        return len(self.class_order)

    def class_index(self, target_class: str) -> int:
        return self.class_order.index(target_class)


def map_label(source: str, taxonomy: LabelTaxonomy) -> str:
    """Look up the target class for a source label; unknown labels are an error."""
    try:
        return taxonomy.mapping[source]
    except KeyError:
        raise UnknownLabelError(
            f"label {source!r} is outside the domain of taxonomy {taxonomy.name!r}"
        ) from None


SOUND_PATTERN_TAXONOMY = LabelTaxonomy(
    name="sound_pattern",
    mapping={
        "Normal": "Normal",
        "Fine Crackle": "Crackles",
        "Coarse Crackle": "Crackles",
        "Wheeze+Crackle": "Crackles",
        "Wheeze": "Rhonchi",
        "Stridor": "Rhonchi",
        "Rhonchi": "Rhonchi",
        "No Event": "Normal",
    },
    class_order=SOUND_PATTERN_CLASSES,
)

SCREENING_TAXONOMY = LabelTaxonomy(
    name="screening",
    mapping={
        label: ("Normal" if label in ("Normal", "No Event") else "Abnormal")
        for label in EVENT_LABELS
    },
    class_order=SCREENING_CLASSES,
)

DISEASE_GROUP_TAXONOMY = LabelTaxonomy(
    name="disease_group",
    mapping={
        "Pneumonia (severe)": "Pneumonia",
        "Pneumonia (non-severe)": "Pneumonia",
        "Asthma": "Bronchial diseases",
        "Bronchitis": "Bronchial diseases",
        "Bronchiolitis": "Bronchial diseases",
        "Bronchiectasis": "Bronchial diseases",
        "Protracted bacterial bronchitis": "Bronchial diseases",
        "Control Group": "Normal",
        "Acute upper respiratory infection": "Others",
        "Airway foreign body": "Others",
        "Chronic cough": "Others",
        "Hemoptysis": "Others",
        "Kawasaki disease": "Others",
        "Other respiratory diseases": "Others",
        "Pulmonary hemosiderosis": "Others",
        "Unknown": "Others",
    },
    class_order=DISEASE_GROUP_CLASSES,
)

# Six-class event-type target: No Event and Stridor rows are excluded upstream,
# so the taxonomy is total over the remaining six labels.
EVENT_TYPE_6_CLASSES = (
    "Coarse Crackle", "Fine Crackle", "Normal", "Rhonchi", "Wheeze", "Wheeze+Crackle",
)
EVENT_TYPE_6_TAXONOMY = LabelTaxonomy(
    name="event_type_6",
    mapping={label: label for label in EVENT_TYPE_6_CLASSES},
    class_order=EVENT_TYPE_6_CLASSES,
)

DISEASE_16_TAXONOMY = LabelTaxonomy(
    name="disease_16",
    mapping={d: d for d in DIAGNOSES},
    class_order=DIAGNOSES,
)


@dataclass(frozen=True)
class TargetSpec:
    """A classification target: where its event labels come from and how they map."""

    name: str
    taxonomy: LabelTaxonomy
    label_source: str                     # "event" or "diagnosis"
    excluded_source_labels: frozenset = frozenset()
    patient_level: bool = False           # truth is a patient attribute, so patient
                                          # predictions can be scored directly

    def event_class(self, event: EventAnnotation, patient: PatientMeta) -> Optional[str]:
        """Target class for one event, or None when the source label is excluded."""
        source = event.event_label if self.label_source == "event" else patient.diagnosis
        if source in self.excluded_source_labels:
            return None
        return map_label(source, self.taxonomy)


TARGETS: dict[str, TargetSpec] = {
    "screening": TargetSpec("screening", SCREENING_TAXONOMY, "event"),
    "sound_pattern": TargetSpec("sound_pattern", SOUND_PATTERN_TAXONOMY, "event"),
    "disease_group": TargetSpec(
        "disease_group", DISEASE_GROUP_TAXONOMY, "diagnosis", patient_level=True
    ),
    "event_type_6": TargetSpec(
        "event_type_6", EVENT_TYPE_6_TAXONOMY, "event",
        excluded_source_labels=frozenset({"No Event", "Stridor"}),
    ),
    "disease_16": TargetSpec(
        "disease_16", DISEASE_16_TAXONOMY, "diagnosis", patient_level=True
    ),
}

BASE_TASKS = ("screening", "sound_pattern", "disease_group")


# ---------------------------------------------------------------------------
# Ingestion adapters
# ---------------------------------------------------------------------------

def _parse_patients_csv(path: Path) -> dict[str, PatientMeta]:
    patients: dict[str, PatientMeta] = {}
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            expected = {"patient_id", "age", "sex", "diagnosis"}
            if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
                raise ParseError(
                    f"expected header with columns {sorted(expected)}, got {reader.fieldnames}",
                    path=path, where="header",
                )
            for lineno, row in enumerate(reader, start=2):
                pid = (row.get("patient_id") or "").strip()
                if not pid:
                    raise ParseError("missing patient_id", path=path, where=f"line {lineno}")
                if pid in patients:
                    raise ParseError(f"duplicate patient_id {pid}", path=path, where=f"line {lineno}")
                for col in ("age", "sex", "diagnosis"):
                    if not (row.get(col) or "").strip():
                        raise ParseError(f"missing {col} for patient {pid}",
                                         path=path, where=f"line {lineno}")
                try:
                    age = float(row["age"])
                except ValueError:
                    raise ParseError(f"age {row['age']!r} is not numeric",
                                     path=path, where=f"line {lineno}") from None
                patients[pid] = PatientMeta(pid, age, row["sex"].strip(), row["diagnosis"].strip())
    except FileNotFoundError:
        raise DataError(f"patient metadata table not found: {path}") from None
    return patients


def _parse_record_json(path: Path, root: Path) -> tuple[Record, list[EventAnnotation]]:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path=path, where=f"offset {exc.pos}") from None
    for key in ("record_id", "patient_id", "location", "quality", "events"):
        if key not in doc:
            raise ParseError(f"missing field {key!r}", path=path)
    record_id = doc["record_id"]
    audio = doc.get("audio")
    audio_path = root / audio if audio else root / "audio" / f"{record_id}.wav"
    record = Record(record_id, doc["patient_id"], doc["location"], doc["quality"], audio_path)
    events = []
    for i, ev in enumerate(doc["events"]):
        for key in ("start_ms", "end_ms", "label"):
            if key not in ev:
                raise ParseError(f"event {i} missing field {key!r}", path=path, where=f"events[{i}]")
        events.append(
            EventAnnotation(
                event_id=f"{record_id}#e{i}",
                record_id=record_id,
                start_ms=int(ev["start_ms"]),
                end_ms=int(ev["end_ms"]),
                event_label=ev["label"],
                location=doc["location"],
            )
        )
    return record, events


def _ingest_default_layout(root: Path) -> Corpus:
    patients_path = root / "patients.csv"
    if not patients_path.exists():
        raise DataError(f"no patients.csv under {root}")
    patients = _parse_patients_csv(patients_path)
    records: dict[str, Record] = {}
    events: list[EventAnnotation] = []
    records_dir = root / "records"
    if records_dir.exists():
        for path in sorted(records_dir.glob("*.json")):
            record, recorded_events = _parse_record_json(path, root)
            if record.record_id in records:
                raise ParseError(f"duplicate record_id {record.record_id}", path=path)
            records[record.record_id] = record
            events.extend(recorded_events)
    return Corpus(patients, records, tuple(events))


_ADAPTERS: dict[str, Callable[[Path], Corpus]] = {"default": _ingest_default_layout}


def ingest_corpus(root: Path, layout: str = "default") -> Corpus:
    """Parse a corpus directory in the named adapter layout.

    The returned corpus is uncurated; referential integrity is enforced,
    quality flags are preserved.
    """
    root = Path(root)
    if layout == "sprsound":
        raise DataError(
            "the sprsound adapter is a placeholder: the upstream release's on-disk naming "
            "must be mapped onto the documented default layout against the actual files"
        )
    try:
        adapter = _ADAPTERS[layout]
    except KeyError:
        raise DataError(f"unknown adapter layout {layout!r}; available: {sorted(_ADAPTERS)}") from None
    if not root.exists():
        raise DataError(f"corpus root does not exist: {root}")
    return adapter(root)


# ---------------------------------------------------------------------------
# Curation
# ---------------------------------------------------------------------------

def _waveform_digest(path: Path) -> str:
    from .dsp import read_wav

    w = read_wav(path)
    h = hashlib.sha256()
    h.update(np.asarray(w.samples, dtype=np.float64).tobytes())
    h.update(str(w.sample_rate).encode())
    return h.hexdigest()


def curate(corpus: Corpus) -> Corpus:
    """Three-stage cleanup: drop duplicate recordings (decoded-waveform content hash),
    drop poor-quality records, drop records without events. Patients left with no
    records are dropped too. No Event segments are kept (they map to Normal downstream).
    """
    events_by_record: dict[str, list[EventAnnotation]] = {}
    for ev in corpus.events:
        events_by_record.setdefault(ev.record_id, []).append(ev)

    # Stage 1: duplicates. Lexicographically smallest record_id survives.
    seen_digests: dict[str, str] = {}
    dropped: set[str] = set()
    for record_id in sorted(corpus.records):
        rec = corpus.records[record_id]
        if rec.audio_path is None or not Path(rec.audio_path).exists():
            continue
        digest = _waveform_digest(rec.audio_path)
        if digest in seen_digests:
            dropped.add(record_id)
            logger.info("curate: record %s duplicates %s, dropped", record_id, seen_digests[digest])
        else:
            seen_digests[digest] = record_id

    # Stage 2: poor quality.  Stage 3: no event annotations.
    for record_id, rec in corpus.records.items():
        if rec.quality == "poor":
            dropped.add(record_id)
        elif not events_by_record.get(record_id):
            dropped.add(record_id)

    records = {rid: r for rid, r in corpus.records.items() if rid not in dropped}
    events = tuple(e for e in corpus.events if e.record_id not in dropped)
    kept_patients = {r.patient_id for r in records.values()}
    patients = {pid: p for pid, p in corpus.patients.items() if pid in kept_patients}
    return Corpus(patients, records, events)


# ---------------------------------------------------------------------------
# Patient-level stratified splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CohortSplit:
    train_patient_ids: frozenset
    test_patient_ids: frozenset
    seed: int
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        overlap = self.train_patient_ids & self.test_patient_ids
        if overlap:
            raise IntegrityError(f"patients on both sides of the split: {sorted(overlap)}")

    def side_of(self, patient_id: str) -> str:
        if patient_id in self.train_patient_ids:
            return "train"
        if patient_id in self.test_patient_ids:
            return "test"
        raise KeyError(patient_id)

    def to_dict(self) -> dict:
        return {
            "train": sorted(self.train_patient_ids),
            "test": sorted(self.test_patient_ids),
            "seed": self.seed,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CohortSplit":
        return cls(frozenset(data["train"]), frozenset(data["test"]),
                   int(data["seed"]), tuple(data.get("warnings", ())))

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: Path) -> "CohortSplit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def patient_attribute(patient: PatientMeta, name: str) -> str:
    if name == "sex":
        return patient.sex
    if name == "diagnosis":
        return patient.diagnosis
    if name == "disease_group":
        return map_label(patient.diagnosis, DISEASE_GROUP_TAXONOMY)
    raise DataError(f"unsupported stratification attribute {name!r}")


def stratified_patient_split(
    strata_by_patient: Mapping[str, tuple],
    test_fraction: float,
    seed: int,
) -> tuple[set, set, list[str]]:
    """Split patient ids into (train, test) with a per-stratum test share within
    one patient of target. Single-patient strata go to train with a warning.
    """
    if not 0 < test_fraction < 1:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    by_stratum: dict[tuple, list[str]] = {}
    for pid in sorted(strata_by_patient):
        by_stratum.setdefault(strata_by_patient[pid], []).append(pid)

    rng = np.random.default_rng(seed)
    train: set = set()
    test: set = set()
    warnings: list[str] = []
    for key in sorted(by_stratum):
        ids = by_stratum[key]
        if len(ids) == 1:
            train.add(ids[0])
            msg = f"stratum {key} has a single patient {ids[0]}; assigned to train"
            warnings.append(msg)
            logger.warning(msg)
            continue
        n_test = int(np.floor(len(ids) * test_fraction + 0.5))
        order = rng.permutation(len(ids))
        for rank, idx in enumerate(order):
            (test if rank < n_test else train).add(ids[idx])
    return train, test, warnings


def split_cohort(
    corpus: Corpus,
    test_fraction: float,
    strata: Sequence[str] = ("disease_group",),
    seed: int = 0,
) -> CohortSplit:
    """Patient-level split stratified jointly on the given patient attributes."""
    strata_by_patient = {
        pid: tuple(patient_attribute(p, name) for name in strata)
        for pid, p in corpus.patients.items()
    }
    if not strata_by_patient:
        raise DataError("cannot split an empty corpus")
    train, test, warnings = stratified_patient_split(strata_by_patient, test_fraction, seed)
    return CohortSplit(frozenset(train), frozenset(test), seed, tuple(warnings))


# ---------------------------------------------------------------------------
# Cohort comparison statistics
# ---------------------------------------------------------------------------

@dataclass
class SectionStat:
    """One categorical block of the cohort table: per-category train/test counts."""

    name: str
    unit: str  # "patients" or "events"
    categories: list[str]
    train_counts: list[int]
    test_counts: list[int]
    p_value: float
    statistic: float
    test_name: str = "chi-square"

    def rows(self) -> list[dict]:
        out = []
        train_total = sum(self.train_counts) or 1
        test_total = sum(self.test_counts) or 1
        for cat, tr, te in zip(self.categories, self.train_counts, self.test_counts):
            out.append({
                "section": self.name, "category": cat,
                "all": tr + te,
                "train": tr, "train_pct": 100.0 * tr / train_total,
                "test": te, "test_pct": 100.0 * te / test_total,
            })
        return out


@dataclass
class CohortStatistics:
    n_patients_train: int
    n_patients_test: int
    n_events_train: int
    n_events_test: int
    sections: list[SectionStat]
    age_median_train: float
    age_iqr_train: tuple[float, float]
    age_median_test: float
    age_iqr_test: tuple[float, float]
    age_p_value: float
    age_statistic: float


def chi_square_independence(train_counts: Sequence[int], test_counts: Sequence[int]) -> tuple[float, float]:
    """Pearson chi-square without continuity correction on a 2 x C table.

    Categories empty on both sides are dropped. Returns (statistic, p).
    """
    table = np.array([train_counts, test_counts], dtype=float)
    keep = table.sum(axis=0) > 0
    table = table[:, keep]
    if table.shape[1] < 2 or table.sum(axis=1).min() == 0:
        return 0.0, 1.0
    stat, p, _, _ = scipy_stats.chi2_contingency(table, correction=False)
    return float(stat), float(p)


def mann_whitney_u(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Two-sided Mann-Whitney U. Exact enumeration for small tie-free samples,
    normal approximation with tie correction otherwise. Returns (U1, p).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0 or len(y) == 0:
        raise DataError("Mann-Whitney requires non-empty samples on both sides")
    has_ties = len(np.unique(np.concatenate([x, y]))) < len(x) + len(y)
    method = "exact" if (max(len(x), len(y)) <= 20 and not has_ties) else "asymptotic"
    res = scipy_stats.mannwhitneyu(x, y, alternative="two-sided", method=method)
    return float(res.statistic), float(res.pvalue)


def cohort_statistics(corpus: Corpus, split: CohortSplit) -> CohortStatistics:
    """Train/test comparison table: counts, percentages, and the train-vs-test
    balance tests (chi-square for categoricals, Mann-Whitney U for age).
    """
    train_ids = split.train_patient_ids & set(corpus.patients)
    test_ids = split.test_patient_ids & set(corpus.patients)
    if not train_ids or not test_ids:
        raise DataError("cohort statistics need a non-empty train and test side")

    def patient_section(name: str, categories: Sequence[str], value_fn) -> SectionStat:
        tr = [sum(1 for pid in train_ids if value_fn(corpus.patients[pid]) == c) for c in categories]
        te = [sum(1 for pid in test_ids if value_fn(corpus.patients[pid]) == c) for c in categories]
        stat, p = chi_square_independence(tr, te)
        return SectionStat(name, "patients", list(categories), tr, te, p, stat)

    def event_section(name: str, categories: Sequence[str], value_fn) -> SectionStat:
        tr = [0] * len(categories)
        te = [0] * len(categories)
        for ev in corpus.events:
            pid = corpus.records[ev.record_id].patient_id
            side = tr if pid in train_ids else te
            side[categories.index(value_fn(ev))] += 1
        stat, p = chi_square_independence(tr, te)
        return SectionStat(name, "events", list(categories), tr, te, p, stat)

    sections = [
        patient_section("sex", SEXES, lambda p: p.sex),
        patient_section(
            "disease_group", DISEASE_GROUP_CLASSES,
            lambda p: map_label(p.diagnosis, DISEASE_GROUP_TAXONOMY),
        ),
        event_section("event_type", EVENT_LABELS, lambda e: e.event_label),
        event_section(
            "sound_pattern", SOUND_PATTERN_CLASSES,
            lambda e: map_label(e.event_label, SOUND_PATTERN_TAXONOMY),
        ),
        event_section("location", LOCATIONS, lambda e: e.location),
    ]

    ages_train = [corpus.patients[pid].age for pid in sorted(train_ids)]
    ages_test = [corpus.patients[pid].age for pid in sorted(test_ids)]
    u_stat, age_p = mann_whitney_u(ages_train, ages_test)

    def median_iqr(ages):
        return float(np.median(ages)), (float(np.percentile(ages, 25)), float(np.percentile(ages, 75)))

    med_tr, iqr_tr = median_iqr(ages_train)
    med_te, iqr_te = median_iqr(ages_test)

    n_events_train = sum(
        1 for ev in corpus.events if corpus.records[ev.record_id].patient_id in train_ids
    )
    return CohortStatistics(
        n_patients_train=len(train_ids),
        n_patients_test=len(test_ids),
        n_events_train=n_events_train,
        n_events_test=len(corpus.events) - n_events_train,
        sections=sections,
        age_median_train=med_tr, age_iqr_train=iqr_tr,
        age_median_test=med_te, age_iqr_test=iqr_te,
        age_p_value=age_p, age_statistic=u_stat,
    )
