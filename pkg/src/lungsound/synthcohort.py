"""Deterministic synthetic cohorts with planted class-conditional acoustics.

Each event label has an acoustic archetype: band-limited noise for Normal,
damped transient bursts for crackles (coarse ones lower and slower-decaying),
sustained tones in label-specific bands for wheeze / rhonchi / stridor, a
tone-plus-bursts superposition for Wheeze+Crackle, and near-silence for
No Event. Disease groups differ in their event-type distributions, so the
groups are recoverable from event statistics alone.

Source audio is generated at 8 kHz so the pipeline's resampling path is always
exercised. write_synth_cohort emits the default adapter layout plus a
ground-truth manifest for test assertions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import signal as scipy_signal

from . import dsp
from .corpus import (
    DISEASE_GROUP_CLASSES,
    EVENT_LABELS,
    Corpus,
    EventAnnotation,
    PatientMeta,
    Record,
)
from .errors import ConfigError, DataError

SYNTH_SAMPLE_RATE = 8000

# Concrete diagnoses drawn per group (weights sum to 1 within each list).
_GROUP_DIAGNOSES = {
    "Pneumonia": [("Pneumonia (non-severe)", 0.7), ("Pneumonia (severe)", 0.3)],
    "Bronchial diseases": [
        ("Asthma", 0.35), ("Bronchitis", 0.30), ("Bronchiolitis", 0.20),
        ("Bronchiectasis", 0.10), ("Protracted bacterial bronchitis", 0.05),
    ],
    "Normal": [("Control Group", 1.0)],
    "Others": [
        ("Acute upper respiratory infection", 0.30), ("Chronic cough", 0.20),
        ("Other respiratory diseases", 0.20), ("Airway foreign body", 0.10),
        ("Kawasaki disease", 0.10), ("Unknown", 0.10),
    ],
}

# Event-type distribution per disease group. Normal events dominate the control
# group strongly; pneumonia leans on crackles, bronchial diseases on wheezes.
_GROUP_EVENT_DISTRIBUTIONS = {
    "Pneumonia": {
        "Fine Crackle": 0.45, "Coarse Crackle": 0.20, "Normal": 0.25,
        "Wheeze+Crackle": 0.05, "No Event": 0.05,
    },
    "Bronchial diseases": {
        "Wheeze": 0.45, "Rhonchi": 0.15, "Normal": 0.30,
        "Wheeze+Crackle": 0.05, "No Event": 0.05,
    },
    "Normal": {
        "Normal": 0.95, "No Event": 0.02, "Wheeze": 0.02, "Fine Crackle": 0.01,
    },
    "Others": {
        "Normal": 0.45, "Stridor": 0.15, "Fine Crackle": 0.10, "Wheeze": 0.10,
        "Rhonchi": 0.10, "Coarse Crackle": 0.05, "No Event": 0.05,
    },
}


@dataclass(frozen=True)
class SynthSpec:
    n_patients: int = 200
    group_mix: tuple = (0.55, 0.22, 0.10, 0.13)  # order follows DISEASE_GROUP_CLASSES
    events_per_patient: tuple = (4, 10)
    sample_rate: int = SYNTH_SAMPLE_RATE
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ConfigError(f"n_patients must be positive, got {self.n_patients}")
        if len(self.group_mix) != len(DISEASE_GROUP_CLASSES):
            raise ConfigError(f"group_mix needs {len(DISEASE_GROUP_CLASSES)} entries")
        if min(self.group_mix) < 0 or abs(sum(self.group_mix) - 1.0) > 1e-9:
            raise ConfigError("group_mix must be non-negative and sum to 1")
        lo, hi = self.events_per_patient
        if not 1 <= lo <= hi:
            raise ConfigError(f"events_per_patient range invalid: {self.events_per_patient}")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")


def largest_remainder_counts(n: int, proportions) -> list[int]:
    """Integer counts summing to n, each within one of n * p_i. Remainders are
    granted by descending fractional part, ties toward the lower index.
    """
    p = np.asarray(proportions, dtype=float)
    raw = n * p
    counts = np.floor(raw).astype(int)
    order = sorted(range(len(p)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


# ---------------------------------------------------------------------------
# Event waveform synthesis
# ---------------------------------------------------------------------------

_TONE_BANDS = {"Wheeze": (400.0, 800.0), "Rhonchi": (100.0, 300.0), "Stridor": (800.0, 1500.0)}


def _band_noise(rng: np.random.Generator, n: int, rate: int, amplitude: float) -> np.ndarray:
    raw = rng.standard_normal(n)
    nyq = rate / 2.0
    b, a = scipy_signal.butter(4, [80.0 / nyq, min(1800.0, 0.45 * rate) / nyq], btype="band")
    shaped = scipy_signal.lfilter(b, a, raw)
    peak = np.abs(shaped).max() or 1.0
    return amplitude * shaped / peak


def _add_bursts(rng: np.random.Generator, samples: np.ndarray, rate: int,
                freq_range: tuple, decay_range_ms: tuple) -> None:
    n_bursts = int(rng.integers(5, 21))
    for _ in range(n_bursts):
        f = rng.uniform(*freq_range)
        tau = rng.uniform(*decay_range_ms) / 1000.0
        amp = rng.uniform(0.4, 0.7)
        start = int(rng.integers(0, max(1, len(samples) - int(0.05 * rate))))
        length = min(int(6 * tau * rate), len(samples) - start)
        if length < 8:
            continue
        t = np.arange(length) / rate
        samples[start:start + length] += amp * np.exp(-t / tau) * np.sin(2 * np.pi * f * t)


def synth_event_waveform(kind: str, duration_ms: int, seed: int,
                         sample_rate: int = SYNTH_SAMPLE_RATE) -> dsp.Waveform:
    """Deterministic archetypal waveform for one event label."""
    if kind not in EVENT_LABELS:
        raise DataError(f"unknown event kind {kind!r}")
    if duration_ms < 100:
        raise DataError(f"event duration must be at least 100 ms, got {duration_ms}")
    rng = np.random.default_rng(seed)
    n = int(round(duration_ms * sample_rate / 1000.0))
    t = np.arange(n) / sample_rate

    if kind == "No Event":
        samples = _band_noise(rng, n, sample_rate, 0.01)
    elif kind == "Normal":
        samples = _band_noise(rng, n, sample_rate, 0.10)
    elif kind in ("Fine Crackle", "Coarse Crackle"):
        samples = _band_noise(rng, n, sample_rate, 0.08)
        if kind == "Fine Crackle":
            _add_bursts(rng, samples, sample_rate, (600.0, 1200.0), (3.0, 8.0))
        else:
            _add_bursts(rng, samples, sample_rate, (150.0, 400.0), (10.0, 25.0))
    elif kind in _TONE_BANDS:
        samples = _band_noise(rng, n, sample_rate, 0.08)
        f = rng.uniform(*_TONE_BANDS[kind])
        samples += 0.25 * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    elif kind == "Wheeze+Crackle":
        samples = _band_noise(rng, n, sample_rate, 0.08)
        f = rng.uniform(*_TONE_BANDS["Wheeze"])
        samples += 0.25 * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        _add_bursts(rng, samples, sample_rate, (600.0, 1200.0), (3.0, 8.0))
    else:  # pragma: no cover - EVENT_LABELS is closed
        raise DataError(f"unhandled event kind {kind!r}")

    peak = np.abs(samples).max()
    if peak > 0.9:
        samples = samples * (0.9 / peak)
    return dsp.Waveform(samples, sample_rate)


# ---------------------------------------------------------------------------
# Cohort generation
# ---------------------------------------------------------------------------

def _weighted_choice(rng: np.random.Generator, weighted: list[tuple[str, float]]) -> str:
    names = [w[0] for w in weighted]
    probs = np.array([w[1] for w in weighted])
    return names[int(rng.choice(len(names), p=probs / probs.sum()))]


def _patient_plan(spec: SynthSpec) -> list[dict]:
    """Deterministic per-patient assignments: group, diagnosis, age, sex,
    record layout, and event labels. Waveform synthesis happens later."""
    counts = largest_remainder_counts(spec.n_patients, spec.group_mix)
    groups = [g for g, c in zip(DISEASE_GROUP_CLASSES, counts) for _ in range(c)]
    plans = []
    for i, group in enumerate(groups):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        dist = _GROUP_EVENT_DISTRIBUTIONS[group]
        labels = list(dist)
        probs = np.array([dist[l] for l in labels])
        lo, hi = spec.events_per_patient
        n_events = int(rng.integers(lo, hi + 1))
        event_labels = [labels[int(k)] for k in rng.choice(len(labels), size=n_events,
                                                           p=probs / probs.sum())]
        n_records = int(rng.integers(1, min(3, n_events) + 1))
        # first n_records events are pinned one per record, so no record ends up
        # empty and curation stays a fixed point
        record_of_event = list(range(n_records)) + [
            int(rng.integers(0, n_records)) for _ in range(n_events - n_records)
        ]
        plans.append({
            "patient_id": f"pt{i:04d}",
            "group": group,
            "diagnosis": _weighted_choice(rng, _GROUP_DIAGNOSES[group]),
            "age": round(float(rng.uniform(0.5, 16.0)), 1),
            "sex": "male" if i % 2 == 0 else "female",
            "n_records": n_records,
            "record_of_event": record_of_event,
            "event_labels": event_labels,
            "locations": [f"p{int(rng.integers(1, 5))}" for _ in range(n_records)],
            "event_seed_base": int(rng.integers(0, 2 ** 31)),
            "durations_ms": [int(rng.integers(300, 1501)) for _ in range(n_events)],
            "gaps_ms": [int(rng.integers(100, 301)) for _ in range(n_events)],
        })
    return plans


def _render_record(plan: dict, record_idx: int, spec: SynthSpec):
    """Waveform plus event annotations for one record of one patient."""
    rate = spec.sample_rate
    pieces = []
    events = []
    cursor_ms = 0
    rng = np.random.default_rng(np.random.SeedSequence([plan["event_seed_base"], record_idx]))
    for ev_idx, rec in enumerate(plan["record_of_event"]):
        if rec != record_idx:
            continue
        gap_ms = plan["gaps_ms"][ev_idx]
        gap = _band_noise(rng, int(round(gap_ms * rate / 1000.0)), rate, 0.01)
        pieces.append(gap)
        cursor_ms += gap_ms
        dur_ms = plan["durations_ms"][ev_idx]
        wav = synth_event_waveform(plan["event_labels"][ev_idx], dur_ms,
                                   seed=plan["event_seed_base"] + 7919 * ev_idx,
                                   sample_rate=rate)
        pieces.append(wav.samples)
        events.append({"start_ms": cursor_ms, "end_ms": cursor_ms + dur_ms,
                       "label": plan["event_labels"][ev_idx]})
        cursor_ms += dur_ms
    tail = _band_noise(rng, int(round(0.15 * rate)), rate, 0.01)
    pieces.append(tail)
    return dsp.Waveform(np.concatenate(pieces), rate), events


def write_synth_cohort(spec: SynthSpec, out_dir: Path) -> Path:
    """Emit the default adapter layout plus ground_truth.json; returns out_dir."""
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    plans = _patient_plan(spec)

    with open(out / "patients.csv", "w") as fh:
        fh.write("patient_id,age,sex,diagnosis\n")
        for plan in plans:
            fh.write(f"{plan['patient_id']},{plan['age']},{plan['sex']},\"{plan['diagnosis']}\"\n")

    truth = {"spec": asdict(spec), "patients": {}, "event_labels": {}}
    for plan in plans:
        pid = plan["patient_id"]
        truth["patients"][pid] = {"disease_group": plan["group"],
                                  "diagnosis": plan["diagnosis"]}
        for r in range(plan["n_records"]):
            record_id = f"{pid}-r{r}"
            waveform, events = _render_record(plan, r, spec)
            dsp.write_wav(out / "audio" / f"{record_id}.wav", waveform)
            doc = {
                "record_id": record_id,
                "patient_id": pid,
                "location": plan["locations"][r],
                "quality": "good",
                "events": events,
            }
            (out / "records" / f"{record_id}.json").write_text(json.dumps(doc, indent=2))
            for i, ev in enumerate(events):
                truth["event_labels"][f"{record_id}#e{i}"] = ev["label"]
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
    return out


def synth_corpus(spec: SynthSpec) -> Corpus:
    """In-memory corpus (no audio files) with the same plan as write_synth_cohort.
    Useful for tests that only need metadata and annotations.
    """
    plans = _patient_plan(spec)
    patients = {}
    records = {}
    events = []
    for plan in plans:
        pid = plan["patient_id"]
        patients[pid] = PatientMeta(pid, plan["age"], plan["sex"], plan["diagnosis"])
        per_record_counter = {r: 0 for r in range(plan["n_records"])}
        cursor = {r: 0 for r in range(plan["n_records"])}
        for r in range(plan["n_records"]):
            records[f"{pid}-r{r}"] = Record(
                f"{pid}-r{r}", pid, plan["locations"][r], "good", None
            )
        for ev_idx, r in enumerate(plan["record_of_event"]):
            record_id = f"{pid}-r{r}"
            start = cursor[r] + plan["gaps_ms"][ev_idx]
            end = start + plan["durations_ms"][ev_idx]
            cursor[r] = end
            events.append(EventAnnotation(
                event_id=f"{record_id}#e{per_record_counter[r]}",
                record_id=record_id,
                start_ms=start,
                end_ms=end,
                event_label=plan["event_labels"][ev_idx],
                location=plan["locations"][r],
            ))
            per_record_counter[r] += 1
    return Corpus(patients, records, tuple(events))
