"""Report emission: delimited tables for every reported quantity, plus rendered
figure files. Tables carry the full figure content so the numbers are testable
without parsing images; the PNGs are a thin rendering on top.

Artifacts land under <run>/report/tables and <run>/report/figures:
  cohort.csv                         train/test cohort comparison with p-values
  metrics_<level>_<target>_<src>.csv per-class metric panel
  confusion_<level>_<target>_<src>.csv
  roc_points_*.csv / pr_points_*.csv one-vs-rest curve point lists
  clip_<event>_{waveform,mel,probs}.csv and clip_<event>.png showcase clips
  roc_*.png / pr_*.png / confusion_*.png
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402

from .corpus import (  # noqa: E402
    SOUND_PATTERN_TAXONOMY,
    TARGETS,
    CohortSplit,
    map_label,
)
from .dsp import extract_event_clip, mel_spectrogram, read_wav, resample, standardize_window  # noqa: E402
from .errors import DataError  # noqa: E402
from .metrics import pr_curve_points, roc_curve_points  # noqa: E402

logger = logging.getLogger(__name__)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Cohort table
# ---------------------------------------------------------------------------

def _cohort_table(run) -> list[str]:
    from .corpus import Corpus, cohort_statistics

    corpus = Corpus.load(run.require("corpus/corpus.json"))
    split = CohortSplit.load(run.require("split/split.json"))
    stats = cohort_statistics(corpus, split)

    rows = [
        ["patients", "total", "", stats.n_patients_train + stats.n_patients_test,
         stats.n_patients_train, "", stats.n_patients_test, "", ""],
        ["events", "total", "", stats.n_events_train + stats.n_events_test,
         stats.n_events_train, "", stats.n_events_test, "", ""],
        ["age_years", "median_iqr", "patients", "",
         f"{stats.age_median_train:.2f} "
         f"({stats.age_iqr_train[0]:.2f}-{stats.age_iqr_train[1]:.2f})", "",
         f"{stats.age_median_test:.2f} "
         f"({stats.age_iqr_test[0]:.2f}-{stats.age_iqr_test[1]:.2f})", "",
         repr(stats.age_p_value)],
    ]
    for section in stats.sections:
        for r in section.rows():
            rows.append([section.name, r["category"], section.unit, r["all"],
                         r["train"], f"{r['train_pct']:.1f}",
                         r["test"], f"{r['test_pct']:.1f}", repr(section.p_value)])
    _write_csv(run.path("report/tables/cohort.csv"),
               ["section", "category", "unit", "all", "train", "train_pct",
                "test", "test_pct", "p_value"], rows)
    return ["report/tables/cohort.csv"]


# ---------------------------------------------------------------------------
# Metric tables and figures
# ---------------------------------------------------------------------------

def _metric_tables(run, payload: dict) -> list[str]:
    level, target, src = payload["level"], payload["target"], payload["source"]
    stem = f"{level}_{target}_{src}"
    rels = []

    per_class_path = f"report/tables/metrics_{stem}.csv"
    header = ["class", "support", "precision", "recall", "specificity", "npv",
              "f1", "auc", "auprc"]
    rows = [[r[h] if h == "class" else repr(r[h]) if isinstance(r[h], float) else r[h]
             for h in header] for r in payload["per_class"]]
    rows.append(["__overall__", payload["n_samples"], "", repr(payload["accuracy"]),
                 "", "", repr(payload["macro_f1"]), repr(payload["macro_auc"]),
                 repr(payload["macro_auprc"])])
    _write_csv(run.path(per_class_path), header, rows)
    rels.append(per_class_path)

    confusion_path = f"report/tables/confusion_{stem}.csv"
    classes = payload["class_order"]
    cm = np.array(payload["confusion"])
    _write_csv(run.path(confusion_path), ["true\\pred"] + list(classes),
               [[classes[i]] + cm[i].tolist() for i in range(len(classes))])
    rels.append(confusion_path)

    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(classes)), classes, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(classes)), classes, fontsize=8)
    for i in range(len(classes)):
        for j in range(len(classes)):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=8,
                    color="white" if cm[i, j] > cm.max() / 2 else "black")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"{level} {target} ({src})", fontsize=9)
    fig.tight_layout()
    fig_path = f"report/figures/confusion_{stem}.png"
    fig.savefig(run.path(fig_path), dpi=110)
    plt.close(fig)
    rels.append(fig_path)
    return rels


def _curve_artifacts(run, corpus, payload: dict) -> list[str]:
    from .pipeline import load_event_probs, load_patient_predictions

    level, target_id, src = payload["level"], payload["target"], payload["source"]
    target = TARGETS[target_id]
    class_order = target.taxonomy.class_order
    stem = f"{level}_{target_id}_{src}"

    if level == "event":
        rel = f"predictions/{target_id}_events_{src}.csv"
        pred_rows, probs = load_event_probs(run.require(rel), len(class_order))
        y = []
        keep = []
        for i, row in enumerate(pred_rows):
            source = (row["label"] if target.label_source == "event"
                      else corpus.patients[row["patient_id"]].diagnosis)
            if source in target.excluded_source_labels:
                continue
            keep.append(i)
            y.append(target.taxonomy.class_index(map_label(source, target.taxonomy)))
        y = np.array(y)
        probs = probs[keep]
    else:
        rel = f"predictions/{target_id}_patients.csv"
        preds = load_patient_predictions(run.require(rel), class_order)
        y = np.array([
            target.taxonomy.class_index(
                map_label(corpus.patients[p["patient_id"]].diagnosis, target.taxonomy))
            for p in preds
        ])
        probs = np.stack([p["probs"] for p in preds])

    rels = []
    roc_rows, pr_rows = [], []
    fig_roc, ax_roc = plt.subplots(figsize=(4.5, 4))
    fig_pr, ax_pr = plt.subplots(figsize=(4.5, 4))
    for c, cls in enumerate(class_order):
        binary = y == c
        if binary.sum() == 0 or binary.sum() == len(binary):
            logger.info("curves %s: class %s missing a side, skipped", stem, cls)
            continue
        fpr, tpr, roc_thr = roc_curve_points(binary, probs[:, c])
        rec, prec, pr_thr = pr_curve_points(binary, probs[:, c])
        roc_rows += [[cls, repr(f), repr(t), repr(th)]
                     for f, t, th in zip(fpr, tpr, roc_thr)]
        pr_rows += [[cls, repr(r), repr(p), repr(th)]
                    for r, p, th in zip(rec, prec, pr_thr)]
        ax_roc.plot(fpr, tpr, label=cls, linewidth=1.2)
        ax_pr.plot(rec, prec, label=cls, linewidth=1.2)

    if roc_rows:
        roc_table = f"report/tables/roc_points_{stem}.csv"
        _write_csv(run.path(roc_table), ["class", "fpr", "tpr", "threshold"], roc_rows)
        rels.append(roc_table)
        pr_table = f"report/tables/pr_points_{stem}.csv"
        _write_csv(run.path(pr_table), ["class", "recall", "precision", "threshold"], pr_rows)
        rels.append(pr_table)

        ax_roc.plot([0, 1], [0, 1], linestyle=":", color="gray", linewidth=0.8)
        ax_roc.set_xlabel("false positive rate")
        ax_roc.set_ylabel("true positive rate")
        ax_roc.set_title(f"ROC {stem}", fontsize=9)
        ax_roc.legend(fontsize=7)
        fig_roc.tight_layout()
        roc_fig = f"report/figures/roc_{stem}.png"
        fig_roc.savefig(run.path(roc_fig), dpi=110)
        rels.append(roc_fig)

        ax_pr.set_xlabel("recall")
        ax_pr.set_ylabel("precision")
        ax_pr.set_title(f"PR {stem}", fontsize=9)
        ax_pr.legend(fontsize=7)
        fig_pr.tight_layout()
        pr_fig = f"report/figures/pr_{stem}.png"
        fig_pr.savefig(run.path(pr_fig), dpi=110)
        rels.append(pr_fig)
    plt.close(fig_roc)
    plt.close(fig_pr)
    return rels


# ---------------------------------------------------------------------------
# Clip showcase
# ---------------------------------------------------------------------------

def _clip_showcase(run, corpus) -> list[str]:
    """Waveform + mel spectrogram + probability bars for a few test clips, one
    per sound-pattern class where available.
    """
    from .pipeline import load_clips_index, load_event_probs

    config = run.config
    rows = [r for r in load_clips_index(run) if r["side"] == "test"]
    if not rows:
        return []
    probs_rel = "predictions/sound_pattern_events_meta.csv"
    if not run.path(probs_rel).exists():
        probs_rel = "predictions/sound_pattern_events_base.csv"
    if not run.path(probs_rel).exists():
        return []
    class_order = TARGETS["sound_pattern"].taxonomy.class_order
    pred_rows, probs = load_event_probs(run.path(probs_rel), len(class_order))
    probs_by_event = {r["event_id"]: probs[i] for i, r in enumerate(pred_rows)}

    chosen = {}
    for row in sorted(rows, key=lambda r: r["event_id"]):
        pattern = map_label(row["label"], SOUND_PATTERN_TAXONOMY)
        if pattern not in chosen and row["event_id"] in probs_by_event:
            chosen[pattern] = row
        if len(chosen) == len(class_order):
            break

    rels = []
    for pattern in sorted(chosen):
        row = chosen[pattern]
        event_id = row["event_id"]
        safe = event_id.replace("#", "_").replace("/", "_")
        record = corpus.records[row["record_id"]]
        if record.audio_path is None or not Path(record.audio_path).exists():
            continue
        wave = resample(read_wav(record.audio_path))
        clip = standardize_window(
            extract_event_clip(wave, row["start_ms"], row["end_ms"], config["margin"]),
            config["clip_duration_s"],
        )
        mel = mel_spectrogram(clip, n_mels=64)
        log_mel = np.log(mel + 1e-10)
        t = np.arange(len(clip.samples)) / clip.sample_rate
        p = probs_by_event[event_id]

        wav_rel = f"report/tables/clip_{safe}_waveform.csv"
        _write_csv(run.path(wav_rel), ["time_s", "amplitude"],
                   [[repr(float(a)), repr(float(b))] for a, b in zip(t[::16], clip.samples[::16])])
        mel_rel = f"report/tables/clip_{safe}_mel.csv"
        _write_csv(run.path(mel_rel), ["band"] + [str(i) for i in range(log_mel.shape[1])],
                   [[b] + [f"{v:.4f}" for v in log_mel[b]] for b in range(log_mel.shape[0])])
        probs_csv = f"report/tables/clip_{safe}_probs.csv"
        _write_csv(run.path(probs_csv), ["class", "probability"],
                   [[cls, repr(float(v))] for cls, v in zip(class_order, p)])
        rels += [wav_rel, mel_rel, probs_csv]

        fig, axes = plt.subplots(3, 1, figsize=(7, 7),
                                 gridspec_kw={"height_ratios": [1, 1.4, 0.8]})
        axes[0].plot(t, clip.samples, linewidth=0.4, color="tab:blue")
        axes[0].set_ylabel("amplitude")
        axes[0].set_title(f"{event_id} (label: {row['label']})", fontsize=9)
        axes[1].imshow(log_mel, origin="lower", aspect="auto", cmap="magma",
                       extent=[0, t[-1], 0, log_mel.shape[0]])
        axes[1].set_ylabel("mel band")
        axes[2].bar(range(len(class_order)), p, color="tab:green")
        axes[2].set_xticks(range(len(class_order)), class_order, fontsize=8)
        axes[2].set_ylim(0, 1)
        axes[2].set_ylabel("probability")
        fig.tight_layout()
        fig_rel = f"report/figures/clip_{safe}.png"
        fig.savefig(run.path(fig_rel), dpi=110)
        plt.close(fig)
        rels.append(fig_rel)
    return rels


def emit_report(run) -> list[str]:
    from .corpus import Corpus

    (run.path("report/tables")).mkdir(parents=True, exist_ok=True)
    (run.path("report/figures")).mkdir(parents=True, exist_ok=True)
    corpus = Corpus.load(run.require("corpus/corpus.json"))

    rels = _cohort_table(run)
    metrics_dir = run.require("metrics")
    payloads = []
    for path in sorted(Path(metrics_dir).glob("*.json")):
        payloads.append(json.loads(path.read_text()))
    if not payloads:
        raise DataError("no metric reports found; run `lungsound evaluate` first")
    for payload in payloads:
        rels += _metric_tables(run, payload)
        rels += _curve_artifacts(run, corpus, payload)
    rels += _clip_showcase(run, corpus)
    return rels
