"""End-to-end staging of volumes and the plot-ready evaluation outputs."""

from __future__ import annotations

import csv
import enum
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, DatasetManifest, GradeLabel, LesionMask, save_mask
from .gates import EnsembleModel, GateThresholds, Task, ood_uncertainty, predict_gate, task_label
from .metrics import classification_report, pr_curve, roc_curve
from .metrics.classification import MetricError
from .metrics.detection import CATEGORY_GROUPS, _froc_points, dice, froc_counts
from .segmenter import SegEnsemble, mask_from_probs, predict_volume, quantify
from .tinynn import load_checkpoint

log = logging.getLogger(__name__)

VERDICTS_FILE = "verdicts.jsonl"
FAILURES_FILE = "failures.jsonl"
METRICS_FILE = "metrics.json"
SEG_DIR = "segmentations"
DEFAULT_SWEEP = tuple(round(1.0 - i / 20, 2) for i in range(20))  # 1.00 .. 0.05
FROC_CATEGORIES = ("drusen", "rpd", "rpd1", "rpd2to4")


class Stage(str, enum.Enum):
    REMOVED_UNGRADABLE = "removed_ungradable"
    REMOVED_OUTLIER = "removed_outlier"
    REMOVED_CONTROL = "removed_control"
    SEGMENTED = "segmented"


@dataclass(frozen=True)
class PipelineVerdict:
    volume_id: str
    stage_reached: Stage
    ungradable_prob: float
    ood_uncertainty: float
    lesion_prob: float | None = None
    lesion_areas: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "stage_reached", Stage(self.stage_reached))
        if (self.lesion_areas is not None) != (self.stage_reached == Stage.SEGMENTED):
            raise ValueError("lesion areas are present exactly when a volume is segmented")

    def to_json(self):
        return {"volume_id": self.volume_id, "stage_reached": self.stage_reached.value,
                "ungradable_prob": self.ungradable_prob, "ood_uncertainty": self.ood_uncertainty,
                "lesion_prob": self.lesion_prob, "lesion_areas": self.lesion_areas}


@dataclass(frozen=True)
class RunConfig:
    ungradable_model: str
    ood_model: str
    lesion_model: str
    seg_model: str
    thresholds: GateThresholds = GateThresholds()
    seg_threshold: float = 0.0
    froc_thresholds: tuple = DEFAULT_SWEEP
    out_dir: str = "run"
    seed: int = 0
    segment_all: bool = False
    bootstrap_n: int = 1000
    n_jobs: int = 1

    def __post_init__(self):
        sweep = tuple(float(t) for t in self.froc_thresholds)
        if any(not 0.0 <= t <= 1.0 for t in sweep) or any(b > a for a, b in zip(sweep, sweep[1:])):
            raise ValueError("froc_thresholds must lie in [0, 1] and be sorted descending")
        object.__setattr__(self, "froc_thresholds", sweep)
        if not 0.0 <= self.seg_threshold <= 1.0:
            raise ValueError("seg_threshold must be in [0, 1]")

    def to_json(self):
        return {"ungradable_model": str(self.ungradable_model), "ood_model": str(self.ood_model),
                "lesion_model": str(self.lesion_model), "seg_model": str(self.seg_model),
                "thresholds": self.thresholds.to_json(), "seg_threshold": self.seg_threshold,
                "froc_thresholds": list(self.froc_thresholds), "out_dir": str(self.out_dir),
                "seed": self.seed, "segment_all": self.segment_all,
                "bootstrap_n": self.bootstrap_n, "n_jobs": self.n_jobs}


@dataclass
class Models:
    ungradable: object
    ood: EnsembleModel
    lesion: object
    seg: SegEnsemble

    @classmethod
    def load(cls, cfg: RunConfig) -> "Models":
        paths = {"ungradable": cfg.ungradable_model, "ood": cfg.ood_model,
                 "lesion": cfg.lesion_model, "seg": cfg.seg_model}
        for name, p in paths.items():
            if not Path(p).exists():
                raise FileNotFoundError(f"missing {name} model artifact: {p}")
        return cls(load_checkpoint(cfg.ungradable_model), EnsembleModel.load(cfg.ood_model),
                   load_checkpoint(cfg.lesion_model), SegEnsemble.load(cfg.seg_model))


@dataclass
class EvalReport:
    classification: dict = field(default_factory=dict)
    froc: dict = field(default_factory=dict)
    dice: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def to_json(self):
        return {
            "classification": {k: v["metrics"] for k, v in self.classification.items()},
            "froc": {k: [p.to_json() for p in pts] for k, pts in self.froc.items()},
            "dice": self.dice,
            "stages": self.stages,
            "failures": self.failures,
        }


@dataclass
class _VolumeResult:
    verdict: PipelineVerdict | None
    grade: GradeLabel
    mask: np.ndarray | None = None
    froc: dict | None = None
    dice: dict | None = None
    error: str | None = None


def _process(manifest: DatasetManifest, entry, models: Models, cfg: RunConfig) -> _VolumeResult:
    vid = entry.volume
    try:
        vol = manifest.load(entry)
        truth = manifest.load_mask(entry, vol.shape)
    except (OSError, DataError, ValueError) as exc:
        return _VolumeResult(None, entry.grade, error=f"{type(exc).__name__}: {exc}")
    th = cfg.thresholds
    # both quality gates always run; either one removes the volume
    p_ung = float(predict_gate(models.ungradable, vol)[1])
    unc = float(ood_uncertainty(models.ood, vol))
    if p_ung >= th.ungradable_prob_threshold:
        return _VolumeResult(PipelineVerdict(vid, Stage.REMOVED_UNGRADABLE, p_ung, unc), entry.grade)
    if unc >= th.ood_uncertainty_threshold:
        return _VolumeResult(PipelineVerdict(vid, Stage.REMOVED_OUTLIER, p_ung, unc), entry.grade)
    p_les = float(predict_gate(models.lesion, vol)[1])
    if p_les < th.lesion_prob_threshold and not cfg.segment_all:
        return _VolumeResult(PipelineVerdict(vid, Stage.REMOVED_CONTROL, p_ung, unc, p_les),
                             entry.grade)
    probs = predict_volume(models.seg, vol)
    mask = mask_from_probs(probs, cfg.seg_threshold)
    areas = quantify(mask, vol).to_json()
    res = _VolumeResult(PipelineVerdict(vid, Stage.SEGMENTED, p_ung, unc, p_les, areas),
                        entry.grade, mask=mask)
    if truth is not None:
        res.froc = {cat: froc_counts(probs, truth.labels, cat, cfg.froc_thresholds)
                    for cat in FROC_CATEGORIES}
        res.dice = {cat: [dice(p, t, cat) for p, t in zip(mask, truth.labels)]
                    for cat in FROC_CATEGORIES}
    return res


def _cls_entry(scores, labels, threshold):
    scores, labels = np.asarray(scores, float), np.asarray(labels, int)
    try:
        metrics = classification_report(scores, labels, threshold)
    except MetricError as exc:
        return {"metrics": {"skipped": str(exc), "n": int(scores.size)}}
    return {"metrics": metrics, "roc": roc_curve(scores, labels), "pr": pr_curve(scores, labels)}


def _classification(results, th: GateThresholds):
    ung, ood, les = ([], []), ([], []), ([], [])
    for r in results:
        v = r.verdict
        if v is None:
            continue
        y = task_label(Task.UNGRADABLE_VS_REST, r.grade)
        if y is not None:
            ung[0].append(v.ungradable_prob)
            ung[1].append(y)
            ood[0].append(v.ood_uncertainty)
            ood[1].append(y)
        y = task_label(Task.LESION_VS_CONTROL, r.grade)
        if y is not None and v.lesion_prob is not None:
            les[0].append(v.lesion_prob)
            les[1].append(y)
    out = {}
    for name, (s, y), thr in (("ungradable", ung, th.ungradable_prob_threshold),
                              ("ood", ood, th.ood_uncertainty_threshold),
                              ("lesion", les, th.lesion_prob_threshold)):
        if s:
            out[name] = _cls_entry(s, y, thr)
    return out


def _froc_report(results, cfg: RunConfig):
    out = {}
    seg = [r for r in results if r.froc is not None]
    if not seg:
        return out
    for k, cat in enumerate(FROC_CATEGORIES):
        det = np.concatenate([r.froc[cat][0] for r in seg])
        tot = np.concatenate([r.froc[cat][1] for r in seg])
        fps = np.concatenate([r.froc[cat][2] for r in seg])
        if tot.sum() == 0:
            continue
        out[cat] = _froc_points(det, tot, fps, cfg.froc_thresholds, cfg.bootstrap_n, cfg.seed + k)
    return out


def run_pipeline(manifest: DatasetManifest, cfg: RunConfig, models: Models | None = None,
                 write=True):
    """Stage every volume, then assemble the evaluation report; returns (verdicts, report)."""
    models = models if models is not None else Models.load(cfg)
    entries = list(manifest)
    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            results = list(pool.map(lambda e: _process(manifest, e, models, cfg), entries))
    else:
        results = [_process(manifest, e, models, cfg) for e in entries]

    report = EvalReport()
    report.failures = [{"volume_id": e.volume, "error": r.error}
                       for e, r in zip(entries, results) if r.error is not None]
    verdicts = [r.verdict for r in results if r.verdict is not None]
    report.stages = {s.value: sum(v.stage_reached == s for v in verdicts) for s in Stage}
    report.stages["failed"] = len(report.failures)
    report.classification = _classification(results, cfg.thresholds)
    report.froc = _froc_report(results, cfg)
    dice_rows = [r.dice for r in results if r.dice is not None]
    if dice_rows:
        report.dice = {cat: float(np.mean(np.concatenate([d[cat] for d in dice_rows])))
                       for cat in FROC_CATEGORIES}
    if write:
        write_outputs(cfg.out_dir, entries, results, verdicts, report)
    return verdicts, report


def _atomic_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _seg_name(volume_id):
    return volume_id.replace("/", "_").replace("\\", "_").strip("._") or "volume"


def write_outputs(out_dir, entries, results, verdicts, report: EvalReport):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for e, r in zip(entries, results):
        if r.mask is not None:
            save_mask(LesionMask(r.mask), out / SEG_DIR / f"{_seg_name(e.volume)}.raw")
    _atomic_text(out / VERDICTS_FILE,
                 "".join(json.dumps(v.to_json(), sort_keys=True) + "\n" for v in verdicts))
    _atomic_text(out / FAILURES_FILE,
                 "".join(json.dumps(f, sort_keys=True) + "\n" for f in report.failures))
    _atomic_text(out / METRICS_FILE, json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    emit_plot_data(report, out)


# ---------------------------------------------------------------------------
# plot data

ROC_HEADER = ("model", "threshold", "fpr", "tpr")
PR_HEADER = ("model", "threshold", "recall", "precision")
FROC_HEADER = ("threshold", "avg_fp_per_scan", "sensitivity", "ci_low", "ci_high")


def _fmt(v):
    return repr(float(v))


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def write_froc_csv(points, path):
    _write_csv(path, FROC_HEADER, [[_fmt(p.threshold), _fmt(p.avg_fp_per_scan), _fmt(p.sensitivity),
                                    _fmt(p.ci_low), _fmt(p.ci_high)] for p in points])


def emit_plot_data(report: EvalReport, out_dir):
    """roc.csv and pr.csv (one row per curve point, keyed by model) and froc_<category>.csv."""
    out = Path(out_dir)
    roc_rows, pr_rows = [], []
    for name in sorted(report.classification):
        entry = report.classification[name]
        if "roc" in entry:
            roc_rows += [[name, _fmt(t), _fmt(f), _fmt(p)] for t, f, p in zip(*entry["roc"])]
            pr_rows += [[name, _fmt(t), _fmt(r), _fmt(p)] for t, r, p in zip(*entry["pr"])]
    _write_csv(out / "roc.csv", ROC_HEADER, roc_rows)
    _write_csv(out / "pr.csv", PR_HEADER, pr_rows)
    written = []
    for cat in sorted(report.froc):
        path = out / f"froc_{cat}.csv"
        write_froc_csv(report.froc[cat], path)
        written.append(path)
    return [out / "roc.csv", out / "pr.csv"] + written


def read_curve_csv(path, model=None):
    """Columns of a roc/pr/froc CSV as float arrays (optionally one model's rows)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if model is not None:
        rows = [r for r in rows if r.get("model") == model]
    cols = rows[0].keys() if rows else []
    return {c: np.array([float(r[c]) for r in rows]) for c in cols if c != "model"}
