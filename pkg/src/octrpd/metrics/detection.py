"""Pixel overlap (Dice) and lesion-level detection (connected components, FROC)."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from ..data import DRUSEN, RPD1, RPD2TO4
from .classification import MetricError

# named lesion groups; "rpd" pools every RPD stage
CATEGORY_GROUPS = {
    "drusen": (DRUSEN,),
    "rpd1": (RPD1,),
    "rpd2to4": (RPD2TO4,),
    "rpd": (RPD1, RPD2TO4),
}

_STRUCTURES = {
    "eight": np.ones((3, 3), dtype=bool),
    "four": ndimage.generate_binary_structure(2, 1),
}


def category_codes(category) -> tuple[int, ...]:
    if isinstance(category, str):
        try:
            return CATEGORY_GROUPS[category]
        except KeyError:
            raise MetricError(f"unknown category {category!r}") from None
    if isinstance(category, (int, np.integer)):
        return (int(category),)
    return tuple(int(c) for c in category)


def _binary(mask, category):
    return np.isin(np.asarray(mask), category_codes(category))


def dice(mask_a, mask_b, category) -> float:
    """2|A and B| / (|A| + |B|) for the pixels of ``category``; two empty masks give 1.0."""
    a = _binary(mask_a, category)
    b = _binary(mask_b, category)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def connected_components(plane, connectivity="eight"):
    """Label a 2-D binary plane; returns ``(labels, count)``."""
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise MetricError(f"expected a 2-D plane, got shape {plane.shape}")
    try:
        structure = _STRUCTURES[connectivity]
    except KeyError:
        raise MetricError(f"connectivity must be 'four' or 'eight', got {connectivity!r}") from None
    labels, count = ndimage.label(plane.astype(bool), structure=structure)
    return labels, int(count)


@dataclass(frozen=True)
class LesionMatch:
    detected: int
    missed: int
    false_positives: int

    @property
    def n_truth(self):
        return self.detected + self.missed


def match_lesions(pred_plane, truth_plane, category, connectivity="eight") -> LesionMatch:
    """A truth lesion is detected if any predicted pixel of the category touches it;
    a predicted component is a false positive if it touches no truth pixel."""
    p = _binary(pred_plane, category)
    t = _binary(truth_plane, category)
    if p.shape != t.shape:
        raise MetricError(f"shape mismatch {p.shape} vs {t.shape}")
    return _match_binary(p, t, connectivity)


def _match_binary(p, t, connectivity="eight") -> LesionMatch:
    tl, nt = connected_components(t, connectivity)
    pl, npred = connected_components(p, connectivity)
    hit_truth = np.unique(tl[p & t])
    hit_pred = np.unique(pl[p & t])
    detected = int(np.count_nonzero(hit_truth))
    fp = npred - int(np.count_nonzero(hit_pred))
    return LesionMatch(detected, nt - detected, fp)


@dataclass(frozen=True)
class FrocPoint:
    threshold: float
    avg_fp_per_scan: float
    sensitivity: float
    ci_low: float
    ci_high: float

    def to_json(self):
        return asdict(self)


def _bootstrap_sensitivity(detected, truth, n_boot, seed):
    """Percentile 95% CI of pooled sensitivity, resampling scans.

    ``detected`` is (n_scans, n_thresholds), ``truth`` (n_scans,). Replicate
    ``r`` draws from ``default_rng(seed + r)`` so any partition of replicates
    reproduces the same numbers.
    """
    n = truth.size
    reps = np.empty((n_boot, detected.shape[1]))
    for r in range(n_boot):
        idx = np.random.default_rng(seed + r).integers(0, n, size=n)
        tot = truth[idx].sum()
        reps[r] = detected[idx].sum(axis=0) / tot if tot else np.nan
    if np.isnan(reps).all():
        return np.full(detected.shape[1], np.nan), np.full(detected.shape[1], np.nan)
    lo, hi = np.nanpercentile(reps, [2.5, 97.5], axis=0)
    return lo, hi


def froc_counts(prob_maps, truth_masks, category, thresholds, connectivity="eight"):
    """Per-scan (detected, truth, fp) counts for every threshold."""
    from ..segmenter import mask_from_probs

    thresholds = [float(t) for t in thresholds]
    if any(b > a for a, b in zip(thresholds, thresholds[1:])):
        raise MetricError("thresholds must be sorted in descending order")
    n = len(prob_maps)
    if n < 1 or len(truth_masks) != n:
        raise MetricError("need one truth mask per probability map and at least one scan")
    codes = category_codes(category)
    det = np.zeros((n, len(thresholds)), dtype=np.int64)
    fps = np.zeros((n, len(thresholds)), dtype=np.int64)
    tot = np.zeros(n, dtype=np.int64)
    for i, (probs, truth) in enumerate(zip(prob_maps, truth_masks)):
        t = np.isin(truth, codes)
        tot[i] = connected_components(t, connectivity)[1]
        for j, thr in enumerate(thresholds):
            pred = np.isin(mask_from_probs(probs, thr), codes)
            m = _match_binary(pred, t, connectivity)
            det[i, j], fps[i, j] = m.detected, m.false_positives
    return det, tot, fps


def froc(prob_maps, truth_masks, category, thresholds, bootstrap_n=1000, seed=0,
         connectivity="eight") -> list[FrocPoint]:
    """Lesion sensitivity vs average false positives per B-scan along a threshold sweep."""
    det, tot, fps = froc_counts(prob_maps, truth_masks, category, thresholds, connectivity)
    return _froc_points(det, tot, fps, thresholds, bootstrap_n, seed)


def _froc_points(det, tot, fps, thresholds, bootstrap_n, seed):
    total = int(tot.sum())
    if total == 0:
        raise MetricError("no truth lesions of this category: sensitivity undefined")
    n = tot.size
    sens = det.sum(axis=0) / total
    fp_rate = fps.sum(axis=0) / n
    if bootstrap_n > 0:
        lo, hi = _bootstrap_sensitivity(det, tot, bootstrap_n, seed)
    else:
        lo, hi = sens.copy(), sens.copy()
    # percentile intervals are widened, if ever needed, to cover the point estimate
    lo = np.fmin(lo, sens)
    hi = np.fmax(hi, sens)
    return [FrocPoint(float(t), float(f), float(s), float(a), float(b))
            for t, f, s, a, b in zip(thresholds, fp_rate, sens, lo, hi)]


def froc_operating_point(pred_masks, truth_masks, category, bootstrap_n=1000, seed=0,
                         connectivity="eight") -> FrocPoint:
    """Single FROC point for hard label masks (e.g. one grader scored against another)."""
    codes = category_codes(category)
    n = len(pred_masks)
    det = np.zeros((n, 1), dtype=np.int64)
    fps = np.zeros((n, 1), dtype=np.int64)
    tot = np.zeros(n, dtype=np.int64)
    for i, (p, t) in enumerate(zip(pred_masks, truth_masks)):
        m = _match_binary(np.isin(p, codes), np.isin(t, codes), connectivity)
        det[i, 0], fps[i, 0], tot[i] = m.detected, m.false_positives, m.n_truth
    return _froc_points(det, tot, fps, [float("nan")], bootstrap_n, seed)[0]


def mean_dice(masks_a, masks_b, category) -> float:
    """Mean per-B-scan Dice between two aligned lists of label planes."""
    if len(masks_a) != len(masks_b) or not len(masks_a):
        raise MetricError("mask lists must be aligned and nonempty")
    return float(np.mean([dice(a, b, category) for a, b in zip(masks_a, masks_b)]))


def dice_table(model_masks, grader_masks: dict, categories=("drusen", "rpd", "rpd1", "rpd2to4")):
    """Mean Dice model-vs-grader and grader-vs-grader, one row per category."""
    names = list(grader_masks)
    table = {}
    for cat in categories:
        row = {f"model_vs_{g}": mean_dice(model_masks, grader_masks[g], cat) for g in names}
        row["model_vs_graders_mean"] = float(np.mean([row[f"model_vs_{g}"] for g in names]))
        pairs = list(itertools.combinations(names, 2))
        for a, b in pairs:
            row[f"{a}_vs_{b}"] = mean_dice(grader_masks[a], grader_masks[b], cat)
        if pairs:
            row["intergrader_mean"] = float(np.mean([row[f"{a}_vs_{b}"] for a, b in pairs]))
        table[cat] = row
    return table
