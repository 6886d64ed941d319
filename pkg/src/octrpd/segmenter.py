"""B-scan lesion segmentation: participant-disjoint folds, U-Net ensemble, quantification."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import apply_draw, sample_params
from .data import BACKGROUND, LESION_CODES, CATEGORY_NAMES, LesionMask, OctVolume
from .metrics.detection import CATEGORY_GROUPS
from .tinynn import MiniNet, build_unet2d, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingError, TrainResult, fit

log = logging.getLogger(__name__)

N_CATEGORIES = 4
SEG_MANIFEST = "segmenter.json"
PROB_HEADER = "probs.json"
PROB_PAYLOAD = "probs.raw"
INFER_CHUNK = 16


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray
    participants: tuple = ()

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64)
        object.__setattr__(self, "assignments", a)
        if self.k < 2:
            raise ValueError("need k >= 2 folds")
        if a.size and (a.min() < 0 or a.max() >= self.k):
            raise ValueError("fold index out of range")
        if np.unique(a).size != self.k:
            raise ValueError("every fold must be nonempty")

    def train_index(self, fold):
        return np.flatnonzero(self.assignments != fold)

    def val_index(self, fold):
        return np.flatnonzero(self.assignments == fold)


def plan_folds(participant_ids, k=5, seed=0) -> FoldPlan:
    """Deal shuffled participants round-robin into ``k`` folds (sizes differ by <= 1)."""
    pids = np.asarray([str(p) for p in participant_ids])
    uniq = np.unique(pids)
    if uniq.size < k:
        raise ValueError(f"{uniq.size} participants cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(uniq.size)
    fold_of = {uniq[j]: i % k for i, j in enumerate(order)}
    return FoldPlan(k, np.array([fold_of[p] for p in pids], dtype=np.int64), tuple(uniq[order]))


# ---------------------------------------------------------------------------
# discretization and quantification


def mask_from_probs(probs, threshold=0.0) -> np.ndarray:
    """Label map from (..., 4, H, W) probabilities.

    Threshold 0 is a plain argmax over all four categories. A positive
    threshold labels a pixel with its most probable lesion category when
    that probability reaches the threshold, else background. Ties go to the
    lowest code.
    """
    p = np.asarray(probs)
    if p.shape[-3] != N_CATEGORIES:
        raise ValueError(f"expected {N_CATEGORIES} category maps, got shape {p.shape}")
    if threshold <= 0:
        return p.argmax(axis=-3).astype(np.uint8)
    lesion = p[..., 1:, :, :]
    best = lesion.argmax(axis=-3)
    top = np.take_along_axis(lesion, best[..., None, :, :], axis=-3)[..., 0, :, :]
    return np.where(top >= threshold, best + 1, BACKGROUND).astype(np.uint8)


@dataclass(frozen=True)
class LesionAreas:
    """``pixels[name]`` is per-B-scan pixel counts; ``enface_mm2[name]`` the volume total."""

    pixels: dict
    enface_mm2: dict

    def to_json(self):
        return {"pixels": {k: [int(v) for v in arr] for k, arr in self.pixels.items()},
                "enface_mm2": {k: float(v) for k, v in self.enface_mm2.items()}}


def quantify(mask, geometry) -> LesionAreas:
    """Pixel counts per B-scan and en-face area from lesion-bearing A-scan columns.

    ``geometry`` is an :class:`OctVolume` (or anything with ``shape`` and
    ``fov_mm``). Each column holding a pixel of the category contributes
    (fov_x / width) * (fov_y / n_bscans) mm^2.
    """
    labels = mask.labels if isinstance(mask, LesionMask) else np.asarray(mask)
    shape = tuple(geometry.shape)
    if labels.shape != shape:
        raise ValueError(f"mask shape {labels.shape} does not match volume {shape}")
    n, _, w = shape
    fov_y, fov_x = (float(v) for v in geometry.fov_mm)
    col_area = (fov_x / w) * (fov_y / n)
    pixels, enface = {}, {}
    for name, codes in CATEGORY_GROUPS.items():
        hit = np.isin(labels, codes)
        pixels[name] = hit.sum(axis=(1, 2)).astype(np.int64)
        enface[name] = float(hit.any(axis=1).sum()) * col_area
    return LesionAreas(pixels, enface)


# ---------------------------------------------------------------------------
# ensemble


def _check_codes(masks):
    m = np.asarray(masks)
    if m.size and (m.min() < 0 or m.max() > max(LESION_CODES)):
        bad = sorted(set(np.unique(m).tolist()) - {0, *LESION_CODES})
        raise ValueError(f"mask codes {bad} outside 0..{max(LESION_CODES)}")
    return m.astype(np.int64)


def _arch_key(net):
    kw = dict(net.arch.get("kwargs", {}))
    for k in ("seed", "input_dims"):
        kw.pop(k, None)
    return net.arch.get("builder"), json.dumps(kw, sort_keys=True)


@dataclass
class SegEnsemble:
    members: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("a segmentation ensemble needs k >= 2 members")
        keys = [_arch_key(m) for m in self.members]
        if any(k != keys[0] for k in keys):
            raise ValueError("ensemble members must share one architecture")

    def __len__(self):
        return len(self.members)

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        files = []
        for i, m in enumerate(self.members):
            name = f"fold_{i}.ckpt"
            save_checkpoint(m, path / name)
            files.append(name)
        doc = {"members": files, "meta": self.meta}
        (path / SEG_MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SegEnsemble":
        path = Path(path)
        doc = json.loads((path / SEG_MANIFEST).read_text())
        return cls([load_checkpoint(path / f) for f in doc["members"]], doc.get("meta", {}))


def _forward_planes(net: MiniNet, planes):
    planes = np.asarray(planes, dtype=np.float64)
    out = [net.forward(planes[i:i + INFER_CHUNK, None], training=False)
           for i in range(0, planes.shape[0], INFER_CHUNK)]
    return np.concatenate(out, axis=0)


def predict_planes(members, planes) -> np.ndarray:
    """(n, 4, H, W) ensemble-mean probabilities for (n, H, W) normalized B-scans."""
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim != 3:
        raise ValueError(f"expected (n, H, W) B-scans, got shape {planes.shape}")
    members = members.members if isinstance(members, SegEnsemble) else list(members)
    acc = None
    for m in members:
        p = _forward_planes(m, planes)
        acc = p if acc is None else acc + p
    return acc / len(members)


def predict_bscan(ens, bscan) -> np.ndarray:
    """(4, H, W) member-averaged probabilities for one normalized B-scan."""
    b = np.asarray(bscan, dtype=np.float64)
    if b.ndim != 2:
        raise ValueError(f"expected one (H, W) B-scan, got shape {b.shape}")
    return predict_planes(ens, b[None])[0]


def predict_volume(ens, vol: OctVolume) -> np.ndarray:
    return predict_planes(ens, vol.normalized())


def segment_volume(ens, vol: OctVolume, threshold=0.0) -> LesionMask:
    return LesionMask(mask_from_probs(predict_volume(ens, vol), threshold))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SegTrainOptions:
    patch: tuple = (32, 64)
    lesion_patch_fraction: float = 0.5
    depth: int = 3
    base_width: int = 8
    n_convs: int = 2

    def arch_kwargs(self):
        return {"depth": self.depth, "base_width": self.base_width, "n_convs": self.n_convs}


def foreground_dice(pred, truth) -> float:
    """Mean over the three lesion codes of pooled Dice; a code absent from both scores 1."""
    scores = []
    for code in LESION_CODES:
        a, b = pred == code, truth == code
        denom = int(a.sum()) + int(b.sum())
        scores.append(1.0 if denom == 0 else 2.0 * int((a & b).sum()) / denom)
    return float(np.mean(scores))


def _crop_sampler(images, masks, patch, lesion_fraction, rng):
    n, h, w = images.shape
    ph, pw = min(patch[0], h), min(patch[1], w)
    lesion_px = [np.argwhere(m > 0) for m in masks]
    has_lesion = np.flatnonzero([p.shape[0] > 0 for p in lesion_px])

    def crop():
        if has_lesion.size and rng.random() < lesion_fraction:
            i = int(has_lesion[rng.integers(has_lesion.size)])
            r, c = lesion_px[i][rng.integers(lesion_px[i].shape[0])]
            r0 = int(np.clip(r - rng.integers(ph), 0, h - ph))
            c0 = int(np.clip(c - rng.integers(pw), 0, w - pw))
        else:
            i = int(rng.integers(n))
            r0, c0 = int(rng.integers(h - ph + 1)), int(rng.integers(w - pw + 1))
        return images[i, r0:r0 + ph, c0:c0 + pw], masks[i, r0:r0 + ph, c0:c0 + pw]

    return crop


def train_fold(images, masks, train_idx, val_idx, cfg: TrainConfig, opts=SegTrainOptions(),
               fold=0) -> TrainResult:
    """One U-Net on ``train_idx`` B-scans, checkpointed on held-out foreground Dice."""
    seed = cfg.seed + fold
    rng = np.random.default_rng(seed + 1)
    crop = _crop_sampler(images[train_idx], masks[train_idx], opts.patch,
                         opts.lesion_patch_fraction, rng)
    net = build_unet2d(input_dims=tuple(min(p, s) for p, s in zip(opts.patch, images.shape[1:])),
                       n_categories=N_CATEGORIES, seed=seed, **opts.arch_kwargs())
    xv, yv = images[val_idx], masks[val_idx]

    def next_batch(_it):
        xs, ys = [], []
        for _ in range(cfg.batch_size):
            x, y = crop()
            x, y = apply_draw(x, sample_params(cfg.augment, rng), mask=y)
            xs.append(x)
            ys.append(y)
        return np.stack(xs)[:, None], np.stack(ys)

    def evaluate(n):
        return foreground_dice(mask_from_probs(_forward_planes(n, xv)), yv)

    head = [{"event": "start", "fold": fold, "seed": seed, "n_train": int(len(train_idx)),
             "n_val": int(len(val_idx))}]
    return fit(net, next_batch, evaluate, cfg, "val_dice", head)


def train_seg(images, masks, plan: FoldPlan, cfg: TrainConfig = TrainConfig(),
              opts=SegTrainOptions(), log_dir=None):
    """k fold models, each trained on the other k-1 folds; returns (SegEnsemble, results).

    ``images`` are normalized (n, H, W) B-scans, ``masks`` their (n, H, W) labels.
    """
    images = np.asarray(images, dtype=np.float64)
    masks = _check_codes(masks)
    if images.shape != masks.shape or images.ndim != 3:
        raise ValueError(f"images {images.shape} and masks {masks.shape} must be aligned (n, H, W)")
    if plan.assignments.size != images.shape[0]:
        raise ValueError("fold plan does not cover the B-scan set")
    depth = opts.depth
    if any(s % 2 ** depth for s in images.shape[1:]) or any(p % 2 ** depth for p in opts.patch):
        raise ValueError(f"B-scan and patch extents must be divisible by 2**{depth}")
    present = set(np.unique(masks).tolist())
    for code in LESION_CODES:
        if code not in present:
            msg = f"category {CATEGORY_NAMES[code]} is absent from all training masks"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            log.warning(msg)
    results = []
    for fold in range(plan.k):
        try:
            res = train_fold(images, masks, plan.train_index(fold), plan.val_index(fold),
                             cfg, opts, fold)
        except TrainingError as exc:
            raise TrainingError(f"fold {fold}: {exc}") from exc
        if log_dir is not None:
            res.write_log(Path(log_dir) / f"fold_{fold}.jsonl")
        results.append(res)
    meta = {"k": plan.k, "seed": cfg.seed, "patch": list(opts.patch),
            "best_iterations": [r.best_iteration for r in results],
            "best_val_dice": [r.best_score for r in results]}
    return SegEnsemble([r.net for r in results], meta), results


# ---------------------------------------------------------------------------
# probability-map export


def save_prob_maps(probs, path, volume_id=None):
    """Write (n, 4, H, W) maps as little-endian float32 plus a JSON header."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    p = np.asarray(probs, dtype="<f4")
    header = {"shape": list(p.shape), "dtype": "float32", "byte_order": "little",
              "categories": [CATEGORY_NAMES[c] for c in range(N_CATEGORIES)],
              "volume_id": volume_id}
    (path / PROB_PAYLOAD).write_bytes(p.tobytes(order="C"))
    (path / PROB_HEADER).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def load_prob_maps(path) -> np.ndarray:
    path = Path(path)
    header = json.loads((path / PROB_HEADER).read_text())
    raw = np.frombuffer((path / PROB_PAYLOAD).read_bytes(), dtype="<f4")
    shape = tuple(header["shape"])
    if raw.size != int(np.prod(shape)):
        raise ValueError(f"payload holds {raw.size} values, header expects {shape}")
    return raw.reshape(shape).astype(np.float64)
