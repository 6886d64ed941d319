"""Volume-level gates: ungradable classifier, OOD deep ensemble, lesion classifier."""

from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .augment import augment_array
from .data import DatasetManifest, GradeLabel, OctVolume
from .metrics import cohens_kappa, confusion_at, roc_curve
from .metrics.classification import MetricError, _binary_inputs
from .tinynn import MiniNet, build_classifier3d, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingError, TrainResult, fit

log = logging.getLogger(__name__)

ENSEMBLE_MANIFEST = "ensemble.json"
DEFAULT_MEMBERS = 10
EVAL_CHUNK = 8


class Task(str, enum.Enum):
    UNGRADABLE_VS_REST = "ungradable_vs_rest"
    LESION_VS_CONTROL = "lesion_vs_control"


# grade -> class index; grades absent from a mapping never reach a batch
TASK_LABELS = {
    Task.UNGRADABLE_VS_REST: {GradeLabel.UNGRADABLE: 1, GradeLabel.NO_LESION: 0,
                              GradeLabel.MORE_THAN_ONE: 0},
    Task.LESION_VS_CONTROL: {GradeLabel.MORE_THAN_ONE: 1, GradeLabel.NO_LESION: 0},
}


def task_label(task, grade):
    """Class index of ``grade`` for ``task``, or None if the grade is excluded."""
    return TASK_LABELS[Task(task)].get(GradeLabel(int(grade)))


def _items(dataset):
    """(volume, grade) pairs from a manifest or an iterable of pairs."""
    if isinstance(dataset, DatasetManifest):
        return [(dataset.load(e), e.grade) for e in dataset]
    return list(dataset)


def task_arrays(dataset, task, name="train"):
    """Normalized (n, B, H, W) stack and class labels; excluded grades are dropped and logged."""
    xs, ys, dropped = [], [], {}
    for vol, grade in _items(dataset):
        y = task_label(task, grade)
        if y is None:
            g = int(grade)
            dropped[g] = dropped.get(g, 0) + 1
            continue
        xs.append(vol.normalized() if isinstance(vol, OctVolume) else np.asarray(vol, np.float64))
        ys.append(y)
    if dropped:
        log.info("%s set, task %s: excluded grades %s", name, Task(task).value,
                 {k: dropped[k] for k in sorted(dropped)})
    if not ys:
        raise TrainingError(f"{name} set has no volumes for task {Task(task).value}")
    return np.stack(xs), np.asarray(ys, dtype=np.int64), dropped


# ---------------------------------------------------------------------------
# sampling


def balanced_batches(labels, batch_size, seed, n_categories=None):
    """Infinite stream of index batches that visit every category equally often.

    Slots cycle through the categories in a freshly shuffled order every C
    slots; within a category, indices are drawn from a reshuffled permutation,
    so the minority class is resampled once per pass over it.
    """
    labels = np.asarray(labels).ravel()
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    cats = np.arange(n_categories) if n_categories is not None else np.unique(labels)
    pools = [np.flatnonzero(labels == c) for c in cats]
    for c, p in zip(cats, pools):
        if p.size == 0:
            raise ValueError(f"category {c} is empty")
    if not pools:
        raise ValueError("no samples")
    rng = np.random.default_rng(seed)
    perms = [rng.permutation(p) for p in pools]
    pos = [0] * len(pools)
    order, k = [], 0
    while True:
        batch = np.empty(batch_size, dtype=np.int64)
        for j in range(batch_size):
            if k == len(order):
                order, k = list(rng.permutation(len(pools))), 0
            c = order[k]
            k += 1
            if pos[c] == perms[c].size:
                perms[c], pos[c] = rng.permutation(pools[c]), 0
            batch[j] = perms[c][pos[c]]
            pos[c] += 1
        yield batch


# ---------------------------------------------------------------------------
# training and inference


def predict_arrays(net: MiniNet, x) -> np.ndarray:
    """Class probabilities for a (n, B, H, W) stack of normalized volumes."""
    x = np.asarray(x, dtype=np.float64)
    expected = getattr(net, "input_shape", None)
    if expected is not None and tuple(x.shape[1:]) != tuple(expected[1:]):
        raise ValueError(f"volume shape {x.shape[1:]} does not match network input {expected[1:]}")
    out = [net.forward(x[i:i + EVAL_CHUNK, None], training=False)
           for i in range(0, x.shape[0], EVAL_CHUNK)]
    return np.concatenate(out, axis=0)


def predict_gate(net: MiniNet, vol) -> np.ndarray:
    """Per-category probabilities for one volume."""
    x = vol.normalized() if isinstance(vol, OctVolume) else np.asarray(vol, np.float64)
    return predict_arrays(net, x[None])[0]


def _kappa_at_half(net, x, y):
    probs = predict_arrays(net, x)
    return cohens_kappa((probs[:, 1] >= 0.5).astype(int), y)


def train_gate(train_set, val_set, task, cfg: TrainConfig = TrainConfig(), arch_kwargs=None,
               log_path=None) -> TrainResult:
    """Train one volume classifier for ``task``; returns the best-kappa checkpoint and log."""
    task = Task(task)
    xtr, ytr, dtr = task_arrays(train_set, task, "train")
    xva, yva, dva = task_arrays(val_set, task, "val")
    kwargs = {"input_dims": tuple(xtr.shape[1:]), "n_categories": 2}
    kwargs.update(arch_kwargs or {})
    kwargs["seed"] = cfg.seed
    net = build_classifier3d(**kwargs)
    stream = balanced_batches(ytr, cfg.batch_size, cfg.seed + 1, n_categories=2)
    aug_rng = np.random.default_rng(cfg.seed + 2)

    def next_batch(_it):
        idx = next(stream)
        xb = np.stack([augment_array(xtr[i], cfg.augment, aug_rng) for i in idx])
        return xb[:, None], ytr[idx]

    head = [{"event": "start", "task": task.value, "seed": cfg.seed,
             "n_train": int(ytr.size), "n_val": int(yva.size),
             "excluded_train": {str(k): v for k, v in sorted(dtr.items())},
             "excluded_val": {str(k): v for k, v in sorted(dva.items())}}]
    result = fit(net, next_batch, lambda n: _kappa_at_half(n, xva, yva), cfg, "val_kappa", head)
    if log_path is not None:
        result.write_log(log_path)
    return result


@dataclass
class EnsembleModel:
    members: list
    member_seeds: list

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least 2 members")
        if len(self.members) != len(self.member_seeds):
            raise ValueError("one seed per member")
        if len(set(self.member_seeds)) != len(self.member_seeds):
            raise ValueError("member seeds must be distinct")
        arch = [_arch_key(m) for m in self.members]
        if any(a != arch[0] for a in arch):
            raise ValueError("ensemble members must share one architecture")

    def __len__(self):
        return len(self.members)

    def member_probs(self, x) -> np.ndarray:
        """(members, n, C) probabilities for a stack of normalized volumes."""
        return np.stack([predict_arrays(m, x) for m in self.members])

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        files = []
        for i, m in enumerate(self.members):
            name = f"member_{i:02d}.ckpt"
            save_checkpoint(m, path / name)
            files.append(name)
        doc = {"members": files, "member_seeds": [int(s) for s in self.member_seeds]}
        (path / ENSEMBLE_MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "EnsembleModel":
        path = Path(path)
        doc = json.loads((path / ENSEMBLE_MANIFEST).read_text())
        return cls([load_checkpoint(path / f) for f in doc["members"]], list(doc["member_seeds"]))


def _arch_key(net):
    kw = dict(net.arch.get("kwargs", {}))
    kw.pop("seed", None)
    return net.arch.get("builder"), json.dumps(kw, sort_keys=True)


def train_ensemble(train_set, val_set, task, cfg: TrainConfig = TrainConfig(),
                   n_members=DEFAULT_MEMBERS, arch_kwargs=None, n_jobs=1):
    """Independent members with seeds ``cfg.seed + i``; returns (EnsembleModel, [TrainResult])."""
    if n_members < 2:
        raise ValueError("an ensemble needs at least 2 members")
    task = Task(task)
    train_items, val_items = _items(train_set), _items(val_set)
    seeds = [cfg.seed + i for i in range(n_members)]

    def one(seed):
        return train_gate(train_items, val_items, task, cfg.with_seed(seed), arch_kwargs)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]
    return EnsembleModel([r.net for r in results], seeds), results


def ensemble_variance(member_probs) -> np.ndarray:
    """Mean over categories of the population variance across members.

    ``member_probs`` is (members, ..., C); the result drops the first and last axes.
    """
    p = np.asarray(member_probs, dtype=np.float64)
    if p.shape[0] < 2:
        raise ValueError("uncertainty needs at least 2 members")
    # shifting by one member leaves the variance unchanged and makes exact agreement exactly 0
    return (p - p[:1]).var(axis=0, ddof=0).mean(axis=-1)


def ood_uncertainty(ens: EnsembleModel, vol) -> float:
    x = vol.normalized() if isinstance(vol, OctVolume) else np.asarray(vol, np.float64)
    return float(ensemble_variance(ens.member_probs(x[None]))[0])


# ---------------------------------------------------------------------------
# thresholds


@dataclass(frozen=True)
class GateThresholds:
    ungradable_prob_threshold: float = 0.5
    ood_uncertainty_threshold: float = 0.0
    lesion_prob_threshold: float = 0.5

    def __post_init__(self):
        for name in ("ungradable_prob_threshold", "lesion_prob_threshold"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not float(self.ood_uncertainty_threshold) >= 0.0:
            raise ValueError("ood_uncertainty_threshold must be >= 0")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def parse_policy(policy):
    """'youden', 'sens_at:0.967' / ('sens_at', 0.967), 'spec_at:0.9'."""
    if isinstance(policy, str):
        name, _, arg = policy.partition(":")
        if "(" in name:
            name, _, arg = policy.partition("(")
            arg = arg.rstrip(")")
        value = float(arg) if arg else None
    else:
        name, value = policy
    if name == "youden":
        return name, None
    if name in ("sens_at", "spec_at") and value is not None and 0.0 <= value <= 1.0:
        return name, float(value)
    raise ValueError(f"unknown threshold policy {policy!r}")


def calibrate_threshold(scores, labels, policy="youden") -> float:
    """Score cutoff (``score >= t`` is positive) chosen on validation data.

    Candidates are the distinct scores. ``youden`` maximizes sens + spec - 1;
    ``sens_at:x`` takes the highest cutoff whose sensitivity is >= x;
    ``spec_at:x`` the lowest cutoff whose specificity is >= x. Ties go to the
    higher-specificity (larger) cutoff.
    """
    try:
        s, y = _binary_inputs(scores, labels)
    except MetricError as exc:
        raise ValueError(f"cannot calibrate: {exc}") from None
    name, value = parse_policy(policy)
    thr, fpr, tpr = roc_curve(s, y)
    thr, spec, sens = thr[1:], 1.0 - fpr[1:], tpr[1:]
    eps = 1e-12
    if name == "youden":
        j = sens + spec - 1.0
        k = int(np.flatnonzero(j >= j.max() - eps)[0])
    elif name == "sens_at":
        k = int(np.flatnonzero(sens >= value - eps)[0])
    else:
        ok = np.flatnonzero(spec >= value - eps)
        k = int(ok[-1]) if ok.size else 0
    return float(thr[k])


def calibrate_thresholds(val_predictions: dict, val_labels: dict, policy="youden") -> GateThresholds:
    """Thresholds for whichever of 'ungradable', 'ood', 'lesion' are supplied."""
    policies = policy if isinstance(policy, dict) else {}
    out = {}
    for key, field in (("ungradable", "ungradable_prob_threshold"),
                       ("ood", "ood_uncertainty_threshold"),
                       ("lesion", "lesion_prob_threshold")):
        if key in val_predictions:
            pol = policies.get(key, "youden") if policies else policy
            out[field] = calibrate_threshold(val_predictions[key], val_labels[key], pol)
    for field in ("ungradable_prob_threshold", "lesion_prob_threshold"):
        if field in out:
            out[field] = float(np.clip(out[field], 0.0, 1.0))
    if "ood_uncertainty_threshold" in out:
        out["ood_uncertainty_threshold"] = max(0.0, out["ood_uncertainty_threshold"])
    return GateThresholds(**out)


def operating_point(scores, labels, threshold):
    cc = confusion_at(scores, labels, threshold)
    return {"tp": cc.tp, "fp": cc.fp, "tn": cc.tn, "fn": cc.fn}
