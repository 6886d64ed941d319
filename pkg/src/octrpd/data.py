"""Core domain types and their on-disk formats.

A volume lives in a directory holding ``meta.json`` and ``volume.raw``
(uint8, B-scan major: ``[bscan][row][col]``). A lesion mask is a sibling
``mask.raw`` with the same shape and order. A manifest is one JSON file whose
entry paths are resolved relative to the manifest's own directory.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

META_NAME = "meta.json"
VOLUME_NAME = "volume.raw"
MASK_NAME = "mask.raw"

FULL_SCALE_BSCANS = 128
FULL_SCALE_WIDTH = 512
DESK_SHAPE = (16, 64, 128)
DEFAULT_FOV_MM = (6.0, 6.0)

BACKGROUND, DRUSEN, RPD1, RPD2TO4 = 0, 1, 2, 3
LESION_CODES = (DRUSEN, RPD1, RPD2TO4)
CATEGORY_NAMES = {BACKGROUND: "background", DRUSEN: "drusen", RPD1: "rpd1", RPD2TO4: "rpd2to4"}

SPLITS = ("train", "val", "test", "unassigned")


class DataError(ValueError):
    """Raised when a file or object violates a data-model contract."""


class Eye(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"


class GradeLabel(enum.IntEnum):
    """Volume-level grading scale."""

    NO_LESION = 1
    ONE_LESION = 2
    MORE_THAN_ONE = 3
    QUESTIONABLE = 4
    UNGRADABLE = 5


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class OctVolume:
    participant_id: str
    eye: Eye
    voxels: np.ndarray
    fov_mm: tuple[float, float] = DEFAULT_FOV_MM

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise DataError(f"voxels must be 3-D, got shape {vox.shape}")
        n, h, w = vox.shape
        if n < 1 or h < 8 or w < 8:
            raise DataError(f"volume shape {vox.shape} below minimum (1, 8, 8)")
        if vox.dtype != np.uint8:
            if vox.size and (vox.min() < 0 or vox.max() > 255):
                raise DataError("voxel intensities must fit in uint8")
        fov = tuple(float(v) for v in self.fov_mm)
        if len(fov) != 2 or min(fov) <= 0:
            raise DataError(f"fov_mm must be two positive reals, got {self.fov_mm!r}")
        object.__setattr__(self, "voxels", _frozen(vox))
        object.__setattr__(self, "fov_mm", fov)
        object.__setattr__(self, "eye", Eye(self.eye))
        object.__setattr__(self, "participant_id", str(self.participant_id))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def n_bscans(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]

    def with_voxels(self, voxels: np.ndarray) -> "OctVolume":
        return replace(self, voxels=voxels)

    def normalized(self) -> np.ndarray:
        """Intensities as float64 in [0, 1]."""
        return self.voxels.astype(np.float64) / 255.0

    def meta(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "eye": self.eye.value,
            "n_bscans": self.n_bscans,
            "height": self.height,
            "width": self.width,
            "fov_mm": list(self.fov_mm),
        }

    def __eq__(self, other):
        if not isinstance(other, OctVolume):
            return NotImplemented
        return self.meta() == other.meta() and np.array_equal(self.voxels, other.voxels)


@dataclass(frozen=True, eq=False)
class LesionMask:
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise DataError(f"mask must be 3-D, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() > RPD2TO4):
            bad = sorted(set(np.unique(lab).tolist()) - {0, 1, 2, 3})
            raise DataError(f"mask codes must be in {{0,1,2,3}}, found {bad}")
        object.__setattr__(self, "labels", _frozen(lab))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    @classmethod
    def empty(cls, shape) -> "LesionMask":
        return cls(np.zeros(shape, dtype=np.uint8))

    def __eq__(self, other):
        if not isinstance(other, LesionMask):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)


# ---------------------------------------------------------------------------
# volume / mask files


def _read_meta(path: Path) -> dict:
    meta_path = path / META_NAME
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing {meta_path}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    try:
        dims = tuple(int(meta[k]) for k in ("n_bscans", "height", "width"))
        fov = tuple(float(v) for v in meta.get("fov_mm", DEFAULT_FOV_MM))
        eye = Eye(meta["eye"])
        pid = str(meta["participant_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"invalid metadata in {meta_path}: {exc}") from exc
    return {"dims": dims, "fov_mm": fov, "eye": eye, "participant_id": pid}


def _read_raw(path: Path, dims) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"missing {path}")
    buf = np.fromfile(path, dtype=np.uint8)
    expected = int(np.prod(dims))
    if buf.size != expected:
        raise DataError(f"{path}: {buf.size} bytes, expected {expected} for shape {dims}")
    return buf.reshape(dims)


def load_volume(path) -> OctVolume:
    path = Path(path)
    meta = _read_meta(path)
    if min(meta["dims"]) < 1:
        raise DataError(f"invalid dimensions {meta['dims']}")
    vox = _read_raw(path / VOLUME_NAME, meta["dims"])
    return OctVolume(meta["participant_id"], meta["eye"], vox, meta["fov_mm"])


def _atomic_write(target: Path, data: bytes):
    tmp = target.with_name(target.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, target)


def save_volume(vol: OctVolume, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _atomic_write(path / META_NAME, (json.dumps(vol.meta(), indent=2) + "\n").encode("utf-8"))
    _atomic_write(path / VOLUME_NAME, vol.voxels.tobytes(order="C"))


def load_mask(path, shape) -> LesionMask:
    """Read ``mask.raw`` (file path or directory holding one) for a known shape."""
    path = Path(path)
    if path.is_dir():
        path = path / MASK_NAME
    return LesionMask(_read_raw(path, tuple(shape)))


def save_mask(mask: LesionMask, path) -> None:
    path = Path(path)
    if path.suffix != ".raw":
        path.mkdir(parents=True, exist_ok=True)
        path = path / MASK_NAME
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, mask.labels.tobytes(order="C"))


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    volume: str
    participant_id: str
    eye: Eye
    grade: GradeLabel
    mask: str | None = None
    split: str = "unassigned"

    def __post_init__(self):
        object.__setattr__(self, "eye", Eye(self.eye))
        object.__setattr__(self, "grade", GradeLabel(int(self.grade)))
        object.__setattr__(self, "participant_id", str(self.participant_id))
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")

    def to_json(self) -> dict:
        out = {
            "volume": self.volume,
            "participant_id": self.participant_id,
            "eye": self.eye.value,
            "grade": int(self.grade),
        }
        if self.mask is not None:
            out["mask"] = self.mask
        if self.split != "unassigned":
            out["split"] = self.split
        return out


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...] = ()
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "root", Path(self.root))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load(self, entry: ManifestEntry) -> OctVolume:
        return load_volume(self.resolve(entry.volume))

    def load_mask(self, entry: ManifestEntry, shape=None) -> LesionMask | None:
        if entry.mask is None:
            return None
        if shape is None:
            shape = _read_meta(self.resolve(entry.volume))["dims"]
        return load_mask(self.resolve(entry.mask), shape)

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == split], self.root)

    def filter(self, predicate) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if predicate(e)], self.root)

    def to_json(self) -> dict:
        return {"entries": [e.to_json() for e in self.entries]}


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    raw = doc["entries"] if isinstance(doc, dict) else doc
    try:
        entries = [
            ManifestEntry(
                volume=e["volume"],
                participant_id=e["participant_id"],
                eye=e["eye"],
                grade=e["grade"],
                mask=e.get("mask"),
                split=e.get("split", "unassigned"),
            )
            for e in raw
        ]
    except (KeyError, ValueError) as exc:
        raise DataError(f"invalid manifest {path}: {exc}") from exc
    return DatasetManifest(entries, path.parent)


def rebase_manifest(manifest: DatasetManifest, new_root) -> DatasetManifest:
    """Same entries with paths rewritten relative to ``new_root``."""
    new_root = Path(new_root)

    def rel(p):
        if p is None:
            return None
        return os.path.relpath(os.path.abspath(manifest.resolve(p)), os.path.abspath(new_root))

    return DatasetManifest([replace(e, volume=rel(e.volume), mask=rel(e.mask)) for e in manifest],
                           new_root)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, (json.dumps(manifest.to_json(), indent=2) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# splitting and validation


def split_dataset(manifest: DatasetManifest, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> DatasetManifest:
    """Assign train/val/test at participant level.

    Participants are shuffled with ``seed`` and laid out along the cumulative
    eye count; each participant goes to the split whose target interval holds
    the midpoint of its eyes, so every split is within one participant of its
    target.
    """
    if len(manifest) == 0:
        raise DataError("cannot split an empty manifest")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three positive reals summing to 1, got {ratios}")
    if any(e.split != "unassigned" for e in manifest):
        raise DataError("manifest already has split assignments")

    eyes: dict[str, int] = {}
    for e in manifest:
        eyes[e.participant_id] = eyes.get(e.participant_id, 0) + 1
    participants = sorted(eyes)
    order = np.random.default_rng(seed).permutation(len(participants))

    total = len(manifest)
    bounds = (ratios[0] * total, (ratios[0] + ratios[1]) * total)
    assignment = {}
    cum = 0
    for i in order:
        pid = participants[i]
        mid = cum + eyes[pid] / 2.0
        assignment[pid] = "train" if mid < bounds[0] else ("val" if mid < bounds[1] else "test")
        cum += eyes[pid]
    return DatasetManifest(
        [replace(e, split=assignment[e.participant_id]) for e in manifest], manifest.root
    )


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Human-readable list of invariant violations; empty when the manifest is sound."""
    problems = []
    seen: dict[str, str] = {}
    for idx, e in enumerate(manifest):
        if e.split != "unassigned":
            prev = seen.setdefault(e.participant_id, e.split)
            if prev != e.split:
                problems.append(
                    f"entry {idx}: cross-split: participant {e.participant_id} in {prev} and {e.split}"
                )
        try:
            vol = manifest.load(e)
        except (OSError, DataError) as exc:
            problems.append(f"entry {idx}: volume unreadable: {exc}")
            continue
        if vol.participant_id != e.participant_id:
            problems.append(
                f"entry {idx}: participant mismatch: manifest {e.participant_id}, meta {vol.participant_id}"
            )
        if e.mask is not None:
            mpath = manifest.resolve(e.mask)
            if mpath.is_dir():
                mpath = mpath / MASK_NAME
            if not mpath.is_file():
                problems.append(f"entry {idx}: mask missing: {mpath}")
                continue
            size = mpath.stat().st_size
            if size != int(np.prod(vol.shape)):
                problems.append(f"entry {idx}: mask shape: {size} bytes vs volume shape {vol.shape}")
                continue
            try:
                load_mask(mpath, vol.shape)
            except DataError as exc:
                problems.append(f"entry {idx}: mask codes: {exc}")
    return problems
