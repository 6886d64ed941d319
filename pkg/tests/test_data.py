import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octrpd.data import (
    DataError, DatasetManifest, Eye, GradeLabel, LesionMask, ManifestEntry, OctVolume,
    load_manifest, load_mask, load_volume, rebase_manifest, save_manifest, save_mask,
    save_volume, split_dataset, validate_manifest,
)


def _vol(shape=(2, 8, 8), pid="p0", eye="left", fill=None, seed=0):
    vox = np.random.default_rng(seed).integers(0, 256, shape, dtype=np.uint8) if fill is None \
        else np.full(shape, fill, np.uint8)
    return OctVolume(pid, eye, vox, (6.0, 6.0))


def _manifest(pids, root="."):
    return DatasetManifest(
        [ManifestEntry(f"v{i}", pid, Eye.LEFT if i % 2 else Eye.RIGHT, GradeLabel.NO_LESION)
         for i, pid in enumerate(pids)], root)


# ---------------------------------------------------------------- types

def test_volume_invariants():
    with pytest.raises(DataError):
        OctVolume("p", "left", np.zeros((1, 7, 8), np.uint8))
    with pytest.raises(DataError):
        OctVolume("p", "left", np.zeros((8, 8), np.uint8))
    with pytest.raises(DataError):
        OctVolume("p", "left", np.zeros((1, 8, 8), np.uint8), (0.0, 6.0))
    with pytest.raises(DataError):
        OctVolume("p", "left", np.full((1, 8, 8), 300))
    with pytest.raises(ValueError):
        OctVolume("p", "middle", np.zeros((1, 8, 8), np.uint8))


def test_volume_is_immutable():
    v = _vol()
    with pytest.raises(ValueError):
        v.voxels[0, 0, 0] = 1
    assert v.normalized().max() <= 1.0


def test_mask_codes_restricted():
    with pytest.raises(DataError):
        LesionMask(np.full((1, 8, 8), 4, np.uint8))
    assert LesionMask.empty((2, 8, 8)).labels.sum() == 0


def test_grade_scale():
    assert [g.value for g in GradeLabel] == [1, 2, 3, 4, 5]


# ---------------------------------------------------------------- files

def test_load_volume_size_arithmetic(tmp_path):
    (tmp_path / "meta.json").write_text(json.dumps(
        {"participant_id": "a", "eye": "right", "n_bscans": 16, "height": 64, "width": 128,
         "fov_mm": [6, 6]}))
    (tmp_path / "volume.raw").write_bytes(bytes(131072))
    assert load_volume(tmp_path).shape == (16, 64, 128)
    (tmp_path / "volume.raw").write_bytes(bytes(131071))
    with pytest.raises(DataError):
        load_volume(tmp_path)


def test_load_volume_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path)
    (tmp_path / "meta.json").write_text(json.dumps({"participant_id": "a", "eye": "up"}))
    with pytest.raises(DataError):
        load_volume(tmp_path)


def test_zero_volume_payload(tmp_path):
    save_volume(_vol((3, 8, 9), fill=0), tmp_path / "z")
    raw = (tmp_path / "z" / "volume.raw").read_bytes()
    assert len(raw) == 3 * 8 * 9 and not any(raw)


def test_round_trip_100_random_volumes(tmp_path):
    rng = np.random.default_rng(1)
    for i in range(100):
        shape = tuple(int(s) for s in (rng.integers(1, 4), rng.integers(8, 12), rng.integers(8, 12)))
        v = _vol(shape, pid=f"p{i}", eye=("left", "right")[i % 2], seed=i)
        save_volume(v, tmp_path / str(i))
        assert load_volume(tmp_path / str(i)) == v


def test_mask_round_trip(tmp_path):
    m = LesionMask(np.random.default_rng(2).integers(0, 4, (2, 8, 8)).astype(np.uint8))
    save_mask(m, tmp_path / "v")
    assert load_mask(tmp_path / "v", m.shape) == m
    save_mask(m, tmp_path / "other.raw")
    assert load_mask(tmp_path / "other.raw", m.shape) == m


def test_manifest_round_trip_and_relative_paths(tmp_path):
    save_volume(_vol(pid="a"), tmp_path / "vols" / "a")
    man = DatasetManifest([ManifestEntry("vols/a", "a", "left", 3, split="train")], tmp_path)
    save_manifest(man, tmp_path / "manifest.json")
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["entries"][0]["split"] == "train" and "mask" not in doc["entries"][0]
    back = load_manifest(tmp_path / "manifest.json")
    assert back.entries == man.entries
    assert back.load(back.entries[0]).participant_id == "a"

    (tmp_path / "elsewhere").mkdir()
    moved = rebase_manifest(back, tmp_path / "elsewhere")
    assert moved.entries[0].volume == "../vols/a"
    assert moved.load(moved.entries[0]) == back.load(back.entries[0])


def test_manifest_unassigned_by_default(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps(
        {"entries": [{"volume": "v", "participant_id": "a", "eye": "left", "grade": 1}]}))
    assert load_manifest(tmp_path / "m.json").entries[0].split == "unassigned"
    with pytest.raises(DataError):
        ManifestEntry("v", "a", "left", 1, split="holdout")


# ---------------------------------------------------------------- splitting

def test_split_ten_participants_seed_7():
    out = split_dataset(_manifest([f"p{i}" for i in range(10)]), (0.6, 0.2, 0.2), seed=7)
    counts = [sum(e.split == s for e in out) for s in ("train", "val", "test")]
    assert counts == [6, 2, 2]


def test_split_keeps_eyes_together_and_is_deterministic():
    m = _manifest(["a", "a", "b", "c", "c", "d"])
    a = split_dataset(m, seed=3)
    assert a == split_dataset(m, seed=3)
    assert a.entries[0].split == a.entries[1].split
    assert a.entries[3].split == a.entries[4].split


def test_split_errors():
    with pytest.raises(DataError):
        split_dataset(_manifest([]))
    with pytest.raises(DataError):
        split_dataset(_manifest(["a"]), (0.5, 0.2, 0.2))
    with pytest.raises(DataError):
        split_dataset(_manifest(["a"]), (1.0, 0.0, 0.0))
    with pytest.raises(DataError):
        split_dataset(split_dataset(_manifest(["a", "b", "c"])))


def test_500_random_manifests_never_straddle():
    rng = np.random.default_rng(11)
    for trial in range(500):
        n = int(rng.integers(1, 30))
        pids = [f"p{int(x)}" for x in rng.integers(0, max(1, n // 2 + 1), n)]
        r = rng.dirichlet(np.ones(3)) * 0.97 + 0.01
        r = tuple(r / r.sum())
        out = split_dataset(_manifest(pids), r, seed=trial)
        where = {}
        for e in out:
            assert where.setdefault(e.participant_id, e.split) == e.split


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=3, max_size=25), st.integers(0, 1000))
def test_split_fractions_within_one_participant(eye_counts, seed):
    pids = [f"p{i}" for i, c in enumerate(eye_counts) for _ in range(c)]
    out = split_dataset(_manifest(pids), (0.6, 0.2, 0.2), seed=seed)
    total, biggest = len(pids), max(eye_counts)
    for name, ratio in zip(("train", "val", "test"), (0.6, 0.2, 0.2)):
        got = sum(e.split == name for e in out)
        assert abs(got - ratio * total) <= biggest


# ---------------------------------------------------------------- validation

def _disk_manifest(tmp_path, splits=("train", "train"), pids=("a", "b")):
    entries = []
    for i, (pid, split) in enumerate(zip(pids, splits)):
        save_volume(_vol(pid=pid, seed=i), tmp_path / f"v{i}")
        save_mask(LesionMask.empty((2, 8, 8)), tmp_path / f"v{i}")
        entries.append(ManifestEntry(f"v{i}", pid, "left", 1, mask=f"v{i}/mask.raw", split=split))
    return DatasetManifest(entries, tmp_path)


def test_validate_well_formed(tmp_path):
    assert validate_manifest(_disk_manifest(tmp_path)) == []


def test_validate_cross_split(tmp_path):
    problems = validate_manifest(_disk_manifest(tmp_path, ("train", "test"), ("a", "a")))
    assert len(problems) == 1 and "cross-split" in problems[0]


def test_validate_mask_shape(tmp_path):
    man = _disk_manifest(tmp_path)
    (tmp_path / "v1" / "mask.raw").write_bytes(bytes(2 * 8 * 7))
    problems = validate_manifest(man)
    assert len(problems) == 1 and "entry 1" in problems[0]


def test_validate_missing_volume(tmp_path):
    man = DatasetManifest([ManifestEntry("nowhere", "a", "left", 1)], tmp_path)
    problems = validate_manifest(man)
    assert len(problems) == 1 and "unreadable" in problems[0]
