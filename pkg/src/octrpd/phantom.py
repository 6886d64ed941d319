"""Synthetic OCT-like volumes with exact lesion masks.

Anatomy is a stack of horizontal bands with a gentle per-column axial wobble:
vitreous, nerve-fibre layer, inner retina, outer nuclear layer, EZ line,
interdigitation gap, RPE line, choroid. Lesions live in single B-scans:

- drusen: a smooth bump lifting the EZ/gap/RPE complex, leaving a
  medium-intensity fill under the raised RPE (the fill is the mask);
- rpd1: granular medium-intensity material filling the gap between EZ and
  RPE over a column span, EZ untouched;
- rpd2to4: a conical medium-intensity mound sitting on the RPE that replaces
  the gap and the EZ and pushes into the outer nuclear layer.

All generative parameters are invented; they live in :data:`DEFAULTS`.
"""

from __future__ import annotations

import json
import enum
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    DEFAULT_FOV_MM, DESK_SHAPE, DRUSEN, RPD1, RPD2TO4, DatasetManifest, GradeLabel, LesionMask,
    ManifestEntry, OctVolume, save_manifest, save_mask, save_volume,
)

LAYERS = ("vitreous", "nfl", "inner", "onl", "ez", "gap", "rpe", "choroid")

DEFAULTS = {
    "intensities": {
        "vitreous": 8.0, "nfl": 115.0, "inner": 70.0, "onl": 35.0,
        "ez": 185.0, "gap": 55.0, "rpe": 225.0, "choroid": 120.0,
    },
    "fill": {"drusen": 110.0, "rpd1": 135.0, "rpd2to4": 150.0},
    # fractional row positions for a height-H B-scan
    "ilm_frac": 0.25,
    "ez_frac": 0.58,
    "jitter_sigma": 6.0,
    "wobble_px": 1.5,
    "lesion_margin_px": 3,
    "heavy_noise_factor": 8.0,
    # optical_artifact: fringe over a half-width column window, mild enough to pass as gradable
    "artifact_amplitude": 40.0,
    "artifact_offset": 50.0,
    "artifact_gain": 0.75,
    "corrupt_fraction": (0.5, 1.0),
}

KIND_CODES = {"drusen": DRUSEN, "rpd1": RPD1, "rpd2to4": RPD2TO4}


class PhantomError(ValueError):
    pass


class Corruption(str, enum.Enum):
    NONE = "none"
    HEAVY_NOISE = "heavy_noise"
    SHADOW_BAND = "shadow_band"
    OUTER_RETINA_CLIP = "outer_retina_clip"
    VERTICAL_FLIP = "vertical_flip"
    OPTICAL_ARTIFACT = "optical_artifact"


# corruptions used to build ungradable training data; optical_artifact is held out
TRAINING_CORRUPTIONS = (
    Corruption.HEAVY_NOISE, Corruption.SHADOW_BAND, Corruption.OUTER_RETINA_CLIP,
    Corruption.VERTICAL_FLIP,
)


@dataclass(frozen=True)
class Geometry:
    n_bscans: int = DESK_SHAPE[0]
    height: int = DESK_SHAPE[1]
    width: int = DESK_SHAPE[2]
    fov_mm: tuple[float, float] = DEFAULT_FOV_MM

    @property
    def shape(self):
        return (self.n_bscans, self.height, self.width)


@dataclass(frozen=True)
class BackgroundModel:
    intensities: dict = field(default_factory=lambda: dict(DEFAULTS["intensities"]))
    jitter_sigma: float = DEFAULTS["jitter_sigma"]
    wobble_px: float = DEFAULTS["wobble_px"]

    @property
    def layer_count(self):
        return len(LAYERS)


@dataclass(frozen=True)
class LesionPlan:
    """``count`` lesions of one kind.

    ``size_range`` is the lateral extent in columns. ``amplitude_range`` is
    the axial height in rows for drusen and rpd2to4, and the granule contrast
    in gray levels for rpd1.
    """

    kind: str
    count: int
    size_range: tuple[int, int] = (6, 14)
    amplitude_range: tuple[float, float] = (3, 5)

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise PhantomError(f"unknown lesion kind {self.kind!r}")
        if self.count < 0:
            raise PhantomError("lesion count must be >= 0")
        lo, hi = self.size_range
        if not 1 <= lo <= hi:
            raise PhantomError(f"size_range must be nonempty positive, got {self.size_range}")
        if not 0 < self.amplitude_range[0] <= self.amplitude_range[1]:
            raise PhantomError(f"amplitude_range must be nonempty positive, got {self.amplitude_range}")


@dataclass(frozen=True)
class PhantomSpec:
    geometry: Geometry = Geometry()
    background: BackgroundModel = BackgroundModel()
    lesions: tuple[LesionPlan, ...] = ()
    corruption: Corruption = Corruption.NONE
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lesions", tuple(self.lesions))
        object.__setattr__(self, "corruption", Corruption(self.corruption))

    @property
    def total_lesions(self):
        return sum(p.count for p in self.lesions)

    def to_json(self) -> dict:
        d = asdict(self)
        d["corruption"] = self.corruption.value
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "PhantomSpec":
        g = doc.get("geometry", {})
        geom = Geometry(
            int(g.get("n_bscans", DESK_SHAPE[0])), int(g.get("height", DESK_SHAPE[1])),
            int(g.get("width", DESK_SHAPE[2])), tuple(g.get("fov_mm", DEFAULT_FOV_MM)),
        )
        b = doc.get("background", {})
        inten = dict(DEFAULTS["intensities"])
        inten.update(b.get("intensities", {}))
        bg = BackgroundModel(inten, float(b.get("jitter_sigma", DEFAULTS["jitter_sigma"])),
                             float(b.get("wobble_px", DEFAULTS["wobble_px"])))
        plans = [LesionPlan(p["kind"], int(p["count"]), tuple(p.get("size_range", (6, 14))),
                            tuple(p.get("amplitude_range", (3, 5)))) for p in doc.get("lesions", [])]
        return cls(geom, bg, tuple(plans), Corruption(doc.get("corruption", "none")),
                   int(doc.get("seed", 0)))

    @classmethod
    def from_file(cls, path) -> "PhantomSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# anatomy


@dataclass
class _Bands:
    """Per-B-scan, per-column top rows of each band."""

    ilm: np.ndarray
    onl: np.ndarray
    ez: np.ndarray
    gap: np.ndarray
    rpe: np.ndarray
    choroid: np.ndarray


def _band_thicknesses(h):
    ez_t = max(1, round(h / 32))
    gap_t = max(2, round(3 * h / 64))
    rpe_t = max(2, round(3 * h / 64))
    nfl_t = max(1, round(h / 24))
    return nfl_t, ez_t, gap_t, rpe_t


def layer_rows(geometry: Geometry, wobble_px: float, rng) -> _Bands:
    n, h, w = geometry.shape
    nfl_t, ez_t, gap_t, rpe_t = _band_thicknesses(h)
    cols = np.arange(w)
    # the retinal surface drifts smoothly from one B-scan to the next
    z = np.arange(n)[:, None] / max(1, n - 1)
    phase = rng.uniform(0, 2 * np.pi) + rng.uniform(-np.pi / 2, np.pi / 2) * z
    freq = rng.uniform(0.5, 1.5)
    tilt = rng.uniform(-1.0, 1.0) + rng.uniform(-0.5, 0.5) * z
    offset = wobble_px * np.sin(2 * np.pi * freq * cols / w + phase) + tilt * (cols - w / 2) / w
    offset = np.rint(offset).astype(int)
    ilm = int(round(DEFAULTS["ilm_frac"] * h)) + offset
    ez = int(round(DEFAULTS["ez_frac"] * h)) + offset
    gap = ez + ez_t
    rpe = gap + gap_t
    choroid = rpe + rpe_t
    onl = ez - max(2, round(h / 10))
    if choroid.max() >= h - 2 or ilm.min() < 2:
        raise PhantomError(f"height {h} too small for the layer model")
    return _Bands(ilm=ilm, onl=onl, ez=ez, gap=gap, rpe=rpe, choroid=choroid)


def _paint_column(col, tops, inten, h):
    """Fill one A-scan given the top row of every band after the vitreous."""
    names = ("nfl", "inner", "onl", "ez", "gap", "rpe", "choroid")
    col[:] = inten["vitreous"]
    for i, name in enumerate(names):
        start = max(0, min(h, tops[i]))
        stop = h if i == len(names) - 1 else max(0, min(h, tops[i + 1]))
        if name == "choroid":
            depth = np.arange(stop - start)
            col[start:stop] = inten["choroid"] * (1.0 - 0.5 * depth / max(1, h - start))
        else:
            col[start:stop] = inten[name]


def _render_clean(geometry, bands, inten):
    n, h, w = geometry.shape
    nfl_t = _band_thicknesses(h)[0]
    img = np.empty((n, h, w))
    for b in range(n):
        for c in range(w):
            tops = (bands.ilm[b, c], bands.ilm[b, c] + nfl_t, bands.onl[b, c], bands.ez[b, c],
                    bands.gap[b, c], bands.rpe[b, c], bands.choroid[b, c])
            _paint_column(img[b, :, c], tops, inten, h)
    return img


# ---------------------------------------------------------------------------
# lesions


def _place(occupied, width, total_width, margin, rng, attempts=200):
    n_b = len(occupied)
    for _ in range(attempts):
        b = int(rng.integers(n_b))
        hi = total_width - margin - width
        if hi < margin:
            return None
        c0 = int(rng.integers(margin, hi + 1))
        if all(c0 + width + margin <= s or e + margin <= c0 for s, e in occupied[b]):
            occupied[b].append((c0, c0 + width))
            return b, c0
    return None


def _drusen(img, mask, bands, b, c0, width, amp, fill, rng):
    cc = c0 + (width - 1) / 2.0
    half = width / 2.0
    for c in range(c0, c0 + width):
        prof = max(0.0, 1.0 - ((c - cc) / half) ** 2)
        lift = max(2, int(round(amp * np.sqrt(prof))))
        top, bottom = bands.onl[b, c] + 1, bands.choroid[b, c]
        img[b, top - lift:bottom - lift, c] = img[b, top:bottom, c].copy()
        img[b, bottom - lift:bottom, c] = fill + rng.normal(0, 4, size=lift)
        mask[b, bottom - lift:bottom, c] = DRUSEN


def _rpd1(img, mask, bands, b, c0, width, amp, fill, rng):
    for c in range(c0, c0 + width):
        top, bottom = bands.gap[b, c], bands.rpe[b, c]
        granules = fill + amp * (rng.random(bottom - top) - 0.5)
        img[b, top:bottom, c] = granules
        mask[b, top:bottom, c] = RPD1


def _rpd2to4(img, mask, bands, b, c0, width, amp, fill, rng):
    cc = c0 + (width - 1) / 2.0
    half = width / 2.0
    for c in range(c0, c0 + width):
        rise = int(round(amp * max(0.0, 1.0 - abs(c - cc) / half)))
        top, bottom = bands.ez[b, c] - rise, bands.rpe[b, c]
        img[b, top:bottom, c] = fill + rng.normal(0, 4, size=bottom - top)
        mask[b, top:bottom, c] = RPD2TO4


_PAINTERS = {"drusen": _drusen, "rpd1": _rpd1, "rpd2to4": _rpd2to4}


def _check_fits(plan: LesionPlan, geometry: Geometry, bands: _Bands):
    h = geometry.height
    amp = plan.amplitude_range[1]
    if plan.size_range[1] + 2 * DEFAULTS["lesion_margin_px"] > geometry.width:
        raise PhantomError(f"{plan.kind} width {plan.size_range[1]} does not fit in {geometry.width} columns")
    headroom = int((bands.gap - bands.onl).min()) - 1
    if plan.kind == "drusen" and amp > headroom:
        raise PhantomError(f"drusen amplitude {amp} exceeds available headroom {headroom} rows (height {h})")
    if plan.kind == "rpd2to4" and amp > int((bands.ez - bands.ilm).min()) - 4:
        raise PhantomError(f"rpd2to4 amplitude {amp} exceeds available headroom (height {h})")


def grade_for(spec: PhantomSpec) -> GradeLabel:
    if spec.corruption != Corruption.NONE:
        return GradeLabel.UNGRADABLE
    n = spec.total_lesions
    if n == 0:
        return GradeLabel.NO_LESION
    return GradeLabel.ONE_LESION if n == 1 else GradeLabel.MORE_THAN_ONE


def _render_with_bands(spec: PhantomSpec):
    rng = np.random.default_rng(spec.seed)
    geom = spec.geometry
    bg = spec.background
    bands = layer_rows(geom, bg.wobble_px, rng)
    inten = dict(DEFAULTS["intensities"])
    inten.update(bg.intensities)
    img = _render_clean(geom, bands, inten)
    mask = np.zeros(geom.shape, dtype=np.uint8)
    occupied = [[] for _ in range(geom.n_bscans)]
    for plan in spec.lesions:
        if plan.count:
            _check_fits(plan, geom, bands)
        for _ in range(plan.count):
            width = int(rng.integers(plan.size_range[0], plan.size_range[1] + 1))
            amp = float(rng.uniform(*plan.amplitude_range))
            slot = _place(occupied, width, geom.width, DEFAULTS["lesion_margin_px"], rng)
            if slot is None:
                raise PhantomError(f"cannot fit {spec.total_lesions} lesions in geometry {geom.shape}")
            b, c0 = slot
            fill = DEFAULTS["fill"][plan.kind]
            _PAINTERS[plan.kind](img, mask, bands, b, c0, width, amp, fill, rng)
    clean = img.copy()
    img = img + rng.normal(0, bg.jitter_sigma, size=img.shape)
    vox = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return vox, mask, clean, bands


def generate(spec: PhantomSpec, participant_id="phantom", eye="right"):
    """Render ``spec``; returns ``(OctVolume, LesionMask, GradeLabel)``."""
    vox, mask, _, _ = _render_with_bands(spec)
    vol = OctVolume(participant_id, eye, vox, spec.geometry.fov_mm)
    corruption_seed = spec.seed + 7919
    if spec.corruption != Corruption.NONE:
        vol, flipped = _corrupt(vol, spec.corruption, corruption_seed, spec.background.jitter_sigma)
        if flipped is not None:
            mask = mask.copy()
            mask[flipped] = mask[flipped, ::-1, :]
    return vol, LesionMask(mask), grade_for(spec)


def render_detail(spec: PhantomSpec):
    """Uncorrupted render plus noiseless intensities and band rows (testing aid)."""
    vox, mask, clean, bands = _render_with_bands(spec)
    return vox, mask, clean, bands


# ---------------------------------------------------------------------------
# corruptions


def _block(n, rng):
    lo, hi = DEFAULTS["corrupt_fraction"]
    k = max(1, int(round(n * rng.uniform(lo, hi))))
    start = int(rng.integers(0, n - k + 1))
    return np.arange(start, start + k)


def _corrupt(vol: OctVolume, corruption, seed, jitter_sigma):
    corruption = Corruption(corruption)
    if corruption == Corruption.NONE:
        return vol, None
    rng = np.random.default_rng(seed)
    x = vol.voxels.astype(np.float64)
    n, h, w = x.shape
    flipped = None
    if corruption == Corruption.HEAVY_NOISE:
        sel = _block(n, rng)
        sigma = DEFAULTS["heavy_noise_factor"] * jitter_sigma
        x[sel] += rng.normal(0, sigma, size=(len(sel), h, w))
    elif corruption == Corruption.SHADOW_BAND:
        bw = int(rng.integers(max(1, w // 8), max(2, w // 4) + 1))
        c0 = int(rng.integers(0, w - bw + 1))
        x[:, :, c0:c0 + bw] = 0.0
    elif corruption == Corruption.OUTER_RETINA_CLIP:
        sel = _block(n, rng)
        cut = int(round(DEFAULTS["ez_frac"] * h)) - int(rng.integers(2, max(3, h // 8) + 1))
        x[sel, cut:, :] = 0.0
    elif corruption == Corruption.VERTICAL_FLIP:
        flipped = _block(n, rng)
        x[flipped] = x[flipped, ::-1, :]
    elif corruption == Corruption.OPTICAL_ARTIFACT:
        sel = _block(n, rng)
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(5.0, 9.0)
        rr, cc = np.mgrid[0:h, 0:w]
        fringe = np.sin(2 * np.pi * (rr * np.cos(theta) + cc * np.sin(theta)) / period)
        c0 = int(rng.integers(0, w // 2))
        cols = slice(c0, c0 + w // 2)
        x[sel, :, cols] = (DEFAULTS["artifact_gain"] * x[sel, :, cols] + DEFAULTS["artifact_offset"]
                           + DEFAULTS["artifact_amplitude"] * fringe[:, cols])
    out = np.clip(np.rint(x), 0, 255).astype(np.uint8)
    return vol.with_voxels(out), flipped


def corrupt(vol: OctVolume, corruption, seed: int, jitter_sigma: float = DEFAULTS["jitter_sigma"]) -> OctVolume:
    """Apply one corruption deterministically; ``none`` is the identity."""
    return _corrupt(vol, corruption, seed, jitter_sigma)[0]


# ---------------------------------------------------------------------------
# datasets

CATEGORIES = ("control", "lesion", "single", "questionable", "ungradable", "ood")


def _lesion_plans(rng, geometry):
    kinds = ["drusen", "rpd1", "rpd2to4"]
    h = geometry.height
    amp_px = (max(2, h // 20), max(3, h // 12))
    while True:
        counts = [int(rng.integers(0, 5)), int(rng.integers(0, 4)), int(rng.integers(0, 4))]
        if sum(counts) >= 3:
            break
    return tuple(_plan(k, c, amp_px) for k, c in zip(kinds, counts) if c)


def _plan(kind, count, amp_px, faint=False):
    if kind == "rpd1":
        amp = (10.0, 20.0) if faint else (40.0, 60.0)
    else:
        amp = (2.0, 2.0) if faint else (float(amp_px[0]), float(amp_px[1]))
    return LesionPlan(kind, count, (6, 14), amp)


def spec_for_category(category: str, seed: int, geometry: Geometry = Geometry(),
                      background: BackgroundModel = BackgroundModel()) -> tuple[PhantomSpec, GradeLabel]:
    """The phantom recipe used by :func:`generate_dataset` for one entry."""
    rng = np.random.default_rng(seed)
    h = geometry.height
    amp_px = (max(2, h // 20), max(3, h // 12))
    corruption = Corruption.NONE
    grade = None
    if category == "control":
        plans = ()
    elif category == "lesion":
        plans = _lesion_plans(rng, geometry)
    elif category == "single":
        plans = (_plan(str(rng.choice(["drusen", "rpd1", "rpd2to4"])), 1, amp_px),)
    elif category == "questionable":
        plans = (_plan(str(rng.choice(["drusen", "rpd1"])), 1, amp_px, faint=True),)
        grade = GradeLabel.QUESTIONABLE
    elif category in ("ungradable", "ood"):
        plans = _lesion_plans(rng, geometry) if rng.random() < 0.5 else ()
        if category == "ood":
            corruption = Corruption.OPTICAL_ARTIFACT
        else:
            corruption = TRAINING_CORRUPTIONS[int(rng.integers(len(TRAINING_CORRUPTIONS)))]
    else:
        raise PhantomError(f"unknown phantom category {category!r}")
    spec = PhantomSpec(geometry, background, plans, corruption, seed)
    return spec, grade if grade is not None else grade_for(spec)


def generate_dataset(out_dir, n_per_category: dict, base_seed: int = 0,
                     geometry: Geometry = Geometry(), eyes_per_participant: int = 1,
                     participant_prefix: str = "P") -> DatasetManifest:
    """Write phantoms and ``manifest.json`` under ``out_dir``.

    Entries are emitted category by category in :data:`CATEGORIES` order;
    entry ``i`` uses seed ``base_seed + i``.
    """
    out_dir = Path(out_dir)
    unknown = set(n_per_category) - set(CATEGORIES)
    if unknown:
        raise PhantomError(f"unknown categories {sorted(unknown)}")
    if any(int(v) < 0 for v in n_per_category.values()):
        raise PhantomError("category counts must be >= 0")
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    i = 0
    for cat in CATEGORIES:
        for _ in range(int(n_per_category.get(cat, 0))):
            seed = base_seed + i
            spec, grade = spec_for_category(cat, seed, geometry)
            pid = f"{participant_prefix}{i // eyes_per_participant:05d}"
            eye = "right" if i % eyes_per_participant == 0 else "left"
            vol, mask, _ = generate(spec, pid, eye)
            name = f"vol_{i:05d}"
            save_volume(vol, out_dir / name)
            save_mask(mask, out_dir / name / "mask.raw")
            entries.append(ManifestEntry(f"{name}", pid, eye, grade, mask=f"{name}/mask.raw"))
            i += 1
    manifest = DatasetManifest(entries, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
