"""Stochastic training augmentation for volumes and single B-scans.

Order of application: rotate -> shear -> zoom -> translate (one in-plane
affine shared by every B-scan, integer shift across B-scans), then horizontal
flip, then gaussian noise, then gamma. Intensities are handled normalized to
[0, 1]; bilinear resampling for images, nearest neighbour for masks, zero fill
outside the field of view.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage

from .data import OctVolume


def _interval(v):
    lo, hi = (float(x) for x in v)
    if lo > hi:
        raise ValueError(f"interval {v} is not ordered")
    return (lo, hi)


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: tuple[float, float] = (-20.0, 20.0)
    shear_frac: tuple[float, float] = (-0.10, 0.10)
    zoom_frac: tuple[float, float] = (-0.10, 0.10)
    translate_bscan_px: tuple[float, float] = (-10.0, 10.0)
    translate_z_px: tuple[int, int] = (-2, 2)
    hflip_prob: float = 0.15
    noise_mean: float = 0.0
    noise_sigma: float = 0.1
    noise_prob: float = 0.15
    gamma_range: tuple[float, float] = (0.75, 3.0)
    gamma_prob: float = 0.15

    def __post_init__(self):
        for name in ("rotation_deg", "shear_frac", "zoom_frac", "translate_bscan_px",
                     "translate_z_px", "gamma_range"):
            object.__setattr__(self, name, _interval(getattr(self, name)))
        for name in ("hflip_prob", "noise_prob", "gamma_prob"):
            p = float(getattr(self, name))
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.gamma_range[0] <= 0:
            raise ValueError("gamma must be positive")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        zero = (0.0, 0.0)
        return cls(zero, zero, zero, zero, (0, 0), 0.0, 0.0, 0.0, 0.0, (1.0, 1.0), 0.0)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "AugmentConfig":
        return replace(cls(), **{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})

    @classmethod
    def from_file(cls, path) -> "AugmentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class AugmentDraw:
    rotation_deg: float
    shear: float
    zoom: float
    shift_row: float
    shift_col: float
    shift_z: int
    hflip: bool
    noise: bool
    noise_seed: int
    noise_sigma: float
    noise_mean: float
    gamma_applied: bool
    gamma: float

    @property
    def geometric(self) -> bool:
        return any((self.rotation_deg, self.shear, self.zoom, self.shift_row, self.shift_col, self.shift_z))


def sample_params(cfg: AugmentConfig, seed) -> AugmentDraw:
    """Draw one concrete augmentation. ``seed`` may be an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rot = rng.uniform(*cfg.rotation_deg)
    shear = rng.uniform(*cfg.shear_frac)
    zoom = rng.uniform(*cfg.zoom_frac)
    tr = rng.uniform(*cfg.translate_bscan_px)
    tc = rng.uniform(*cfg.translate_bscan_px)
    zlo, zhi = int(round(cfg.translate_z_px[0])), int(round(cfg.translate_z_px[1]))
    tz = int(rng.integers(zlo, zhi + 1))
    hflip = bool(rng.random() < cfg.hflip_prob)
    noise = bool(rng.random() < cfg.noise_prob)
    noise_seed = int(rng.integers(0, 2**31 - 1))
    gamma_applied = bool(rng.random() < cfg.gamma_prob)
    gamma = float(rng.uniform(*cfg.gamma_range))
    return AugmentDraw(float(rot), float(shear), float(zoom), float(tr), float(tc), tz,
                       hflip, noise, noise_seed, float(cfg.noise_sigma), float(cfg.noise_mean),
                       gamma_applied, gamma)


def inplane_matrix(draw: AugmentDraw) -> np.ndarray:
    """Forward 2x2 map (row, col) rotate -> shear -> zoom."""
    t = np.deg2rad(draw.rotation_deg)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    shear = np.array([[1.0, 0.0], [draw.shear, 1.0]])
    zoom = np.eye(2) * (1.0 + draw.zoom)
    return zoom @ shear @ rot


def _geometric(arr, draw: AugmentDraw, order):
    """Resample a (n, h, w) stack; ``order`` 1 for intensities, 0 for labels."""
    n, h, w = arr.shape
    fwd = np.eye(3)
    fwd[1:, 1:] = inplane_matrix(draw)
    inv = np.linalg.inv(fwd)
    center = np.array([(n - 1) / 2.0, (h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([draw.shift_z if n > 1 else 0, draw.shift_row, draw.shift_col], dtype=float)
    offset = center - inv @ (center + shift)
    return ndimage.affine_transform(arr, inv, offset=offset, order=order, mode="constant",
                                    cval=0, prefilter=False)


def apply_draw(x, draw: AugmentDraw, mask=None):
    """Augment normalized intensities ``x`` (n, h, w) or (h, w); optional paired mask."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ndim == 2
    if flat:
        x = x[None]
        mask = None if mask is None else np.asarray(mask)[None]
    if draw.geometric:
        x = _geometric(x, draw, order=1)
        if mask is not None:
            mask = _geometric(np.asarray(mask), draw, order=0)
    if draw.hflip:
        x = x[:, :, ::-1]
        if mask is not None:
            mask = mask[:, :, ::-1]
    if draw.noise:
        rng = np.random.default_rng(draw.noise_seed)
        x = np.clip(x + rng.normal(draw.noise_mean, draw.noise_sigma, size=x.shape), 0.0, 1.0)
    if draw.gamma_applied:
        x = np.clip(x, 0.0, 1.0) ** draw.gamma
    x = np.ascontiguousarray(x)
    if mask is not None:
        mask = np.ascontiguousarray(mask)
    if flat:
        x = x[0]
        mask = None if mask is None else mask[0]
    return x if mask is None else (x, mask)


def augment_array(x, cfg: AugmentConfig, seed, mask=None):
    return apply_draw(x, sample_params(cfg, seed), mask)


def augment_volume(vol: OctVolume, cfg: AugmentConfig, seed) -> OctVolume:
    out = augment_array(vol.normalized(), cfg, seed)
    return vol.with_voxels(np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8))
