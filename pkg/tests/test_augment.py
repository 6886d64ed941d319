import json
from dataclasses import replace

import numpy as np
import pytest

from octrpd.augment import (
    AugmentConfig, apply_draw, augment_array, augment_volume, inplane_matrix, sample_params,
)
from octrpd.phantom import Geometry, PhantomSpec, generate


def _vol():
    return generate(PhantomSpec(Geometry(6, 64, 64), seed=1))[0]


def test_defaults_are_the_training_table():
    cfg = AugmentConfig()
    assert cfg.rotation_deg == (-20, 20) and cfg.shear_frac == (-0.1, 0.1)
    assert cfg.zoom_frac == (-0.1, 0.1) and cfg.translate_bscan_px == (-10, 10)
    assert cfg.translate_z_px == (-2, 2)
    assert (cfg.hflip_prob, cfg.noise_prob, cfg.gamma_prob) == (0.15, 0.15, 0.15)
    assert (cfg.noise_mean, cfg.noise_sigma, cfg.gamma_range) == (0.0, 0.1, (0.75, 3.0))


def test_config_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        AugmentConfig(rotation_deg=(5, -5))
    with pytest.raises(ValueError):
        AugmentConfig(hflip_prob=1.5)
    cfg = replace(AugmentConfig(), hflip_prob=0.3)
    path = tmp_path / "aug.json"
    path.write_text(json.dumps(cfg.to_json()))
    assert AugmentConfig.from_file(path) == cfg


def test_identity_config_is_identity():
    vol = _vol()
    for seed in range(5):
        assert augment_volume(vol, AugmentConfig.identity(), seed) == vol


def test_hflip_always_mirrors_and_is_an_involution():
    vol = _vol()
    cfg = replace(AugmentConfig.identity(), hflip_prob=1.0)
    once = augment_volume(vol, cfg, 3)
    assert np.array_equal(once.voxels, vol.voxels[:, :, ::-1])
    assert augment_volume(once, cfg, 4) == vol


def test_gamma_forced_to_one_is_identity():
    x = _vol().normalized()
    cfg = replace(AugmentConfig.identity(), gamma_prob=1.0, gamma_range=(1.0, 1.0))
    assert np.allclose(augment_array(x, cfg, 0), x, atol=0, rtol=0)


def test_noise_and_gamma_stay_in_range():
    x = _vol().normalized()
    cfg = replace(AugmentConfig(), noise_prob=1.0, gamma_prob=1.0)
    for seed in range(10):
        y = augment_array(x, cfg, seed)
        assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1


def test_noise_sigma_is_on_normalized_scale():
    x = np.full((4, 32, 32), 0.5)
    cfg = replace(AugmentConfig.identity(), noise_prob=1.0, noise_sigma=0.1)
    assert np.std(augment_array(x, cfg, 1) - x) == pytest.approx(0.1, rel=0.05)


def test_draws_respect_ranges_and_rates():
    cfg = AugmentConfig()
    draws = [sample_params(cfg, s) for s in range(10_000)]
    rot = np.array([d.rotation_deg for d in draws])
    assert rot.min() >= -20 and rot.max() <= 20
    for field, (lo, hi) in (("shear", cfg.shear_frac), ("zoom", cfg.zoom_frac),
                            ("shift_row", cfg.translate_bscan_px), ("shift_col", cfg.translate_bscan_px),
                            ("shift_z", cfg.translate_z_px), ("gamma", cfg.gamma_range)):
        v = np.array([getattr(d, field) for d in draws])
        assert v.min() >= lo and v.max() <= hi, field
    assert set(d.shift_z for d in draws) == {-2, -1, 0, 1, 2}
    for flag in ("hflip", "noise", "gamma_applied"):
        rate = np.mean([getattr(d, flag) for d in draws])
        assert abs(rate - 0.15) <= 0.02, flag


def test_degenerate_intervals_give_constant_draws():
    cfg = AugmentConfig((3.0, 3.0), (0.05, 0.05), (0.0, 0.0), (2.0, 2.0), (1, 1), 1.0, 0.0, 0.1,
                        0.0, (2.0, 2.0), 1.0)
    draws = {(d.rotation_deg, d.shear, d.zoom, d.shift_row, d.shift_col, d.shift_z, d.hflip, d.gamma)
             for d in (sample_params(cfg, s) for s in range(50))}
    assert draws == {(3.0, 0.05, 0.0, 2.0, 2.0, 1, True, 2.0)}


def test_deterministic_given_seed():
    vol = _vol()
    assert augment_volume(vol, AugmentConfig(), 9) == augment_volume(vol, AugmentConfig(), 9)
    assert sample_params(AugmentConfig(), 9) == sample_params(AugmentConfig(), 9)


def test_translation_moves_content():
    x = np.zeros((3, 32, 32))
    x[1, 10, 12] = 1.0
    cfg = AugmentConfig((0, 0), (0, 0), (0, 0), (4, 4), (1, 1), 0, 0, 0.1, 0, (1, 1), 0)
    y = augment_array(x, cfg, 0)
    assert np.unravel_index(np.argmax(y), y.shape) == (2, 14, 16)


def test_mask_alignment_area_tracks_the_affine():
    rng = np.random.default_rng(0)
    cfg = replace(AugmentConfig(), hflip_prob=0.0, noise_prob=0.0, gamma_prob=0.0)
    for seed in range(40):
        mask = np.zeros((1, 64, 96), np.uint8)
        r, c = int(rng.integers(24, 34)), int(rng.integers(36, 52))
        mask[0, r:r + 8, c:c + 12] = 1 + seed % 3
        draw = replace(sample_params(cfg, seed), shift_z=0)
        x = np.zeros(mask.shape)
        _, out = apply_draw(x, draw, mask)
        assert set(np.unique(out)) <= {0, 1 + seed % 3}
        expected = (mask != 0).sum() * abs(np.linalg.det(inplane_matrix(draw)))
        assert abs((out != 0).sum() - expected) <= 0.10 * expected


def test_2d_input_and_mask_flip_together():
    x = np.random.default_rng(2).random((16, 24))
    m = (x > 0.7).astype(np.uint8)
    cfg = replace(AugmentConfig.identity(), hflip_prob=1.0)
    y, mm = augment_array(x, cfg, 0, mask=m)
    assert np.array_equal(y, x[:, ::-1]) and np.array_equal(mm, m[:, ::-1])
