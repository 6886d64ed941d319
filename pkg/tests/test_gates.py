import logging

import numpy as np
import pytest

from octrpd.augment import AugmentConfig
from octrpd.data import GradeLabel
from octrpd.gates import (
    EnsembleModel, GateThresholds, Task, balanced_batches, calibrate_threshold,
    calibrate_thresholds, ensemble_variance, ood_uncertainty, parse_policy, predict_gate,
    task_arrays, task_label, train_ensemble, train_gate,
)
from octrpd.metrics import cohens_kappa
from octrpd.phantom import Geometry, generate, spec_for_category
from octrpd.tinynn import AdamConfig, build_classifier3d, build_sequential
from octrpd.training import TrainConfig, TrainingError, fit

TINY = Geometry(8, 32, 32)


def _corpus(categories, n, base, geometry=TINY):
    out = []
    for i in range(n):
        spec, grade = spec_for_category(categories[i % len(categories)], base + i, geometry)
        out.append((generate(spec)[0], grade))
    return out


def _fast_cfg(**kw):
    base = dict(adam=AdamConfig(learning_rate=1e-3), batch_size=4, max_iterations=40,
                patience_iterations=40, eval_every=10, augment=AugmentConfig.identity(), seed=0)
    base.update(kw)
    return TrainConfig(**base)


ARCH = {"n_blocks": 3, "base_widths": (4, 4, 8)}


# ---------------------------------------------------------------- config / labels

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience_iterations=10, eval_every=25)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(eval_every=0)
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.patience_iterations, cfg.adam.learning_rate) == (4, 500, 1e-4)
    assert TrainConfig.from_json(cfg.to_json()) == cfg


def test_task_label_mapping_excludes_grades_2_and_4():
    for task in Task:
        assert task_label(task, GradeLabel.ONE_LESION) is None
        assert task_label(task, GradeLabel.QUESTIONABLE) is None
    assert task_label("ungradable_vs_rest", 5) == 1
    assert task_label("ungradable_vs_rest", 1) == task_label("ungradable_vs_rest", 3) == 0
    assert task_label("lesion_vs_control", 3) == 1 and task_label("lesion_vs_control", 1) == 0
    assert task_label("lesion_vs_control", 5) is None


def test_task_arrays_logs_exclusions(caplog):
    data = _corpus(("control", "single", "questionable", "lesion"), 8, 0)
    with caplog.at_level(logging.INFO, logger="octrpd.gates"):
        x, y, dropped = task_arrays(data, "lesion_vs_control")
    assert x.shape == (4,) + TINY.shape and sorted(y.tolist()) == [0, 0, 1, 1]
    assert dropped == {2: 2, 4: 2}
    assert "excluded grades" in caplog.text
    with pytest.raises(TrainingError):
        task_arrays(_corpus(("questionable",), 2, 0), "lesion_vs_control")


# ---------------------------------------------------------------- sampling

def test_balanced_batches_imbalanced_counts():
    labels = np.r_[np.zeros(100, int), np.ones(10, int)]
    for batch_size in (2, 4, 5):
        stream = balanced_batches(labels, batch_size, seed=0)
        drawn = np.concatenate([next(stream) for _ in range(200 // batch_size)])
        counts = np.bincount(labels[drawn], minlength=2)
        assert abs(counts[0] - 100) <= batch_size and abs(counts[1] - 100) <= batch_size


@pytest.mark.parametrize("sizes", [(3, 50), (7, 2, 40), (1, 1, 1, 9)])
def test_balanced_batches_window_property(sizes):
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(sizes)])
    batch_size = 4
    c = len(sizes)
    stream = balanced_batches(labels, batch_size, seed=3)
    drawn = labels[np.concatenate([next(stream) for _ in range(60)])]
    window = c * batch_size
    for start in range(0, drawn.size - window + 1):
        counts = np.bincount(drawn[start:start + window], minlength=c)
        assert counts.max() - counts.min() <= batch_size


def test_balanced_batches_minority_epoch_without_repeats():
    labels = np.r_[np.zeros(5, int), np.ones(50, int)]
    stream = balanced_batches(labels, 2, seed=1)
    drawn = np.concatenate([next(stream) for _ in range(5)])
    minority = [i for i in drawn if labels[i] == 0]
    assert len(minority) == 5 and len(set(minority)) == 5


def test_balanced_batches_single_category_and_determinism():
    stream = balanced_batches(np.zeros(6, int), 3, seed=2)
    assert all(i < 6 for _ in range(5) for i in next(stream))
    a = balanced_batches(np.r_[0, 0, 1, 1, 1], 2, seed=9)
    b = balanced_batches(np.r_[0, 0, 1, 1, 1], 2, seed=9)
    assert all(np.array_equal(next(a), next(b)) for _ in range(20))


def test_balanced_batches_empty_category():
    with pytest.raises(ValueError):
        next(balanced_batches(np.zeros(4, int), 2, seed=0, n_categories=2))


# ---------------------------------------------------------------- early stopping

def _scripted_fit(scores, patience, eval_every=1):
    net = build_sequential([("dense", {"in_features": 2, "out_features": 2}), ("softmax", {})])
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    seq = iter(scores)
    stamps = []

    def evaluate(n):
        stamps.append(n.state()["0.w"].copy())
        return next(seq)

    cfg = TrainConfig(adam=AdamConfig(learning_rate=1e-2), batch_size=2,
                      max_iterations=len(scores) * eval_every, patience_iterations=patience,
                      eval_every=eval_every, augment=AugmentConfig.identity())
    res = fit(net, lambda it: (x, np.array([0, 1])), evaluate, cfg)
    return res, stamps


def test_fit_best_checkpoint_and_patience():
    res, stamps = _scripted_fit([0.1, 0.5, 0.3, 0.5, 0.2, 0.2, 0.2, 0.9], patience=4)
    # strict improvement at iteration 2, tie at 4, stop at 6 (= 2 + patience)
    assert res.best_iteration == 4 and res.best_score == 0.5
    assert res.log[-1] == {"event": "early_stop", "iteration": 6, "best_iteration": 4}
    assert np.array_equal(res.net.state()["0.w"], stamps[3])
    later = [r["val_kappa"] for r in res.log if "val_kappa" in r and r["iteration"] > res.best_iteration]
    assert all(res.best_score >= k for k in later)


def test_fit_runs_to_max_without_stall():
    res, _ = _scripted_fit([0.1, 0.2, 0.3, 0.4], patience=2)
    assert res.best_iteration == 4 and "event" not in res.log[-1]


def test_fit_non_finite_loss_aborts():
    net = build_sequential([("dense", {"in_features": 2, "out_features": 2}), ("softmax", {})])
    cfg = TrainConfig(batch_size=2, max_iterations=3, patience_iterations=1, eval_every=1)
    with pytest.raises(TrainingError):
        fit(net, lambda it: (np.full((2, 2), np.nan), np.array([0, 1])), lambda n: 0.0, cfg)


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def ungradable_data():
    cats = ("ungradable", "control", "ungradable", "lesion")
    return _corpus(cats, 20, 0), _corpus(cats, 12, 5000)


def test_train_gate_separable_kappa(ungradable_data, tmp_path):
    train, val = ungradable_data
    cfg = _fast_cfg(max_iterations=120, patience_iterations=120, eval_every=20)
    res = train_gate(train, val, "ungradable_vs_rest", cfg, ARCH, log_path=tmp_path / "log.jsonl")
    assert res.best_score >= 0.8
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert '"event": "start"' in lines[0] and len(lines) >= 2
    vol = val[0][0]
    p = predict_gate(res.net, vol)
    assert p.shape == (2,) and abs(p.sum() - 1) < 1e-9
    assert np.array_equal(p, predict_gate(res.net, vol))
    with pytest.raises(ValueError):
        predict_gate(res.net, np.zeros((8, 32, 64)))


def test_train_gate_is_deterministic(ungradable_data):
    train, val = ungradable_data
    cfg = _fast_cfg(max_iterations=10, eval_every=5, patience_iterations=10,
                    augment=AugmentConfig())
    a = train_gate(train[:8], val[:4], "ungradable_vs_rest", cfg, ARCH)
    b = train_gate(train[:8], val[:4], "ungradable_vs_rest", cfg, ARCH)
    assert a.log == b.log
    sa, sb = a.net.state(), b.net.state()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_ensemble_parallel_equals_serial(ungradable_data, tmp_path):
    train, val = ungradable_data
    cfg = _fast_cfg(max_iterations=6, eval_every=3, patience_iterations=6)
    serial, _ = train_ensemble(train[:8], val[:4], "ungradable_vs_rest", cfg, 2, ARCH, n_jobs=1)
    par, _ = train_ensemble(train[:8], val[:4], "ungradable_vs_rest", cfg, 2, ARCH, n_jobs=2)
    assert serial.member_seeds == par.member_seeds == [0, 1]
    s0, s1 = serial.members[0].state(), serial.members[1].state()
    assert any(not np.array_equal(s0[k], s1[k]) for k in s0)
    for m, n in zip(serial.members, par.members):
        a, b = m.state(), n.state()
        assert all(np.array_equal(a[k], b[k]) for k in a)
    serial.save(tmp_path / "ens")
    back = EnsembleModel.load(tmp_path / "ens")
    vol = val[0][0]
    assert ood_uncertainty(back, vol) == ood_uncertainty(serial, vol)
    assert 0.0 <= ood_uncertainty(serial, vol) <= 0.25


def test_ensemble_invariants():
    a = build_classifier3d((8, 32, 32), seed=1, **ARCH)
    b = build_classifier3d((8, 32, 32), seed=2, **ARCH)
    c = build_classifier3d((8, 32, 32), seed=3, n_blocks=3, base_widths=(4, 8, 8))
    EnsembleModel([a, b], [1, 2])
    with pytest.raises(ValueError):
        EnsembleModel([a], [1])
    with pytest.raises(ValueError):
        EnsembleModel([a, b], [1, 1])
    with pytest.raises(ValueError):
        EnsembleModel([a, c], [1, 3])


# ---------------------------------------------------------------- uncertainty

def test_ensemble_variance_fixtures():
    assert ensemble_variance([[[0.3, 0.7]], [[0.3, 0.7]], [[0.3, 0.7]]]).tolist() == [0.0]
    assert ensemble_variance([[[1.0, 0.0]], [[0.0, 1.0]]]).tolist() == [0.25]
    with pytest.raises(ValueError):
        ensemble_variance([[[1.0, 0.0]]])


def test_ensemble_variance_matches_direct_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m, c = int(rng.integers(2, 8)), int(rng.integers(2, 5))
        p = rng.dirichlet(np.ones(c), size=m)
        direct = 0.0
        for k in range(c):
            mu = sum(p[i, k] for i in range(m)) / m
            direct += sum((p[i, k] - mu) ** 2 for i in range(m)) / m
        got = ensemble_variance(p[:, None, :])[0]
        assert got == pytest.approx(direct / c, abs=1e-15)
        assert (got == 0) == np.allclose(p, p[0], atol=0)


# ---------------------------------------------------------------- thresholds

def test_gate_thresholds_validation(tmp_path):
    with pytest.raises(ValueError):
        GateThresholds(ungradable_prob_threshold=1.2)
    with pytest.raises(ValueError):
        GateThresholds(ood_uncertainty_threshold=-0.1)
    th = GateThresholds(0.4, 0.01, 0.6)
    th.save(tmp_path / "t.json")
    assert GateThresholds.load(tmp_path / "t.json") == th


def test_parse_policy():
    assert parse_policy("youden") == ("youden", None)
    assert parse_policy("sens_at:0.967") == ("sens_at", 0.967)
    assert parse_policy("spec_at(0.9)") == ("spec_at", 0.9)
    for bad in ("sens_at", "f1", "sens_at:2"):
        with pytest.raises(ValueError):
            parse_policy(bad)


def _sweep(scores, labels, t):
    s, y = np.asarray(scores), np.asarray(labels, bool)
    pred = s >= t
    return (pred & y).sum() / y.sum(), (~pred & ~y).sum() / (~y).sum()


def test_youden_fixture_in_gap_high_specificity_tie():
    t = calibrate_threshold([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0], "youden")
    assert 0.3 < t <= 0.8 and t == 0.8


def test_policies_match_exhaustive_sweep():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n = int(rng.integers(4, 20))
        s = np.round(rng.random(n), 2)
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            continue
        cands = sorted(set(s.tolist()))
        best = max(sum(_sweep(s, y, c)) for c in cands)
        youden = max(c for c in cands if sum(_sweep(s, y, c)) >= best - 1e-12)
        assert calibrate_threshold(s, y, "youden") == youden
        sens_ok = [c for c in cands if _sweep(s, y, c)[0] >= 0.75 - 1e-12]
        assert calibrate_threshold(s, y, "sens_at:0.75") == max(sens_ok)
        spec_ok = [c for c in cands if _sweep(s, y, c)[1] >= 0.6 - 1e-12]
        if spec_ok:
            assert calibrate_threshold(s, y, "spec_at:0.6") == min(spec_ok)


def test_sens_at_keeps_the_required_sensitivity():
    rng = np.random.default_rng(2)
    s = np.r_[rng.normal(1, 1, 30), rng.normal(0, 1, 60)]
    y = np.r_[np.ones(30, int), np.zeros(60, int)]
    t = calibrate_threshold(s, y, "sens_at:0.967")
    sens, spec = _sweep(s, y, t)
    assert sens >= 0.967
    higher = [c for c in s if c > t]
    assert all(_sweep(s, y, c)[0] < 0.967 for c in higher)


def test_calibrate_degenerate_labels():
    with pytest.raises(ValueError):
        calibrate_threshold([0.1, 0.2], [1, 1])


def test_calibrate_thresholds_bundle():
    th = calibrate_thresholds({"ungradable": [0.9, 0.2, 0.8, 0.1], "ood": [0.2, 0.01, 0.15, 0.0]},
                              {"ungradable": [1, 0, 1, 0], "ood": [1, 0, 1, 0]})
    assert th.ungradable_prob_threshold == 0.8
    assert th.ood_uncertainty_threshold == 0.15
    assert th.lesion_prob_threshold == 0.5
