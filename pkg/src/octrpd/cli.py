"""Command-line entry point: ``octrpd <subcommand> [flags]``.

Every subcommand takes ``--out-dir`` and ``--seed`` and may read its flags
from a JSON ``--config`` file (command-line values win). The effective
configuration is echoed to ``<out-dir>/config.json``. Failures print one JSON
line ``{"error": kind, "message": ...}`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_USAGE = 2
EXIT_FAILURE = 1

log = logging.getLogger("octrpd")


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _emit_error(kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _geometry(text):
    try:
        n, h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"geometry must look like 16x64x128, got {text!r}") from None
    return n, h, w


# ---------------------------------------------------------------------------
# shared loaders


def _manifest(path, split=None):
    from .data import load_manifest

    m = load_manifest(path)
    if split:
        m = m.subset(split)
        if len(m) == 0:
            raise CliError("input", f"manifest {path} has no entries in split {split!r}")
    return m


def _train_config(args):
    from .augment import AugmentConfig
    from .tinynn import AdamConfig
    from .training import TrainConfig

    aug = AugmentConfig.identity() if args.no_augment else AugmentConfig()
    return TrainConfig(adam=AdamConfig(learning_rate=args.lr), batch_size=args.batch_size,
                       max_iterations=args.max_iterations,
                       patience_iterations=args.patience, eval_every=args.eval_every,
                       augment=aug, seed=args.seed)


def _arch(args):
    doc = json.loads(args.arch) if args.arch else {}
    if not isinstance(doc, dict):
        raise CliError("config", "--arch must be a JSON object")
    return doc


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom_gen(args, out):
    from .phantom import CATEGORIES, Geometry, generate_dataset

    counts = {c: getattr(args, f"n_{c}") for c in CATEGORIES}
    geo = Geometry(*args.geometry)
    m = generate_dataset(out, counts, base_seed=args.seed, geometry=geo,
                         eyes_per_participant=args.eyes_per_participant)
    return {"manifest": str(out / "manifest.json"), "n_volumes": len(m)}


def cmd_split(args, out):
    from .data import rebase_manifest, save_manifest, split_dataset

    m = split_dataset(_manifest(args.manifest), tuple(args.ratios), seed=args.seed)
    save_manifest(rebase_manifest(m, out), out / "manifest.json")
    return {s: len(m.subset(s)) for s in ("train", "val", "test")}


def _train_gate_common(args, out, task):
    from .gates import train_gate
    from .tinynn import save_checkpoint

    m = _manifest(args.manifest)
    res = train_gate(m.subset("train"), m.subset("val"), task, _train_config(args), _arch(args),
                     log_path=out / "train_log.jsonl")
    save_checkpoint(res.net, out / "model.ckpt")
    return {"best_iteration": res.best_iteration, "best_val_kappa": res.best_score,
            "checkpoint": str(out / "model.ckpt")}


def cmd_train_gate(args, out):
    return _train_gate_common(args, out, args.task)


def cmd_train_lesion(args, out):
    return _train_gate_common(args, out, "lesion_vs_control")


def cmd_train_ood(args, out):
    from .gates import train_ensemble

    m = _manifest(args.manifest)
    ens, results = train_ensemble(m.subset("train"), m.subset("val"), args.task,
                                  _train_config(args), args.members, _arch(args), args.jobs)
    ens.save(out / "ensemble")
    for i, r in enumerate(results):
        r.write_log(out / f"train_log_{i:02d}.jsonl")
    return {"members": len(ens), "best_val_kappa": [r.best_score for r in results],
            "ensemble": str(out / "ensemble")}


def seg_corpus(manifest):
    """Stacked normalized B-scans, masks and participant ids of gradable masked volumes."""
    from .data import GradeLabel

    xs, ys, pids = [], [], []
    for e in manifest:
        if e.mask is None or e.grade == GradeLabel.UNGRADABLE:
            continue
        vol = manifest.load(e)
        xs.append(vol.normalized())
        ys.append(manifest.load_mask(e, vol.shape).labels)
        pids += [e.participant_id] * vol.n_bscans
    if not xs:
        raise CliError("input", "no gradable volumes with masks")
    return np.concatenate(xs), np.concatenate(ys), pids


def cmd_train_seg(args, out):
    from .segmenter import SegTrainOptions, plan_folds, train_seg

    m = _manifest(args.manifest)
    pool = m.filter(lambda e: e.split in ("train", "val", "unassigned"))
    x, y, pids = seg_corpus(pool)
    plan = plan_folds(pids, args.folds, seed=args.seed)
    opts = SegTrainOptions(patch=tuple(int(v) for v in args.patch), depth=args.depth,
                           base_width=args.base_width)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    ens, results = train_seg(x, y, plan, _train_config(args), opts, log_dir=out / "logs")
    ens.save(out / "segmenter")
    return {"folds": plan.k, "best_val_dice": [r.best_score for r in results],
            "segmenter": str(out / "segmenter")}


def cmd_calibrate(args, out):
    from .gates import EnsembleModel, GateThresholds, Task, calibrate_threshold, task_arrays
    from .gates import ensemble_variance, predict_arrays
    from .tinynn import load_checkpoint

    val = _manifest(args.manifest, "val")
    items = [(val.load(e), e.grade) for e in val]
    doc = {}
    if args.ungradable:
        x, y, _ = task_arrays(items, Task.UNGRADABLE_VS_REST, "val")
        s = predict_arrays(load_checkpoint(args.ungradable), x)[:, 1]
        doc["ungradable_prob_threshold"] = calibrate_threshold(s, y, args.policy)
    if args.ood:
        x, y, _ = task_arrays(items, Task.UNGRADABLE_VS_REST, "val")
        s = ensemble_variance(EnsembleModel.load(args.ood).member_probs(x))
        doc["ood_uncertainty_threshold"] = calibrate_threshold(s, y, args.ood_policy)
    if args.lesion:
        x, y, _ = task_arrays(items, Task.LESION_VS_CONTROL, "val")
        s = predict_arrays(load_checkpoint(args.lesion), x)[:, 1]
        doc["lesion_prob_threshold"] = calibrate_threshold(s, y, args.policy)
    th = GateThresholds(**{k: float(np.clip(v, 0, 1)) if "prob" in k else max(0.0, v)
                           for k, v in doc.items()})
    th.save(out / "thresholds.json")
    return th.to_json()


def cmd_run(args, out):
    from .gates import GateThresholds
    from .pipeline import RunConfig, run_pipeline

    th = GateThresholds.load(args.thresholds) if args.thresholds else GateThresholds()
    cfg = RunConfig(args.ungradable, args.ood, args.lesion, args.seg, th,
                    seg_threshold=args.seg_threshold, froc_thresholds=tuple(args.froc_thresholds),
                    out_dir=str(out), seed=args.seed, segment_all=args.segment_all,
                    bootstrap_n=args.bootstrap, n_jobs=args.jobs)
    verdicts, report = run_pipeline(_manifest(args.manifest, args.split), cfg)
    return {"volumes": len(verdicts), "stages": report.stages}


def _read_scores(path):
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or not {"score", "label"} <= set(rows[0]):
            raise CliError("input", f"{path}: CSV needs 'score' and 'label' columns")
        return [float(r["score"]) for r in rows], [int(float(r["label"])) for r in rows]
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict) or "scores" not in doc or "labels" not in doc:
        raise CliError("input", f"{path}: JSON needs 'scores' and 'labels' arrays")
    return doc["scores"], doc["labels"]


def cmd_eval_cls(args, out):
    from .metrics import pr_curve, roc_curve
    from .metrics import classification_report
    from .pipeline import EvalReport, emit_plot_data

    if args.predictions:
        scores, labels = _read_scores(args.predictions)
    else:
        if not (args.model and args.manifest):
            raise CliError("usage", "eval-cls needs --predictions or --model with --manifest")
        from .gates import predict_arrays, task_arrays
        from .tinynn import load_checkpoint

        m = _manifest(args.manifest, args.split)
        x, labels, _ = task_arrays([(m.load(e), e.grade) for e in m], args.task, args.split or "eval")
        scores = predict_arrays(load_checkpoint(args.model), x)[:, 1]
    metrics = classification_report(scores, labels, args.threshold)
    _write_json(out / "metrics.json", metrics)
    rep = EvalReport(classification={"model": {"metrics": metrics, "roc": roc_curve(scores, labels),
                                               "pr": pr_curve(scores, labels)}})
    emit_plot_data(rep, out)
    return metrics


def cmd_eval_seg(args, out):
    from .metrics import agreement_report
    from .segmenter import SegEnsemble, mask_from_probs, predict_volume, quantify
    from .metrics.detection import dice_table

    ens = SegEnsemble.load(args.seg)
    m = _manifest(args.manifest, args.split).filter(lambda e: e.mask is not None)
    pred, truth, areas = [], [], {"model": {}, "truth": {}}
    for e in m:
        vol = m.load(e)
        t = m.load_mask(e, vol.shape).labels
        p = mask_from_probs(predict_volume(ens, vol), args.seg_threshold)
        pred += list(p)
        truth += list(t)
        for who, mask in (("model", p), ("truth", t)):
            for cat, v in quantify(mask, vol).enface_mm2.items():
                areas[who].setdefault(cat, []).append(v)
    if not pred:
        raise CliError("input", "no volumes with truth masks")
    doc = {"dice": dice_table(pred, {"truth": truth}), "icc": {}}
    for cat in areas["model"]:
        try:
            table = agreement_report(areas["model"][cat], {"truth": areas["truth"][cat]})
            doc["icc"][cat] = table.to_json()
        except ValueError as exc:
            doc["icc"][cat] = {"skipped": str(exc)}
    _write_json(out / "metrics.json", doc)
    return {"n_bscans": len(pred)}


def cmd_froc(args, out):
    from .metrics import froc
    from .pipeline import write_froc_csv
    from .segmenter import SegEnsemble, predict_volume

    ens = SegEnsemble.load(args.seg)
    m = _manifest(args.manifest, args.split).filter(lambda e: e.mask is not None)
    probs, truth = [], []
    for e in m:
        vol = m.load(e)
        probs += list(predict_volume(ens, vol))
        truth += list(m.load_mask(e, vol.shape).labels)
    if not probs:
        raise CliError("input", "no volumes with truth masks")
    doc = {}
    for cat in args.categories:
        pts = froc(probs, truth, cat, args.thresholds, bootstrap_n=args.bootstrap, seed=args.seed)
        write_froc_csv(pts, out / f"froc_{cat}.csv")
        doc[cat] = [p.to_json() for p in pts]
    _write_json(out / "froc.json", doc)
    return {"categories": list(doc), "n_bscans": len(probs)}


def cmd_gradcheck(args, out):
    from .tinynn import gradcheck as gc

    results = gc.layer_suite(seed=args.seed, tol=args.tol)
    doc = {k: r.to_json() for k, r in results.items()}
    _write_json(out / "gradcheck.json", doc)
    for k, r in results.items():
        print(f"{k}: {'PASS' if r.passed else 'FAIL'} max_rel_error={r.max_rel_error:.3e}")
    if not all(r.passed for r in results.values()):
        raise CliError("gradcheck", "one or more layers failed the gradient check")
    return {"layers": len(results)}


# ---------------------------------------------------------------------------
# parser


def _common(p, out_required=True):
    p.add_argument("--out-dir", required=out_required, help="directory for every output")
    p.add_argument("--seed", type=int, default=0, help="seed threaded through all randomness")
    p.add_argument("--config", help="JSON file of flag values (command line wins)")


def _train_flags(p):
    p.add_argument("--manifest", required=True, help="manifest with train/val splits")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--max-iterations", type=int, default=2000)
    p.add_argument("--patience", type=int, default=500, help="early-stopping patience in iterations")
    p.add_argument("--eval-every", type=int, default=25)
    p.add_argument("--no-augment", action="store_true", help="disable training augmentation")
    p.add_argument("--arch", help="JSON object of architecture keyword arguments")


def build_parser():
    from .phantom import CATEGORIES

    parser = _Parser(prog="octrpd", description="Drusen/RPD OCT screening framework on phantoms.")
    parser.add_argument("--version", action="version", version=f"octrpd {__version__}")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom-gen", help="write a synthetic phantom corpus and manifest")
    _common(p)
    for c in CATEGORIES:
        p.add_argument(f"--n-{c}", type=int, default=0, help=f"number of {c} phantoms")
    p.add_argument("--geometry", type=_geometry, default=(16, 64, 128), help="BxHxW")
    p.add_argument("--eyes-per-participant", type=int, default=1)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("split", help="participant-level train/val/test split")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratios", type=_floats, default=[0.6, 0.2, 0.2])
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-gate", help="train a volume gate (ungradable by default)")
    _common(p)
    _train_flags(p)
    p.add_argument("--task", default="ungradable_vs_rest",
                   choices=["ungradable_vs_rest", "lesion_vs_control"])
    p.set_defaults(func=cmd_train_gate)

    p = sub.add_parser("train-ood", help="train the deep-ensemble outlier detector")
    _common(p)
    _train_flags(p)
    p.add_argument("--task", default="ungradable_vs_rest",
                   choices=["ungradable_vs_rest", "lesion_vs_control"])
    p.add_argument("--members", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1, help="members trained concurrently")
    p.set_defaults(func=cmd_train_ood)

    p = sub.add_parser("train-lesion", help="train the drusen/RPD vs control classifier")
    _common(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train_lesion)

    p = sub.add_parser("train-seg", help="k-fold U-Net ensemble on masked B-scans")
    _common(p)
    _train_flags(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--patch", type=_geometry_2d, default=(32, 64), help="HxW training patch")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--base-width", type=int, default=8)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("calibrate", help="choose gate thresholds on the validation split")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ungradable")
    p.add_argument("--ood")
    p.add_argument("--lesion")
    p.add_argument("--policy", default="youden", help="youden | sens_at:X | spec_at:X")
    p.add_argument("--ood-policy", default="youden")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="run all four stages on a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None, help="restrict to one split")
    p.add_argument("--ungradable", required=True, help="ungradable gate checkpoint")
    p.add_argument("--ood", required=True, help="outlier ensemble directory")
    p.add_argument("--lesion", required=True, help="lesion classifier checkpoint")
    p.add_argument("--seg", required=True, help="segmenter ensemble directory")
    p.add_argument("--thresholds", help="GateThresholds JSON")
    p.add_argument("--seg-threshold", type=float, default=0.0)
    p.add_argument("--froc-thresholds", type=_floats,
                   default=[round(1.0 - i / 20, 2) for i in range(20)])
    p.add_argument("--segment-all", action="store_true",
                   help="segment every gated-in volume, not just classifier positives")
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval-cls", help="classification metrics from scores or a model")
    _common(p)
    p.add_argument("--predictions", help="JSON {scores, labels} or CSV score,label")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--split", default=None)
    p.add_argument("--task", default="ungradable_vs_rest",
                   choices=["ungradable_vs_rest", "lesion_vs_control"])
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval_cls)

    p = sub.add_parser("eval-seg", help="Dice and area ICC of a segmenter against truth masks")
    _common(p)
    p.add_argument("--seg", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--seg-threshold", type=float, default=0.0)
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("froc", help="FROC curves with bootstrap intervals")
    _common(p)
    p.add_argument("--seg", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--categories", type=lambda s: s.split(","), default=["drusen", "rpd"])
    p.add_argument("--thresholds", type=_floats,
                   default=[round(1.0 - i / 20, 2) for i in range(20)])
    p.add_argument("--bootstrap", type=int, default=1000)
    p.set_defaults(func=cmd_froc)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer type")
    _common(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _geometry_2d(text):
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"patch must look like 32x64, got {text!r}") from None
    return h, w


def _apply_config(parser, argv):
    """Re-parse with the --config file's values installed as defaults."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError("config", f"cannot read config {args.config}: {exc}") from None
    if not isinstance(doc, dict):
        raise CliError("config", "config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise CliError("config", f"unknown config key {key!r} for {args.command}")
        defaults[dest] = value
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _echo(args):
    doc = {k: v for k, v in vars(args).items() if k not in ("func", "config", "out_dir")}
    return json.loads(json.dumps(doc, default=list))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", _echo(args))
        summary = args.func(args, out)
    except CliError as exc:
        _emit_error(exc.kind, exc)
        return EXIT_USAGE if exc.kind in ("usage", "config") else EXIT_FAILURE
    except FileNotFoundError as exc:
        _emit_error("missing_input", exc)
        return EXIT_FAILURE
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        _emit_error(type(exc).__name__, exc)
        return EXIT_FAILURE
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
