"""Command-line harness.

Subcommands: ``synth`` (generate record files), ``calibrate``, ``predict``,
``evaluate``, ``run`` (full multi-trial protocol from a JSON config), and
``conftr`` (conformal-training demo comparison). Errors exit nonzero with a
machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .calibration import (
    CalibratedModel,
    CalibrationSet,
    calibrate_class_balanced,
    calibrate_marginal,
)
from .errors import ConfigError, CPKitError
from .harness import ExperimentConfig, SubsetMap, method_label, run_experiment
from .metrics import evaluate_sets
from .prediction import predict_batch, sets_to_jsonl
from .records import load_records, save_records
from .scores import Method, ScoreConfig


def _score_config_from_args(args) -> ScoreConfig:
    if args.preset:
        return ScoreConfig.preset(args.preset)
    method = Method(args.method)
    if method is Method.RAPS:
        if args.lam is None or args.kreg is None:
            raise ConfigError("raps needs --lambda and --kreg (or --preset)")
        return ScoreConfig(method, lam=args.lam, k_reg=args.kreg)
    return ScoreConfig(method)


def _add_method_flags(p: argparse.ArgumentParser):
    p.add_argument("--method", choices=["thr", "aps", "raps"], default="thr")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="raps penalty weight")
    p.add_argument("--kreg", type=int, default=None, help="raps penalty-free rank count")
    p.add_argument("--preset", choices=["conv", "transformer"], default=None,
                   help="raps parameter preset by model family")


def cmd_synth(args) -> int:
    from .synthetic import LabelPrior, OracleWorld, ShiftKind, ShiftSpec, sample_records

    world = OracleWorld.sample(
        args.k, dim=args.dim, spread=args.spread, noise_scale=args.noise_scale,
        seed=args.world_seed,
    )
    if args.prior == "zipf":
        prior = LabelPrior.zipf(args.k, args.zipf_s)
    else:
        prior = LabelPrior.uniform(args.k)
    shift = ShiftSpec(ShiftKind(args.shift), args.severity)
    rs = sample_records(
        world, prior, args.n, shift, seed=args.seed,
        dataset=args.dataset_name, model=args.model_name,
    )
    save_records(rs, args.out)
    print(json.dumps({"written": str(args.out), "n": rs.num_examples, "k": rs.num_classes}))
    return 0


def cmd_calibrate(args) -> int:
    records = load_records(args.records)
    cfg = _score_config_from_args(args)
    cal = CalibrationSet.from_records(records, cfg)
    if args.class_balanced:
        model = calibrate_class_balanced(cal, args.alpha, records.num_classes)
    else:
        model = calibrate_marginal(cal, args.alpha)
    out = Path(args.out)
    out.write_text(model.to_json() + "\n")
    print(json.dumps({"written": str(out), "method": method_label(cfg), "alpha": args.alpha}))
    return 0


def cmd_predict(args) -> int:
    records = load_records(args.records)
    model = CalibratedModel.from_json(Path(args.model).read_text())
    sets = predict_batch(records, model)
    Path(args.out).write_text(sets_to_jsonl(sets))
    print(json.dumps({"written": str(args.out), "n": len(sets)}))
    return 0


def cmd_evaluate(args) -> int:
    records = load_records(args.records)
    model = CalibratedModel.from_json(Path(args.model).read_text())
    subset = None
    if args.subset_map:
        subset = SubsetMap.from_file(args.subset_map)
        if subset.classes.max() > records.num_classes:
            raise ConfigError(
                f"subset map reaches class {int(subset.classes.max())} "
                f"but K={records.num_classes}"
            )
        records = subset.apply(records)
    sets = predict_batch(records, model)
    report = evaluate_sets(
        sets,
        records.labels,
        records.logits,
        records.num_classes,
        model.alpha,
        class_universe=subset.classes if subset is not None else None,
    )
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_json_file(args.config)
    overrides = {
        key: value
        for key, value in (
            ("out_dir", args.out),
            ("trials", args.trials),
            ("split_fraction", args.split),
            ("seed", args.seed),
        )
        if value is not None
    }
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    result = run_experiment(cfg)
    if cfg.out_dir:
        print(json.dumps({"written": str(cfg.out_dir), "cells": len(result.cells)}))
    else:
        print(json.dumps(result.to_dict(), indent=2))
    return 0


def cmd_conftr(args) -> int:
    from . import conftr

    cfg = conftr.SmoothCPConfig(
        temperature=args.temperature,
        kappa=args.kappa,
        size_weight=args.size_weight,
        alpha=args.alpha,
        dispersion=args.dispersion,
    )
    report = conftr.compare_with_baseline(
        num_classes=args.k,
        dim=args.dim,
        n_train=args.n_train,
        cfg=cfg,
        epochs=args.epochs,
        lr=args.lr,
        seeds=list(range(args.seed, args.seed + args.seeds)),
        out_dir=args.out,
    )
    print(json.dumps(report, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic record file")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--spread", type=float, default=1.6)
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--prior", choices=["uniform", "zipf"], default="uniform")
    p.add_argument("--zipf-s", type=float, default=1.5)
    p.add_argument("--shift", choices=["none", "feature_noise", "mean_drift", "label_prior"],
                   default="none")
    p.add_argument("--severity", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--world-seed", type=int, default=0)
    p.add_argument("--dataset-name", default="synthetic")
    p.add_argument("--model-name", default="oracle")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="fit a conformal threshold from a record file")
    p.add_argument("--records", required=True)
    _add_method_flags(p)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--class-balanced", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help="write prediction sets as JSON lines")
    p.add_argument("--records", required=True)
    p.add_argument("--model", required=True, help="calibrated-model JSON file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="evaluate a calibrated model on a record file")
    p.add_argument("--records", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--subset-map", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="run the full protocol from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config's output directory")
    p.add_argument("--trials", type=int, default=None, help="override the config's trial count")
    p.add_argument("--split", type=float, default=None, help="override the calibration fraction")
    p.add_argument("--seed", type=int, default=None, help="override the base seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("conftr", help="train with conformal loss and compare to baseline")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--kappa", type=int, default=1)
    p.add_argument("--size-weight", type=float, default=1.0)
    p.add_argument("--dispersion", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of paired seeds to run")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_conftr)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CPKitError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    except OSError as e:
        print(json.dumps({"error": "OSError", "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
