"""Command-line surface: dataset generation, training, sweeping, evaluation,
and prototype visualization.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
The PPX_THREADS environment variable caps metric worker threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import dataset as D
from .config import load_config, validate_config
from .errors import ConfigError, DataError, EngineError, NumericError
from .metrics import evaluate_model
from .sweep import HyperparamSpace, run_sweep, training_evaluator
from .trainer import checkpoint_load, run_training
from .visualize import visualize_checkpoint


def _thread_cap(requested: int) -> int:
    env = os.environ.get("PPX_THREADS")
    if env is None:
        return requested
    try:
        return max(1, min(requested, int(env)))
    except ValueError:
        raise ConfigError(f"PPX_THREADS must be an integer, got {env!r}")


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    dcfg = cfg["dataset"]
    ds = D.generate_synthetic(dcfg["num_classes"], dcfg["n_per_class"],
                              image_size=dcfg["image_size"], seed=cfg["seed"],
                              test_per_class=dcfg["test_per_class"],
                              channels=dcfg["channels"],
                              glyph_fraction=dcfg["glyph_fraction"])
    D.save(ds, args.out)
    print(json.dumps({"out": str(args.out), "images": len(ds.images),
                      "splits": {k: len(v) for k, v in ds.splits.items()}}))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = D.load(args.data)
    result = run_training(cfg, ds, args.out, resume=args.resume)
    print(json.dumps(result))
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.objective:
        cfg["sweep"]["objective"] = args.objective
    if args.max_trials:
        cfg["sweep"]["max_trials"] = args.max_trials
    if args.parallel:
        cfg["sweep"]["parallelism"] = args.parallel
    cfg = validate_config(cfg)
    ds = D.load(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    space = HyperparamSpace(deformable=cfg["sweep"]["deformable"])
    evaluate = training_evaluator(cfg, ds, out, cfg["sweep"]["objective"],
                                  compute_proto_metrics=cfg["sweep"]["compute_proto_metrics"])
    best, history = run_sweep(
        space, evaluate, cfg["sweep"]["objective"], cfg["sweep"]["max_trials"],
        out / "sweep.json", seed=cfg["seed"], parallelism=cfg["sweep"]["parallelism"],
        max_wall_seconds=cfg["sweep"]["max_wall_seconds"],
        gamma=cfg["sweep"]["quantile_gamma"], n_startup=cfg["sweep"]["n_startup"],
        n_candidates=cfg["sweep"]["n_candidates"])
    print(json.dumps({"best": best.to_json() if best else None, "trials": len(history)}))
    return 0


def _resolve_checkpoint(path) -> Path:
    p = Path(path)
    if p.name == "state.json":
        return p.parent
    if (p / "state.json").exists():
        return p
    raise DataError(f"no checkpoint found at {path}")


def cmd_eval(args) -> int:
    ckpt = _resolve_checkpoint(args.checkpoint)
    model, _opt, cfg, _cursor, _early = checkpoint_load(ckpt)
    ds = D.load(args.data)
    if ds.num_classes != model.num_classes:
        raise ConfigError(f"checkpoint was trained for {model.num_classes} classes but the "
                          f"dataset has {ds.num_classes}")
    mcfg = cfg["metrics"]
    seed = args.seed if args.seed is not None else cfg["seed"]
    report = evaluate_model(model, ds, args.split, noise_sigma=mcfg["noise_sigma"],
                            tau=mcfg["consistency_tau"], seed=seed,
                            n_draws=mcfg["n_noise_draws"],
                            n_threads=_thread_cap(mcfg["n_threads"]))
    print(json.dumps(report.to_json(), sort_keys=True))
    return 0


def cmd_visualize(args) -> int:
    ckpt = _resolve_checkpoint(args.checkpoint)
    model, *_ = checkpoint_load(ckpt)
    ds = D.load(args.data)
    index = visualize_checkpoint(model, ds, args.out, n_queries=args.queries)
    print(json.dumps({"out": str(args.out), "prototypes": index["num_prototypes"]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protopart",
        description="Prototypical-part network engine: generate data, train, sweep, "
                    "evaluate, visualize.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic parts dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one full training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="Bayesian hyperparameter sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--objective", choices=["acc", "aps"])
    p.add_argument("--max-trials", type=int)
    p.add_argument("--parallel", type=int)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("eval", help="metrics report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["val", "test"], default="val")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("visualize", help="write prototype/prediction artifacts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--queries", type=int)
    p.set_defaults(fn=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (DataError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4
    except EngineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
