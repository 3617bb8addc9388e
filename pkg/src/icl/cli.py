"""Command-line entry point: ``icl {verify,curves,simulate,train,sweep,fetch-hints}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .core import ContractViolation, IclParams
from .data import DATASETS, DatasetLoadError, fetch_hints
from .energy import crossing_point, force_curves, write_curves_csv

log = logging.getLogger("icl")


def _out_dir(args, default):
    return Path(args.out or default)


def cmd_verify(args) -> int:
    g_fn = ex.broken_kernel if args.broken_kernel else None
    ok, text = ex.run_verify(seed=args.seed, n_batches=args.batches, n=args.n, dim=args.dim,
                             g_fn=g_fn, lemma2=not args.skip_lemma2,
                             gradient_seeds=args.gradient_seeds)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.txt").write_text(text)
    return 0 if ok else 1


def cmd_curves(args) -> int:
    if args.d_max <= 0:
        raise ContractViolation("--d-max must be > 0")
    if args.steps < 2:
        raise ContractViolation("--steps must be >= 2")
    params = IclParams(args.alpha, args.beta)
    grid = np.linspace(args.d_min, args.d_max, args.steps)
    curves = force_curves(params, grid, args.n_classes)
    d_star = crossing_point(params)
    out = _out_dir(args, ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "curves.csv"
    write_curves_csv(path, curves, d_star)
    print(f"crossing_point {d_star!r}")
    print(f"wrote {path}")
    return 0


def cmd_simulate(args) -> int:
    cfg = dict(ex.SIMULATE_DEFAULTS)
    if args.config:
        cfg.update(ex.load_config(args.config, ex.SIMULATE_DEFAULTS))
    if args.seed is not None:
        cfg["seed"] = args.seed
    summary = ex.run_simulation(cfg, _out_dir(args, "simulation"))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _train_config(args):
    user = ex.load_config(args.config, ex.TRAIN_DEFAULTS) if args.config else {}
    overrides = {"dataset": args.dataset}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    return ex.resolve_train_config(user, **overrides)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    summary = ex.run_training(cfg, _out_dir(args, "runs"))
    t, a = summary["task_metric"], summary["adversary_metric"]
    print(f"{cfg['dataset']} {cfg['regularizer']} lambda={cfg['lam']}: "
          f"{summary['task_metric_name']} {t['mean']:.4f} +/- {t['std']:.4f}, "
          f"adversary {summary['adversary_metric_name']} {a['mean']:.4f} +/- {a['std']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _train_config(args)
    selection = ex.run_sweep(cfg, _out_dir(args, "sweep"))
    if selection["fallback_unregularized"]:
        print("no candidate met the task-metric band; using the unregularised model")
    else:
        print(f"chosen lambda {selection['chosen_lambda']}")
    return 0


def cmd_fetch_hints(args) -> int:
    report = fetch_hints()
    for entry in report:
        status = "ok" if entry["ok"] else ("missing" if entry["found_rows"] is None else "row count mismatch")
        print(f"{entry['dataset']:<8s} {entry['file']:<28s} {status:<20s} {entry['path']}")
        if not entry["ok"]:
            print(f"         fetch from {entry['url']} (expect {entry['expected_rows']} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", type=Path, help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=None, help="output directory")

    p = sub.add_parser("verify", help="check loss identities, gradients and the MSE bound")
    common(p, config=False)
    p.add_argument("--batches", type=int, default=100)
    p.add_argument("--n", type=int, default=64, help="rows per random batch")
    p.add_argument("--dim", type=int, default=8, help="representation dimension")
    p.add_argument("--gradient-seeds", type=int, default=20)
    p.add_argument("--skip-lemma2", action="store_true")
    p.add_argument("--broken-kernel", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("curves", help="write attraction/repulsion curves and the crossing point")
    common(p, config=False)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--d-min", type=float, default=0.01)
    p.add_argument("--d-max", type=float, default=5.0)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--n-classes", type=int, default=None)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("simulate", help="particle gradient-flow simulation")
    common(p)
    p.set_defaults(func=cmd_simulate)

    for name, func, text in (("train", cmd_train, "train and measure invariance"),
                             ("sweep", cmd_sweep, "grid-search the regulariser weight")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--dataset", choices=DATASETS, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("fetch-hints", help="list dataset files and where to get them")
    p.set_defaults(func=cmd_fetch_hints)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (ex.ConfigError, ContractViolation, DatasetLoadError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
