"""Command-line interface.

Subcommands:
  meta-train      evolve a loss function for a dataset, write .loss.json + manifest
  train           train a base model under a loss document or builtin loss
  bench-smoothing wall-time benchmark of the smoothing-loss kernels
  delta-report    loss-behavior deltas at the null-epoch / zero-error regimes
  inspect         print a loss document as an infix expression with weights

Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import EvolutionConfig, load_config
from .datasets import CLASSIFICATION, REGRESSION, load_csv, synth_task
from .errors import ConfigError, DocumentError, ExprParseError, UsageError
from .evolution import run_evolution
from .expressions import to_infix
from .filters import WORST_FITNESS
from .learners import BUILTIN_EXPRESSIONS, builtin_loss, train_with_loss
from .network import MetaLossNetwork
from .smoothing import (LOSS_IDS, SmoothingParams, behavior_delta, bench_csv,
                        bench_complexity)

WORKERS_ENV = "LOSSFORGE_WORKERS"


class _UsageExit(Exception):
    def __init__(self, message):
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageExit(message)


def parse_dataset_spec(spec: str, seed: int = 0):
    """Dataset specifications: ``blobs:key=value,...``, ``linreg:...`` or
    ``csv:path=...,target=...,kind=...``."""
    if ":" not in spec:
        raise UsageError(f"malformed dataset spec {spec!r}; expected "
                         "'kind:key=value,...'")
    kind, _, body = spec.partition(":")
    opts = {}
    if body:
        for item in body.split(","):
            if "=" not in item:
                raise UsageError(f"malformed option {item!r} in dataset spec")
            k, _, v = item.partition("=")
            opts[k.strip()] = v.strip()
    if kind == "blobs":
        return synth_task("blobs",
                          n=int(opts.get("n", 500)),
                          seed=int(opts.get("seed", seed)),
                          classes=int(opts.get("classes", 2)),
                          dim=int(opts.get("dim", 2)),
                          separation=float(opts.get("sep", 4.0)))
    if kind == "linreg":
        return synth_task("linear-regression",
                          n=int(opts.get("n", 500)),
                          seed=int(opts.get("seed", seed)),
                          dim=int(opts.get("dim", 5)),
                          noise=float(opts.get("noise", 0.1)))
    if kind == "csv":
        if "path" not in opts or "target" not in opts or "kind" not in opts:
            raise UsageError("csv dataset spec needs path=, target= and kind=")
        if opts["kind"] not in (CLASSIFICATION, REGRESSION):
            raise UsageError("csv kind must be classification or regression")
        target = opts["target"]
        if target.lstrip("-").isdigit():
            target = int(target)
        return load_csv(opts["path"], target, opts["kind"],
                        seed=int(opts.get("seed", seed)),
                        has_header=opts.get("header", "true").lower() != "false",
                        split_preset=opts.get("preset", "tabular"))
    raise UsageError(f"unknown dataset kind {kind!r}")


def _task_from_config(cfg: EvolutionConfig, seed: int):
    if not cfg.dataset:
        raise ConfigError("dataset", "missing dataset specification")
    d = dict(cfg.dataset)
    kind = d.pop("kind", None)
    if kind == "blobs":
        return synth_task("blobs", n=int(d.pop("n", 500)),
                          seed=int(d.pop("seed", seed)),
                          classes=int(d.pop("classes", 2)),
                          dim=int(d.pop("dim", 2)),
                          separation=float(d.pop("sep", 4.0)))
    if kind == "linreg":
        return synth_task("linear-regression", n=int(d.pop("n", 500)),
                          seed=int(d.pop("seed", seed)),
                          dim=int(d.pop("dim", 5)),
                          noise=float(d.pop("noise", 0.1)))
    if kind == "csv":
        try:
            return load_csv(d["path"], d["target"], d["task"],
                            seed=int(d.pop("seed", seed)),
                            has_header=bool(d.pop("header", True)),
                            split_preset=d.pop("preset", "tabular"))
        except KeyError as exc:
            raise ConfigError(f"dataset.{exc.args[0]}", "missing field") from exc
    raise ConfigError("dataset.kind", "must be blobs, linreg or csv")


def cmd_meta_train(args) -> int:
    cfg = load_config(args.config)
    if args.no_local_search:
        cfg.local_search = False
    if args.workers is not None:
        cfg.workers = args.workers
    elif os.environ.get(WORKERS_ENV):
        cfg.workers = int(os.environ[WORKERS_ENV])
    cfg.validate()
    seed = args.seed if args.seed is not None else cfg.gp.rng_seed
    task = _task_from_config(cfg, seed)
    run = run_evolution(task, cfg, seed=seed)

    os.makedirs(args.out, exist_ok=True)
    best = run.best
    loss_path = os.path.join(args.out, "best.loss.json")
    if best.net is None:
        raise RuntimeError("no usable candidate survived the run")
    best.net.meta.update({
        "seed": seed,
        "fitness": None if best.fitness == WORST_FITNESS else best.fitness,
        "task": task.kind,
        "mode": "evolved-local-search" if cfg.local_search else "gp-only",
    })
    best.net.save(loss_path)
    manifest_path = os.path.join(args.out, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write(run.manifest_json())
        fh.write("\n")
    stats_path = os.path.join(args.out, "filter_stats.csv")
    with open(stats_path, "w", encoding="utf-8") as fh:
        fh.write(run.filter_stats_csv())
    if cfg.local_search and best.optimize_result is not None:
        with open(os.path.join(args.out, "meta_trajectory.csv"),
                  "w", encoding="utf-8") as fh:
            fh.write(best.optimize_result.trajectory_csv())
    print(f"best: {to_infix(best.tree)}  fitness={best.fitness:.6g}")
    print(f"wrote {loss_path}, {manifest_path}, {stats_path}")
    return 0


def cmd_train(args) -> int:
    if bool(args.loss) == bool(args.builtin):
        raise UsageError("exactly one of --loss or --builtin is required")
    net = (MetaLossNetwork.load(args.loss) if args.loss
           else builtin_loss(args.builtin))
    task = parse_dataset_spec(args.dataset, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    result = train_with_loss(net, task, steps=args.steps, lr=args.lr, rng=rng,
                             momentum=args.momentum,
                             batch_size=args.batch_size,
                             hidden=tuple(args.hidden))
    metric_name = "error_rate" if task.kind == CLASSIFICATION else "mse"
    payload = {
        "loss": args.loss or args.builtin,
        "dataset": args.dataset,
        "steps": result.steps_done,
        "diverged": result.diverged,
        "metric": metric_name,
        "val": result.val_metric,
        "test": result.test_metric,
        "train_loss_trajectory": result.train_losses,
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(f"val {metric_name}={result.val_metric:.6g} "
          f"test {metric_name}={result.test_metric:.6g}"
          + (" [diverged]" if result.diverged else ""))
    return 0


def cmd_bench_smoothing(args) -> int:
    losses = [x.strip() for x in args.losses.split(",") if x.strip()]
    for loss_id in losses:
        if loss_id not in LOSS_IDS:
            raise UsageError(f"unknown loss id {loss_id!r}; "
                             f"available: {', '.join(LOSS_IDS)}")
    classes = [int(x) for x in args.classes.split(",") if x.strip()]
    rows = bench_complexity(losses, classes, batch=args.batch,
                            reps=args.reps, seed=args.seed)
    text = bench_csv(rows)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def cmd_delta_report(args) -> int:
    params = SmoothingParams(xi=args.xi, n_classes=args.classes,
                             gamma=args.gamma, phi0=args.phi0,
                             phi1=args.phi1)
    losses = ([x.strip() for x in args.loss.split(",")]
              if args.loss != "all" else list(LOSS_IDS))
    lines = ["loss_id,regime,n_classes,xi,gamma,phi0,phi1,epsilon,"
             "delta_target,delta_nontarget"]
    for loss_id in losses:
        if loss_id not in LOSS_IDS:
            raise UsageError(f"unknown loss id {loss_id!r}")
        dt, dn = behavior_delta(loss_id, args.regime, params,
                                epsilon=args.epsilon)
        eps_txt = "" if args.regime == "null" else f"{args.epsilon:g}"
        lines.append(f"{loss_id},{args.regime},{args.classes},{args.xi:g},"
                     f"{args.gamma:g},{args.phi0:g},{args.phi1:g},{eps_txt},"
                     f"{dt!r},{dn!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def cmd_inspect(args) -> int:
    net = MetaLossNetwork.load(args.loss)
    print(f"expression: {to_infix(net.tree)}")
    print(f"prefix:     {net.tree}")
    print(f"activation: {net.activation}")
    print(f"weights:    [{', '.join(repr(float(w)) for w in net.weights)}]")
    if net.meta:
        print(f"meta:       {json.dumps(net.meta, sort_keys=True)}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="lossforge",
                     description="Evolve, tune, inspect and benchmark loss functions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meta-train", help="evolve a loss function")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-local-search", action="store_true",
                   help="ablation mode: skip loss-weight optimization")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("train", help="train a base model under a loss")
    p.add_argument("--loss", help="path to a .loss.json document")
    p.add_argument("--builtin", choices=sorted(BUILTIN_EXPRESSIONS))
    p.add_argument("--dataset", required=True,
                   help="blobs:..., linreg:... or csv:path=...,target=...,kind=...")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--hidden", type=int, nargs="*", default=[32])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench-smoothing", help="kernel wall-time benchmark")
    p.add_argument("--losses", default="lsr,sparse_lsr")
    p.add_argument("--classes", default="10,100,1000,10000")
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--reps", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_smoothing)

    p = sub.add_parser("delta-report", help="loss-behavior deltas")
    p.add_argument("--loss", default="all",
                   help="comma list of loss ids, or 'all'")
    p.add_argument("--regime", choices=("null", "zero"), required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--xi", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--phi0", type=float, default=1.0)
    p.add_argument("--phi1", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_delta_report)

    p = sub.add_parser("inspect", help="print a loss document")
    p.add_argument("--loss", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageExit as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (UsageError, ConfigError, DocumentError, ExprParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        # argparse exits directly for --help; normalize other exits
        code = exc.code if isinstance(exc.code, int) else 0
        return code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
