"""Command-line entry point.

    dipa init-weights --config tiny --seed 0 --out w.dipaw
    dipa params --config vit-small --d-t 7 --n-way 5 --d-f 4 [--json]
    dipa run --config run.json --episodes 600 --out results/
    dipa sweep --config run.json --param d_t --values 0 1 2 3 4 --out sweep/
    dipa gradcheck --config tiny --seed 0

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

from . import backbone as B
from . import container
from .adapter import param_report
from .errors import DipaError, NumericalError, UsageError
from .gradcheck import THRESHOLDS, run_suite
from .runner import resolve_config, run_experiment
from .tensor import Rng

SWEEP_PARAMS = {"d_t": int, "d_f": int, "iterations": int}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_json(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None


def cmd_init_weights(args) -> int:
    config = B.load_config(args.config)
    weights = B.init_random_weights(config, Rng(args.seed), args.scheme, args.dtype)
    try:
        container.save(weights, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from None
    total = B.param_count(config)
    with open(args.out, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    print(f"parameters: {total} ({total / 1e6:.2f} M)")
    print(f"sha256: {digest}")
    return 0


def cmd_params(args) -> int:
    config = B.load_config(args.config)
    report = param_report(config, args.d_t, args.n_way, args.d_f)
    if args.json:
        print(json.dumps({**report.to_dict(), "d_t": args.d_t, "d_f": args.d_f, "n_way": args.n_way}, indent=2))
        return 0
    print(f"adapter params:  {report.adapter_params:,} ({report.adapter_params / 1e6:.2f} M)")
    print(f"anchor params:   {report.anchor_params:,}")
    print(f"total trainable: {report.total:,} ({report.total / 1e6:.2f} M)")
    print(f"backbone params: {report.backbone_params:,} ({report.backbone_params / 1e6:.2f} M)")
    print(f"adapter ratio:   {100 * report.adapter_ratio:.2f}%")
    print(f"total ratio:     {100 * report.total_ratio:.2f}%")
    return 0


def _run_overrides(args) -> dict:
    synthetic = None
    if args.synthetic is not None:
        synthetic = {} if args.synthetic == "default" else _load_json(args.synthetic)
    return dict(
        episodes=args.episodes,
        d_t=args.d_t,
        d_f=args.d_f,
        loss=args.loss.replace("-", "_") if args.loss else None,
        iterations=args.iterations,
        workers=args.workers,
        seed=args.seed,
        weights=args.weights,
        pool=args.pool,
        synthetic=synthetic,
        backbone=args.backbone,
        dtype=args.dtype,
        timing=True if args.timing else None,
    )


def cmd_run(args) -> int:
    cfg = resolve_config(_load_json(args.config), args.preset, **_run_overrides(args))
    stats = run_experiment(cfg, args.out)
    print(f"episodes: {stats.n}  mean accuracy: {100 * stats.mean:.2f}%  ci95: {100 * stats.ci95:.2f}")
    return 0


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"cannot sweep {args.param!r}; choose from {sorted(SWEEP_PARAMS)}")
    try:
        values = [SWEEP_PARAMS[args.param](v) for v in args.values]
    except ValueError:
        raise UsageError(f"sweep values for {args.param} must be integers") from None
    raw = _load_json(args.config)
    overrides = _run_overrides(args)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for v in values:
        cfg = resolve_config(raw, args.preset, **{**overrides, args.param: v})
        stats = run_experiment(cfg, os.path.join(args.out, f"{args.param}={v}"))
        dim = cfg.finetune["d_f"] * cfg.backbone["embed_dim"]
        rows.append({"param": args.param, "value": v, "dim": dim, "mean": stats.mean, "ci95": stats.ci95, "n": stats.n})
        print(f"{args.param}={v}: mean {100 * stats.mean:.2f}% ci95 {100 * stats.ci95:.2f}")
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["param", "value", "dim", "mean", "ci95", "n"])
        writer.writeheader()
        writer.writerows(rows)
    return 0


def cmd_gradcheck(args) -> int:
    config = B.load_config(args.config)
    rtol, _ = THRESHOLDS[args.dtype]
    results = run_suite(config, args.seed, args.dtype)
    for r in results:
        print(f"{r.op:28s} max_rel_err={r.max_rel_err:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        raise NumericalError(f"gradient check above {rtol:g} for: {', '.join(failed)}")
    print(f"all {len(results)} checks below {rtol:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dipa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init-weights", help="write seeded random backbone weights")
    p.add_argument("--config", default="tiny", help="backbone preset name or JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", default="trunc_normal", choices=B.INIT_SCHEMES)
    p.add_argument("--dtype", default="f32", choices=["f32", "f64"])
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("params", help="trainable parameter accounting")
    p.add_argument("--config", default="vit-small")
    p.add_argument("--d-t", type=int, default=9)
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--d-f", type=int, default=4)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_params)

    for name, helptext in (("run", "evaluate episodes"), ("sweep", "sweep one hyperparameter")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="run config JSON (a resolved config.json works too)")
        p.add_argument("--out", required=True)
        p.add_argument("--episodes", type=int)
        p.add_argument("--d-t", type=int)
        p.add_argument("--d-f", type=int)
        p.add_argument("--loss", choices=["proxy-anchor", "ncc-mean", "proxy_anchor", "ncc_mean"])
        p.add_argument("--iterations", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--weights", help="DIPAW1 weight file; omit to use seeded random weights")
        p.add_argument("--pool", help="pool directory with index.json")
        p.add_argument("--synthetic", nargs="?", const="default",
                       help="synthetic task spec JSON, or no value for the default spec")
        p.add_argument("--backbone", help="backbone preset name or JSON file")
        p.add_argument("--dtype", choices=["f32", "f64"])
        p.add_argument("--preset", choices=["seen", "unseen"], help="tuning depth preset (7 / 9)")
        p.add_argument("--timing", action="store_true", help="record wall_ms per episode")
        if name == "sweep":
            p.add_argument("--param", required=True)
            p.add_argument("--values", nargs="+", required=True)
            p.set_defaults(func=cmd_sweep)
        else:
            p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference check of every adjoint")
    p.add_argument("--config", default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="f64", choices=["f32", "f64"])
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except DipaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
