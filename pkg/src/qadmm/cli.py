"""Command-line entry point: ``qadmm run | fstar | selftest``."""
from __future__ import annotations

import argparse
import logging
import sys

from .bench import ConfigError, build_problem, load_config, run_experiment, serialize_config

OVERRIDES = {
    "q": int,
    "tau": int,
    "P": int,
    "trials": int,
    "seed": int,
    "max_iters": int,
    "rho": float,
    "theta": float,
    "compressor": str,
    "oracle": str,
}


def _add_overrides(p: argparse.ArgumentParser) -> None:
    for name, typ in OVERRIDES.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)


def _config(args):
    cfg = load_config(args.config)
    changes = {k: getattr(args, k) for k in OVERRIDES if getattr(args, k, None) is not None}
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run_experiment(cfg, args.out)
    (args.out / "config.json").write_text(serialize_config(cfg), encoding="utf-8")
    for rec in res.summary:
        reduction = rec["reduction_vs_baseline"]
        red = f"  reduction={reduction:.2%}" if reduction != "" else ""
        print(f"{rec['method']:9s} {rec['metric']:10s} iter={rec['iteration_to_target']!s:>5} "
              f"bits/M={rec['bits_to_target']!s:>20}{red}")
    return 1 if res.failed_trials else 0


def cmd_fstar(args) -> int:
    cfg = _config(args)
    _, _, ref = build_problem(cfg, args.trial)
    print(repr(ref.F_star))
    return 0


def cmd_selftest(args) -> int:
    from . import selftest

    return 0 if selftest.run() else 1


def main(argv=None) -> int:
    from pathlib import Path

    parser = argparse.ArgumentParser(prog="qadmm", description="Quantized asynchronous ADMM simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment and write CSV files")
    p.add_argument("config", type=Path)
    p.add_argument("--out", type=Path, default=Path("results"))
    _add_overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fstar", help="print the reference optimum for one trial's data")
    p.add_argument("config", type=Path)
    p.add_argument("--trial", type=int, default=0)
    _add_overrides(p)
    p.set_defaults(func=cmd_fstar)

    p = sub.add_parser("selftest", help="run the built-in property checks")
    p.set_defaults(func=cmd_selftest)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
