"""Command line entry point: ``weaksde run|explode|list-models|list-schemes``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, load_config
from .convergence import theoretical_order
from .experiment import plan, run_experiment, run_explosion_probe
from .models import MODELS, make_model
from .schemes import SchemeKind, SchemeSpec


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weaksde", description="Weak convergence benchmarks for tamed SDE schemes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("config", help=f"TOML config path or preset ({', '.join(PRESETS)})")
        p.add_argument("--seed", type=int, default=None, help="master seed (default: config value, 100)")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("--output-dir", type=Path, default=None)
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
        p.add_argument("-v", "--verbose", action="store_true")

    add_run_flags(sub.add_parser("run", help="reference + scheme ladder + order fits"))
    add_run_flags(sub.add_parser("explode", help="explosion fraction probe"))
    sub.add_parser("list-models", help="show the model catalog")
    sub.add_parser("list-schemes", help="show scheme ids and their theoretical weak orders")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "list-models":
        for model_id in MODELS:
            p = make_model(model_id)
            print(f"{model_id:8s} d={p.dim_state} m={p.dim_noise} r={p.growth_r:g} rho={p.growth_rho:g} "
                  f"x0={[float(v) for v in p.initial_state]} T={p.horizon:g}")
        return 0
    if args.command == "list-schemes":
        for kind in SchemeKind:
            order = theoretical_order(SchemeSpec(kind))
            print(f"{kind.value:5s} weak order {'n/a' if order is None else order}")
        return 0

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        if args.command == "run":
            config.validate()
            if args.dry_run:
                print(plan(config))
                return 0
            result = run_experiment(config, threads=args.threads, output_dir=args.output_dir)
            for r in result.reports:
                status = {True: "PASS", False: "FAIL", None: "----"}[r.passed]
                print(f"{status} {r.scheme_id:5s} {r.phi_label:11s} order={r.fitted_order:.3f} "
                      f"theory={r.theoretical_order} used={r.n_used}/{len(r.points)}")
            for line in result.failures:
                print(f"failure: {line}", file=sys.stderr)
            print(f"results written to {result.output_dir}")
            return result.exit_code
        config.validate(require_reference=False)
        if args.dry_run:
            print(f"explosion probe {config.name}: model={config.model} h={config.probe_h!r} M={config.M} "
                  f"schemes={[s.id for s in config.schemes]}")
            return 0
        report = run_explosion_probe(config, threads=args.threads, output_dir=args.output_dir)
        for scheme_id, row in report["schemes"].items():
            print(f"{scheme_id:5s} exploded {row['n_exploded']}/{row['n_trajectories']} "
                  f"({row['explosion_fraction']:.4f}), max Newton iterations {row['max_newton_iterations']}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
