"""Command-line entry point: ``gradflow run|sweep|oracle|check``."""

from __future__ import annotations

import argparse
import subprocess
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .core import ConfigError, GradFlowError
from .oracle import ORACLE_TARGETS, reference_stats
from .runner import (
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_OK,
    PRESETS,
    config_from_mapping,
    load_configs,
    run,
    sweep,
    sweep_status,
)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradflow", description="Gradient-flow sampling experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment and write its CSV")
    r.add_argument("--config", help="config file; the first section is run unless --section is given")
    r.add_argument("--section", help="section of the config file to run")
    r.add_argument("--preset", choices=sorted(PRESETS), help="start from a built-in initialization")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output CSV path")

    s = sub.add_parser("sweep", help="run every section of a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the seed of every experiment")
    s.add_argument("--threads", type=int, default=1)

    o = sub.add_parser("oracle", help="precompute and cache reference statistics")
    o.add_argument("--target", choices=ORACLE_TARGETS, required=True)
    o.add_argument("--lam", type=float, action="append", required=True, help="repeatable")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--n", type=int, default=10**7, help="outer grid points")
    o.add_argument("--out", required=True, help="cache directory")

    c = sub.add_parser("check", help="run the acceptance suite")
    c.add_argument("--tests", default=None, help="path to tests/test_acceptance.py")
    return p


def _cmd_run(args) -> int:
    items: dict = {}
    name = "experiment"
    if args.config:
        cfgs = load_configs(args.config)
        if not cfgs:
            raise ConfigError(f"{args.config} has no experiment sections")
        pick = [c for c in cfgs if args.section in (None, c.name)]
        if not pick:
            raise ConfigError(f"no section {args.section!r} in {args.config}")
        base = pick[0]
    else:
        base = None
    if args.preset:
        items["preset"] = args.preset
    for kv in args.set:
        key, sep, value = kv.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
        items[key.strip()] = value
    if base is not None and items:
        cfg = config_from_mapping(base.name, items)
        keys = set(items) - {"preset"}
        if "preset" in items:
            keys |= set(PRESETS[items["preset"]])
        overrides = {k: getattr(cfg, k) for k in keys}
        cfg = replace(base, **overrides)
    elif base is not None:
        cfg = base
    else:
        cfg = config_from_mapping(name, items)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, out=args.out)
    cfg.validate()
    res = run(cfg)
    if res.csv_path is None:
        sys.stdout.write(_csv(res))
    if res.status != "ok":
        print(f"numerical failure: {res.error}", file=sys.stderr)
    return res.exit_code


def _csv(res) -> str:
    from .runner import csv_text

    return csv_text(res)


def _cmd_sweep(args) -> int:
    cfgs = load_configs(args.config)
    if args.seed is not None:
        cfgs = [replace(c, seed=args.seed) for c in cfgs]
    index = sweep(cfgs, args.out, threads=args.threads)
    print(index)
    return sweep_status(index)


def _cmd_oracle(args) -> int:
    for lam in args.lam:
        stats = reference_stats(args.target, lam, seed=args.seed, n=args.n, cache_dir=args.out)
        print(f"{args.target} lam={lam}: mean={stats.mean.tolist()} cov={stats.cov.tolist()}")
    return EXIT_OK


def _cmd_check(args) -> int:
    tests = args.tests or str(Path.cwd() / "tests" / "test_acceptance.py")
    if not Path(tests).exists():
        raise ConfigError(f"acceptance suite not found at {tests}")
    return subprocess.call([sys.executable, "-m", "pytest", "-q", "-s", tests])


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    handler = {"run": _cmd_run, "sweep": _cmd_sweep, "oracle": _cmd_oracle, "check": _cmd_check}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GradFlowError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
