"""Command line entry point.

Every experiment subcommand takes ``--config --seed --out --threads`` and
writes results.csv, summary.json and manifest.json (heatmap adds M.csv, N.csv
and spectrum.csv). Outputs depend only on (config, seed), never on threads.

Exit codes: 0 ok, 1 config error, 2 numeric failure, 3 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import FixedPointError, RegimeError
from .config import ConfigError, load, to_dict
from .experiments import run
from .full_opt import OptimizationFailed
from .selftest import run_selftest

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

# subcommand -> experiment kinds it accepts
SUBCOMMANDS = {
    "asymptotics": ("risk-curve", "concentration"),
    "simulate": ("risk-curve",),
    "spectrum-opt": ("spectrum",),
    "full-opt": ("full-opt",),
    "ablation": ("ablation",),
    "heatmap": ("heatmap",),
    "upstream": ("upstream",),
}


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def run_experiment(sub: str, config_path, seed, out, threads: int) -> int:
    try:
        cfg = load(config_path)
        if seed is not None:
            if seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = replace(cfg, seed=seed)
        if cfg.kind not in SUBCOMMANDS[sub]:
            raise ConfigError(f"'{sub}' runs {'/'.join(SUBCOMMANDS[sub])} configs, got kind {cfg.kind!r}")
        if threads < 1:
            raise ConfigError("--threads must be at least 1")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        result = run(cfg, threads=threads, simulate=(sub == "simulate"))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (RegimeError, FixedPointError, OptimizationFailed, ArithmeticError, np.linalg.LinAlgError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC

    out = Path(out or f"results/{cfg.kind}")
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, (columns, rows) in result.tables.items():
            write_csv(out / name, columns, rows)
        write_json(out / "summary.json", result.summary)
        manifest = {"command": sub, "seed": cfg.seed, "version": __version__, "config": to_dict(cfg)}
        write_json(out / "manifest.json", manifest)
    except OSError as err:
        print(f"I/O failure: {err}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {', '.join(sorted(result.tables))}, summary.json, manifest.json to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transferrisk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)
    for name, kinds in SUBCOMMANDS.items():
        sp = subs.add_parser(name, help=f"run a {'/'.join(kinds)} experiment")
        sp.add_argument("--config", required=True, help="YAML or JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="output directory (default results/<kind>)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads")
    st = subs.add_parser("selftest", help="run the built-in oracle checks")
    # accepted for a uniform interface; the checks are fixed
    st.add_argument("--config", default=None)
    st.add_argument("--seed", type=int, default=None)
    st.add_argument("--out", default=None)
    st.add_argument("--threads", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return EXIT_OK if run_selftest() else EXIT_NUMERIC
    return run_experiment(args.command, args.config, args.seed, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
