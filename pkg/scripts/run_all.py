"""Run every shipped experiment config through the CLI.

    python3 scripts/run_all.py [--out results] [--threads 1] [--only ablation upstream]

The risk curve and ablation take several minutes each on one core.
"""
import argparse
import sys
import time
from pathlib import Path

from transferrisk.cli import main as cli_main

HERE = Path(__file__).resolve().parent

# (subcommand, config stem); the risk curve runs both with and without simulation
RUNS = [
    ("asymptotics", "risk_curve"),
    ("simulate", "risk_curve"),
    ("ablation", "ablation"),
    ("spectrum-opt", "spectrum"),
    ("full-opt", "full_opt"),
    ("heatmap", "heatmap"),
    ("upstream", "upstream"),
    ("asymptotics", "concentration"),
]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--only", nargs="*", help="config stems to run")
    args = ap.parse_args()
    worst = 0
    for sub, stem in RUNS:
        if args.only and stem not in args.only:
            continue
        out = Path(args.out) / f"{stem}-{sub}"
        start = time.perf_counter()
        code = cli_main([sub, "--config", str(HERE / "configs" / f"{stem}.yaml"), "--out", str(out), "--threads", str(args.threads)])
        print(f"{sub:13s} {stem:14s} exit={code} {time.perf_counter() - start:7.1f}s")
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
