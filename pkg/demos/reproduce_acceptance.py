"""Re-run the long acceptance experiments and refresh ``results/``.

Each experiment writes a harness run directory (config, per-seed CSVs,
summary.json) under ``results/<name>``.  The acceptance tests read those
summaries, so rerunning this script and then pytest re-derives every
recorded number.

Run:  python demos/reproduce_acceptance.py [name ...] [--scale 0.1] [--out results]

With no names, every experiment runs; on one CPU the full set takes a few
hours.  ``--scale`` shrinks every episode budget for a dry run.
"""
import argparse
import dataclasses
import time
from pathlib import Path

from intrinsic_control.harness import acceptance_experiments, run

parser = argparse.ArgumentParser()
parser.add_argument("names", nargs="*")
parser.add_argument("--scale", type=float, default=1.0)
parser.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "results"))
args = parser.parse_args()

experiments = acceptance_experiments(args.scale)
for name in args.names or experiments:
    cfg, extra = experiments[name]
    cfg = dataclasses.replace(cfg, output_dir=str(Path(args.out) / name))
    start = time.time()
    out = run(cfg, **extra)
    print(f"{name:12s} {time.time() - start:8.1f} s  -> {out}", flush=True)
