"""Run the five-pair (alpha, beta) sweep and write table, report, PR curves and checkpoints.

    python scripts/run_sweep.py --out results/ [--config train.json] [--seeds 1,2,3]
"""
import argparse
import time
from pathlib import Path

from tversky3d import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds")
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    cfg = harness.TrainConfig.from_json(args.config) if args.config else harness.TrainConfig()
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    start = time.perf_counter()
    report = harness.run_sweep(cfg, seeds=seeds, out_dir=Path(args.out), progress=print)
    print(report.table_markdown())
    print(f"{time.perf_counter() - start:.0f} s; outputs in {args.out}")


if __name__ == "__main__":
    main()
