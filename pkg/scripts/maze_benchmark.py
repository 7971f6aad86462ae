"""Maze sweep: 1..5 walls, 10 seeds each, mixed gap widths.

Writes runs.csv, summary.csv and timings to the output directory and prints
the per-wall-count table.

    python scripts/maze_benchmark.py [--out bench_out] [--seeds 10]
"""
import argparse
import csv
import json
import os
from pathlib import Path

import yaml

from wbplan.harness import BenchmarkConfig, run_benchmark

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "bench.yaml"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(CONFIG))
    ap.add_argument("--out")
    ap.add_argument("--seeds", type=int)
    args = ap.parse_args()
    data = yaml.safe_load(Path(args.config).read_text())
    if args.out:
        data["out_dir"] = args.out
    if args.seeds:
        data["seeds"] = args.seeds
    cfg = BenchmarkConfig.from_dict(data)
    records = run_benchmark(cfg, lambda r: print(
        f"walls={r.walls} seed={r.seed:2d} {'ok  ' if r.success else 'FAIL'} "
        f"{r.plan_ms:7.1f} ms  {r.labels or r.failure_stage}", flush=True))
    with open(os.path.join(cfg.out_dir, "summary.csv")) as fh:
        rows = list(csv.DictReader(fh))
    print()
    print(" ".join(f"{k:>14}" for k in rows[0]))
    for row in rows:
        print(" ".join(f"{v:>14}" for v in row.values()))
    with open(os.path.join(cfg.out_dir, "timings.json")) as fh:
        t = json.load(fh)
    ok = sum(r.success for r in records)
    print(f"\n{ok}/{len(records)} successful, median plan time {t['median_plan_ms']:.1f} ms")


if __name__ == "__main__":
    main()
