"""Receding-horizon flight where the narrow gap only comes into sensor range mid-flight.

Prints the replanning events and writes the flown trajectory, corridors and
known-map snapshots to the output directory.

    python scripts/reveal_demo.py [--out reveal_out]
"""
import argparse
from pathlib import Path

import yaml

from wbplan.harness import Scenario, run_scenario

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(CONFIGS / "reveal_gap.yaml"))
    ap.add_argument("--out", default="reveal_out")
    args = ap.parse_args()
    cfg = Path(args.config)
    sc = Scenario.from_dict(yaml.safe_load(cfg.read_text()), base_dir=str(cfg.parent))
    summary = run_scenario(sc, args.out)
    for ev in summary["events"]:
        labels = "/".join(ev.get("labels", []))
        print(f"t={ev.get('t', 0.0):6.2f} s  {ev['reason']:10s} {'ok' if ev.get('ok') else 'failed'}  {labels}")
    print(f"\nreached goal after {summary['flight_time_s']:.2f} s with {summary['replans']} replans -> {args.out}")


if __name__ == "__main__":
    main()
