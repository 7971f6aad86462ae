"""Single-wall mazes whose only gap is 0.24 to 0.30 m wide (narrower than the body).

For every seed the plan is re-validated at 1 kHz and the kinodynamic margin
(largest norm minus its limit, over all parts) is reported.

    python scripts/narrow_gap_family.py [--seeds 50]
"""
import argparse
import time

import numpy as np

from wbplan.errors import PlanFailure
from wbplan.harness import maze_problem, validate_plan
from wbplan.mapping import DroneModel, MazeConfig, maze_gaps
from wbplan.optimize import validate_trajectory
from wbplan.planner import plan


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=50)
    args = ap.parse_args()
    cfg = MazeConfig(n_walls=1, narrow_fraction=1.0, narrow_width=(0.24, 0.30))
    drone = DroneModel()
    clean = 0
    worst = -np.inf
    for seed in range(args.seeds):
        width = maze_gaps(cfg, seed)[0].width
        req = maze_problem(cfg, seed, drone)
        t0 = time.perf_counter()
        try:
            res = plan(req)
        except PlanFailure:
            res = None
        ms = 1e3 * (time.perf_counter() - t0)
        if res is None:
            print(f"seed {seed:2d} width {width:.3f}  FAIL  {ms:6.1f} ms")
            continue
        ok, why = validate_plan(res, req, dt=1e-3)
        lim = req.params.limits.as_array()
        margin = max(float((validate_trajectory(p.traj, p.corridor, drone, p.label, req.params.limits,
                                                dt=1e-3).max_norms - lim).max()) for p in res.parts)
        worst = max(worst, margin)
        clean += ok
        print(f"seed {seed:2d} width {width:.3f}  {'ok  ' if ok else 'BAD '} {ms:6.1f} ms  "
              f"{'/'.join(res.labels):12s} margin {margin:+.3f} {why}")
    print(f"\n{clean}/{args.seeds} validator-clean, worst kinodynamic margin {worst:+.3e}")


if __name__ == "__main__":
    main()
