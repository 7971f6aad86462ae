"""``wbplan`` command line.

Exit status: 0 on success, 1 when planning fails, 2 for configuration or I/O
errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import yaml

from .errors import ConfigError, InputError, PlanFailure, WBPlanError
from .harness import BenchmarkConfig, Scenario, gap_table, maze_endpoints, run_benchmark, run_scenario
from .mapping import DroneModel, MazeConfig, generate_maze, write_ply

EXIT_OK, EXIT_PLAN, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("wbplan")


def _load_yaml(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def cmd_gen_maze(args):
    data = _load_yaml(args.config)
    try:
        drone = DroneModel(**data.pop("drone", {}))
    except (TypeError, WBPlanError) as exc:
        raise ConfigError(f"bad drone config: {exc}") from exc
    cfg = MazeConfig.from_dict(data)
    if args.walls is not None:
        cfg = MazeConfig.from_dict({**cfg.to_dict(), "n_walls": args.walls})
    cfg.validate(drone)
    cloud = generate_maze(cfg, args.seed)
    out = args.out
    try:
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        write_ply(cloud, out)
        start, goal = maze_endpoints(cfg)
        meta = {
            "seed": args.seed,
            "maze": cfg.to_dict(),
            "bounds": [b.tolist() for b in cfg.bounds],
            "start": start.p.tolist(),
            "goal": goal.p.tolist(),
            "gaps": gap_table(cfg, args.seed),
            "points": len(cloud),
        }
        with open(os.path.splitext(out)[0] + ".json", "w") as fh:
            json.dump(meta, fh, indent=1)
    except OSError as exc:
        raise InputError(f"cannot write {out}: {exc}") from exc
    print(f"wrote {len(cloud)} points to {out}")
    return EXIT_OK


def _scenario(args, mode):
    data = _load_yaml(args.config)
    if mode is not None:
        data["mode"] = mode
    return Scenario.from_dict(data, base_dir=os.path.dirname(os.path.abspath(args.config)), seed=args.seed)


def cmd_plan(args):
    sc = _scenario(args, "single")
    summary = run_scenario(sc, args.out, debug=args.debug)
    print(f"plan ok: {'/'.join(summary['labels'])}, {summary['duration_s']:.3f} s, "
          f"{summary['plan_ms']:.1f} ms -> {args.out}")
    return EXIT_OK


def cmd_sim(args):
    sc = _scenario(args, "receding")
    summary = run_scenario(sc, args.out)
    print(f"flight ok: {summary['replans']} replans, {summary['flight_time_s']:.2f} s -> {args.out}")
    return EXIT_OK


def cmd_bench(args):
    data = _load_yaml(args.config)
    if args.out is not None:
        data["out_dir"] = args.out
    if args.seeds is not None:
        data["seeds"] = args.seeds
    if args.walls is not None:
        data["wall_counts"] = args.walls
    if args.workers is not None:
        data["workers"] = args.workers
    cfg = BenchmarkConfig.from_dict(data)

    def progress(rec):
        log.info("walls=%d seed=%d %s %.1f ms", rec.walls, rec.seed,
                 "ok" if rec.success else f"FAIL ({rec.failure_stage})", rec.plan_ms)

    records = run_benchmark(cfg, progress)
    ok = sum(r.success for r in records)
    print(f"{ok}/{len(records)} successful -> {cfg.out_dir}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="wbplan", description="Whole-body quadrotor planning tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-maze", help="write a seeded maze point cloud (PLY) plus metadata JSON")
    g.add_argument("--config", help="maze YAML (MazeConfig keys, optional 'drone')")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--walls", type=int, help="override n_walls")
    g.add_argument("--out", default="maze.ply")
    g.set_defaults(func=cmd_gen_maze)

    for name, func, helptext in (("plan", cmd_plan, "single-shot plan of a scenario"),
                                 ("sim", cmd_sim, "receding-horizon simulation of a scenario")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True, help="scenario YAML")
        s.add_argument("--seed", type=int, help="maze seed (overrides world.seed)")
        s.add_argument("--out", default=f"{name}_out")
        if name == "plan":
            s.add_argument("--debug", action="store_true", help="write optimizer traces")
        s.set_defaults(func=func)

    b = sub.add_parser("bench", help="maze sweep with success accounting")
    b.add_argument("--config", help="benchmark YAML")
    b.add_argument("--out", help="output directory")
    b.add_argument("--seeds", type=int, help="seeds per wall count")
    b.add_argument("--walls", type=int, nargs="+", help="wall counts")
    b.add_argument("--workers", type=int)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PlanFailure as exc:
        print(f"plan failed: {exc}", file=sys.stderr)
        return EXIT_PLAN
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WBPlanError as exc:
        # precondition and domain errors on the request itself
        print(f"plan failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PLAN


if __name__ == "__main__":
    sys.exit(main())
