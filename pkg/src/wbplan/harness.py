"""Benchmark sweeps and scenario runs on top of the planner.

Success is decided here, never by the optimizer: every part of a returned plan
is re-checked with :func:`validate_trajectory` at 1 kHz against its own
corridor, the stitched trajectory must be continuous to ``1e-6`` in orders
0..3, and it must start and end at the requested states.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional

import numpy as np

from .errors import ConfigError, InputError, PlanFailure, WBPlanError
from .mapping import (
    DroneModel,
    MazeConfig,
    PointCloud,
    build_dual_map,
    generate_maze,
    maze_gaps,
    read_ply,
    write_ply,
)
from .optimize import validate_trajectory
from .planner import (
    PlannerParams,
    PlanRequest,
    PlanResult,
    export_plan,
    plan,
    plan_collides,
    replan_step,
    start_session,
)
from .trajectory import (
    FlatState,
    PiecewiseTrajectory,
    PolyPiece,
    junction_jumps,
    write_trajectory_csv,
)

log = logging.getLogger(__name__)

JUMP_TOL = 1e-6
RUN_COLUMNS = ["walls", "seed", "success", "failure_stage", "labels", "n_se3",
               "length_m", "exec_s", "max_junction_jump"]
SUMMARY_COLUMNS = ["walls", "runs", "successes", "success_rate", "mean_length_m", "mean_exec_s"]


# -- configuration ------------------------------------------------------------------


@dataclass
class BenchmarkConfig:
    wall_counts: List[int] = field(default_factory=lambda: list(range(1, 11)))
    seeds: int = 10
    maze: MazeConfig = field(default_factory=MazeConfig)
    drone: DroneModel = field(default_factory=DroneModel)
    planner: PlannerParams = field(default_factory=PlannerParams)
    out_dir: str = "bench_out"
    seed_offset: int = 0
    workers: int = 1
    # plan once before timing so JIT loading does not land in the first record
    warmup: bool = True

    def __post_init__(self):
        if isinstance(self.maze, dict):
            self.maze = MazeConfig.from_dict(self.maze)
        if isinstance(self.drone, dict):
            try:
                self.drone = DroneModel(**self.drone)
            except (TypeError, WBPlanError) as exc:
                raise ConfigError(f"bad drone config: {exc}") from exc
        if isinstance(self.planner, dict):
            self.planner = PlannerParams.from_dict(self.planner)
        self.wall_counts = [int(n) for n in self.wall_counts]
        self.validate()

    def validate(self):
        if self.seeds < 1:
            raise ConfigError("seeds per wall count must be >= 1")
        if not self.wall_counts:
            raise ConfigError("wall_counts must not be empty")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for n in self.wall_counts:
            replace(self.maze, n_walls=n).validate(self.drone)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        extra = set(data) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown benchmark keys: {sorted(extra)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad benchmark config: {exc}") from exc

    def to_dict(self):
        out = asdict(self)
        out["maze"] = self.maze.to_dict()
        out["planner"] = self.planner.to_dict()
        return out


@dataclass
class RunRecord:
    walls: int
    seed: int
    success: bool
    plan_ms: float
    length_m: float = 0.0
    exec_s: float = 0.0
    failure_stage: str = ""
    labels: str = ""
    max_junction_jump: float = 0.0

    @property
    def n_se3(self):
        return sum(1 for lab in self.labels.split("|") if lab == "SE3")

    def row(self):
        return {
            "walls": self.walls,
            "seed": self.seed,
            "success": int(self.success),
            "failure_stage": self.failure_stage,
            "labels": self.labels,
            "n_se3": self.n_se3,
            "length_m": f"{self.length_m:.6f}",
            "exec_s": f"{self.exec_s:.6f}",
            "max_junction_jump": f"{self.max_junction_jump:.3e}",
        }


# -- mazes as planning problems --------------------------------------------------------


def maze_endpoints(cfg: MazeConfig):
    """Start and goal 1 m inside the room on both sides of the walls, mid-height, at rest."""
    lo, hi = cfg.bounds
    zc = 0.5 * (lo[2] + hi[2])
    yc = 0.5 * (lo[1] + hi[1])
    return FlatState([lo[0] + 1.0, yc, zc]), FlatState([hi[0] - 1.0, yc, zc])


def maze_problem(cfg: MazeConfig, seed, drone: DroneModel, params: Optional[PlannerParams] = None):
    cloud = generate_maze(cfg, seed)
    dmap = build_dual_map(cloud, drone, cfg.bounds)
    start, goal = maze_endpoints(cfg)
    return PlanRequest(start, goal, dmap, params or PlannerParams())


def validate_plan(result: PlanResult, req: PlanRequest, dt=1e-3):
    """Independent acceptance of a plan; returns ``(ok, reason)``."""
    drone = req.map.drone
    lim = req.params.limits
    for k, part in enumerate(result.parts):
        rep = validate_trajectory(part.traj, part.corridor, drone, part.label, lim, dt=dt)
        if not rep.passed:
            return False, f"part {k} ({part.label}): {rep.message}"
    jumps = junction_jumps(result.full)
    if jumps.size and jumps.max() > JUMP_TOL:
        return False, f"junction jump {jumps.max():.3e}"
    s = result.full.start_state().as_array()
    g = result.full.end_state().as_array()
    if np.abs(s - req.start.as_array()).max() > JUMP_TOL:
        return False, "trajectory does not start at the requested state"
    if np.abs(g - req.goal.as_array()).max() > JUMP_TOL:
        return False, "trajectory does not end at the requested state"
    return True, ""


def run_one(cfg: BenchmarkConfig, walls, seed) -> RunRecord:
    mcfg = replace(cfg.maze, n_walls=walls)
    req = maze_problem(mcfg, seed, cfg.drone, cfg.planner)
    t0 = time.perf_counter()
    try:
        result = plan(req)
    except PlanFailure as exc:
        ms = 1e3 * (time.perf_counter() - t0)
        return RunRecord(walls, seed, False, ms, failure_stage=exc.stage)
    except WBPlanError as exc:
        ms = 1e3 * (time.perf_counter() - t0)
        return RunRecord(walls, seed, False, ms, failure_stage=type(exc).__name__)
    ms = 1e3 * (time.perf_counter() - t0)
    ok, why = validate_plan(result, req)
    jumps = junction_jumps(result.full)
    rec = RunRecord(walls, seed, ok, ms, result.full.length(), result.full.duration,
                    "" if ok else "validation", "|".join(result.labels),
                    float(jumps.max()) if jumps.size else 0.0)
    if not ok:
        log.warning("walls=%d seed=%d rejected by validator: %s", walls, seed, why)
    return rec


def _run_job(args):
    cfg, walls, seed = args
    return run_one(cfg, walls, seed)


def _warmup(cfg: BenchmarkConfig):
    small = replace(cfg.maze, n_walls=1)
    try:
        plan(maze_problem(small, 0, cfg.drone, cfg.planner))
    except WBPlanError:
        pass


def summarize_records(records: List[RunRecord]):
    rows = []
    for n in sorted({r.walls for r in records}):
        rs = [r for r in records if r.walls == n]
        ok = [r for r in rs if r.success]
        rows.append({
            "walls": n,
            "runs": len(rs),
            "successes": len(ok),
            "success_rate": f"{len(ok) / len(rs):.4f}",
            "mean_length_m": f"{np.mean([r.length_m for r in ok]):.6f}" if ok else "",
            "mean_exec_s": f"{np.mean([r.exec_s for r in ok]):.6f}" if ok else "",
        })
    return rows


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)


def run_benchmark(cfg: BenchmarkConfig, progress=None) -> List[RunRecord]:
    """Plan every (wall count, seed) maze and write the result tables.

    ``runs.csv`` and ``summary.csv`` hold only deterministic quantities, so a
    rerun reproduces them byte for byte. Wall-clock plan times go to
    ``timings.csv`` and ``timings.json``.
    """
    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
        probe = os.path.join(cfg.out_dir, ".write_test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise InputError(f"output directory not writable: {exc}") from exc
    jobs = [(cfg, n, cfg.seed_offset + s) for n in cfg.wall_counts for s in range(cfg.seeds)]
    records: List[RunRecord] = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers, initializer=_warmup if cfg.warmup else None,
                                 initargs=(cfg,) if cfg.warmup else ()) as pool:
            for rec in pool.map(_run_job, jobs):
                records.append(rec)
                if progress:
                    progress(rec)
    else:
        if cfg.warmup:
            _warmup(cfg)
        for job in jobs:
            rec = _run_job(job)
            records.append(rec)
            if progress:
                progress(rec)
    runs_dir = os.path.join(cfg.out_dir, "runs")
    os.makedirs(runs_dir, exist_ok=True)
    for rec in records:
        with open(os.path.join(runs_dir, f"w{rec.walls:02d}_s{rec.seed:04d}.json"), "w") as fh:
            json.dump(rec.row(), fh, indent=1, sort_keys=True)
    _write_csv(os.path.join(cfg.out_dir, "runs.csv"), RUN_COLUMNS, [r.row() for r in records])
    _write_csv(os.path.join(cfg.out_dir, "summary.csv"), SUMMARY_COLUMNS, summarize_records(records))
    _write_csv(os.path.join(cfg.out_dir, "timings.csv"), ["walls", "seed", "plan_ms"],
               [{"walls": r.walls, "seed": r.seed, "plan_ms": f"{r.plan_ms:.3f}"} for r in records])
    times = [r.plan_ms for r in records]
    with open(os.path.join(cfg.out_dir, "timings.json"), "w") as fh:
        json.dump({
            "median_plan_ms": float(np.median(times)),
            "max_plan_ms": float(np.max(times)),
            "workers": cfg.workers,
            "hardware": {"machine": platform.machine(), "processor": platform.processor(),
                         "python": platform.python_version(), "cpus": os.cpu_count()},
        }, fh, indent=1)
    return records


# -- scenarios --------------------------------------------------------------------------


@dataclass
class Scenario:
    """A world plus a start/goal request, loaded from a mapping (YAML)."""

    cloud: PointCloud
    bounds: tuple
    start: FlatState
    goal: FlatState
    drone: DroneModel = field(default_factory=DroneModel)
    params: PlannerParams = field(default_factory=PlannerParams)
    mode: str = "single"
    sensor_radius: Optional[float] = None
    step: float = 0.1
    max_time: float = 120.0

    @classmethod
    def from_dict(cls, data, base_dir=".", seed=None):
        data = dict(data or {})
        known = {"world", "start", "goal", "drone", "planner", "mode", "sensor_radius", "step", "max_time"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown scenario keys: {sorted(extra)}")
        if "world" not in data:
            raise ConfigError("scenario needs a 'world' section")
        try:
            drone = DroneModel(**data.get("drone", {}))
        except (TypeError, WBPlanError) as exc:
            raise ConfigError(f"bad drone config: {exc}") from exc
        params = PlannerParams.from_dict(data.get("planner", {}))
        world = dict(data["world"])
        start = goal = None
        if "maze" in world:
            mcfg = MazeConfig.from_dict(world["maze"])
            mcfg.validate(drone)
            mseed = int(world.get("seed", 0) if seed is None else seed)
            cloud = generate_maze(mcfg, mseed)
            bounds = mcfg.bounds
            start, goal = maze_endpoints(mcfg)
        elif "ply" in world:
            path = world["ply"]
            if not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            cloud = read_ply(path)
            bounds = _parse_bounds(world.get("bounds"))
        elif "boxes" in world or "empty" in world:
            cloud = _boxes_cloud(world.get("boxes", []), float(world.get("spacing", 0.05)))
            bounds = _parse_bounds(world.get("bounds"))
        else:
            raise ConfigError("world needs one of 'maze', 'ply', 'boxes' or 'empty'")
        if "start" in data:
            start = _parse_state(data["start"])
        if "goal" in data:
            goal = _parse_state(data["goal"])
        if start is None or goal is None:
            raise ConfigError("scenario needs 'start' and 'goal'")
        mode = data.get("mode", "single")
        if mode not in ("single", "receding"):
            raise ConfigError("mode must be 'single' or 'receding'")
        return cls(cloud, bounds, start, goal, drone, params, mode, data.get("sensor_radius"),
                   float(data.get("step", 0.1)), float(data.get("max_time", 120.0)))


def _parse_bounds(b):
    try:
        lo, hi = (np.asarray(v, dtype=float).reshape(3) for v in b)
    except (TypeError, ValueError) as exc:
        raise ConfigError("bounds must be [[x0, y0, z0], [x1, y1, z1]]") from exc
    if np.any(hi <= lo):
        raise ConfigError("bounds must have hi > lo on every axis")
    return lo, hi


def _parse_state(v):
    try:
        if isinstance(v, dict):
            return FlatState(*(np.asarray(v.get(k, [0, 0, 0]), dtype=float) for k in ("p", "v", "a", "j")))
        return FlatState(np.asarray(v, dtype=float).reshape(3))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad state {v!r}") from exc


def _boxes_cloud(boxes, spacing):
    """Surface-sampled axis-aligned boxes ``{lo: [...], hi: [...]}``."""
    pts = []
    for box in boxes:
        try:
            lo = np.asarray(box["lo"], dtype=float)
            hi = np.asarray(box["hi"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad box {box!r}") from exc
        axes = [np.append(np.arange(lo[k], hi[k], spacing), hi[k]) for k in range(3)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        pts.append(g)
    return PointCloud(np.concatenate(pts) if pts else np.zeros((0, 3)))


def truncate(traj: PiecewiseTrajectory, t_end) -> PiecewiseTrajectory:
    """The trajectory restricted to ``[0, t_end]``."""
    pieces = []
    for pc, t0 in zip(traj.pieces, traj.breaks[:-1]):
        if t_end <= t0 + 1e-12:
            break
        pieces.append(PolyPiece(pc.coeffs, min(pc.duration, t_end - t0)))
    return PiecewiseTrajectory(pieces)


def _truncate_result(res: PlanResult, t_end) -> PlanResult:
    parts = []
    t0 = 0.0
    for part in res.parts:
        if t_end <= t0 + 1e-12:
            break
        dur = part.traj.duration
        traj = part.traj if t0 + dur <= t_end else truncate(part.traj, t_end - t0)
        parts.append(replace(part, traj=traj))
        t0 += dur
    return PlanResult(parts, truncate(res.full, t_end), res.stats)


def run_scenario(sc: Scenario, out_dir, debug=False) -> dict:
    """Single-shot plan or receding-horizon simulation; writes artifacts to ``out_dir``.

    Raises :class:`PlanFailure` (or another planner error) when no
    acceptable plan is produced; the summary is still written in that case.
    """
    os.makedirs(out_dir, exist_ok=True)
    if sc.mode == "single":
        return _run_single(sc, out_dir, debug)
    return _run_receding(sc, out_dir)


def _run_single(sc: Scenario, out_dir, debug):
    dmap = build_dual_map(sc.cloud, sc.drone, sc.bounds)
    req = PlanRequest(sc.start, sc.goal, dmap, sc.params)
    debug_dir = os.path.join(out_dir, "debug") if debug else None
    if debug_dir:
        os.makedirs(debug_dir, exist_ok=True)
    t0 = time.perf_counter()
    result = plan(req, debug_dir=debug_dir)
    ms = 1e3 * (time.perf_counter() - t0)
    ok, why = validate_plan(result, req)
    summary = export_plan(result, out_dir, extra_summary={
        "mode": "single", "success": ok, "plan_ms": ms, "validation": why or "passed",
        "hardware": platform.machine()})
    if not ok:
        raise PlanFailure("validate", why)
    return summary


def _run_receding(sc: Scenario, out_dir):
    sess = start_session(sc.cloud, sc.bounds, sc.drone, sc.start, sc.goal, sc.params, sc.sensor_radius)
    snaps = 0

    def snapshot():
        nonlocal snaps
        write_ply(sess.known, os.path.join(out_dir, f"known_{snaps:03d}.ply"))
        snaps += 1

    snapshot()
    if sess.current is None:
        _write_summary(out_dir, sess, False, "initial plan failed")
        raise PlanFailure("receding", sess.events[-1].get("error", "initial plan failed"))
    n_events = len(sess.events)
    while not (sess.done or sess.failed) and sess.now < sc.max_time:
        replan_step(sess, sc.step)
        if len(sess.events) > n_events:
            n_events = len(sess.events)
            snapshot()
    if not (sess.done or sess.failed):
        sess.failed = "time limit"
    spans = [_truncate_result(res, t1 - t0) for t0, t1, res in sess.executed if t1 - t0 > 1e-9]
    collides = any(plan_collides(s, sess.dmap) for s in spans)
    ok = sess.done and not sess.failed and not collides
    reason = sess.failed or ("executed path collides with the final map" if collides else "")
    if spans:
        pieces = [pc for s in spans for pc in s.full.pieces]
        write_trajectory_csv(PiecewiseTrajectory(pieces), os.path.join(out_dir, "trajectory.csv"))
        cor = {"parts": [{"label": p.label, "polyhedra": [poly.to_dict() for poly in p.corridor]}
                         for s in spans for p in s.parts]}
        with open(os.path.join(out_dir, "corridor.json"), "w") as fh:
            json.dump(cor, fh, indent=1)
    write_ply(sess.known, os.path.join(out_dir, "known_final.ply"))
    summary = _write_summary(out_dir, sess, ok, reason)
    if not ok:
        raise PlanFailure("receding", reason)
    return summary


def _write_summary(out_dir, sess, ok, reason):
    summary = {
        "mode": "receding",
        "success": bool(ok),
        "reason": reason,
        "replans": sum(1 for e in sess.events if e["reason"] != "initial"),
        "events": sess.events,
        "flight_time_s": sess.now,
        "hardware": platform.machine(),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, default=float)
    return summary


def gap_table(cfg: MazeConfig, seed):
    """Gap geometry of a maze, for the metadata written next to generated clouds."""
    return [{"wall": g.wall, "center": g.center.tolist(), "width": g.width, "height": g.height,
             "narrow": g.narrow} for g in maze_gaps(cfg, seed)]


__all__ = [
    "BenchmarkConfig",
    "RunRecord",
    "Scenario",
    "maze_endpoints",
    "maze_problem",
    "validate_plan",
    "run_one",
    "run_benchmark",
    "summarize_records",
    "run_scenario",
    "truncate",
    "gap_table",
]
