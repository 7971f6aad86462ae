"""End-to-end hierarchical planning and the receding-horizon session.

Pipeline: an obstacle-free global trajectory is checked against the LRM; each
colliding stretch is classified by the dual-resolution race. Narrow gaps get
a three-polyhedron corridor and an SE(3) solve (falling back to the suspended
low-resolution search for a detour when that fails). Everything else is
joined by R3 solves whose boundary states are copied from the neighbouring
SE(3) pieces, and the parts are stitched.
"""
from __future__ import annotations

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional

import numpy as np

from .corridor import LineSeed, generate_line_seed, inflate_polyhedron, narrow_gap_corridor, sfc_along_path
from .errors import (
    ConfigError,
    CorridorError,
    PlanFailure,
    PreconditionError,
    SeedError,
    StitchError,
    WBPlanError,
)
from .mapping import DualResMap, PointCloud, build_dual_map, sensor_reveal
from .optimize import (
    R3,
    SE3,
    OptProblem,
    OptWeights,
    gap_initial_guess,
    optimize_trajectory,
    validate_trajectory,
)
from .polyhedron import Corridor, write_obj
from .search import (
    R3 as CLS_R3,
    UNREACHABLE,
    CollidingSegment,
    GridPath,
    astar_grid,
    extract_colliding_segments,
    mr_search,
    resume_lrs,
)
from .trajectory import (
    FlatState,
    KinoLimits,
    PiecewiseTrajectory,
    junction_jumps,
    lqmt_global,
    stitch,
    write_trajectory_csv,
)

log = logging.getLogger(__name__)


def _r3_weights():
    return OptWeights(time=0.5, stall_rtol=1e-2)


def _se3_weights():
    return OptWeights(smooth=1e-5, samples_per_piece=32, thrust_floor=1.5, stall_rtol=1e-2)


@dataclass
class PlannerParams:
    limits: KinoLimits = field(default_factory=KinoLimits)
    horizon: float = 15.0
    budget: int = 200_000
    ratio: int = 1
    segment_dt: float = 5e-3
    margin_cells: int = 2
    r3_max_box: float = 1.5
    gap_max_box: float = 1.0
    v_gap: float = 1.0
    # extra distance the SE3 endpoints are pushed away from the gap when free
    gap_standoff: float = 0.4
    # cut narrow-gap polyhedra against the raw cloud ("cloud") or HRM cells ("grid")
    gap_obstacles: str = "cloud"
    path_spacing: float = 0.1
    r3_weights: OptWeights = field(default_factory=_r3_weights)
    se3_weights: OptWeights = field(default_factory=_se3_weights)
    validate_dt: float = 1e-3

    def __post_init__(self):
        if isinstance(self.limits, dict):
            self.limits = KinoLimits(**self.limits)
        for name in ("r3_weights", "se3_weights"):
            val = getattr(self, name)
            if isinstance(val, dict):
                base = _r3_weights() if name == "r3_weights" else _se3_weights()
                setattr(self, name, replace(base, **val))
        if not self.horizon > 0:
            raise ConfigError("horizon D must be positive")
        if self.budget <= 0 or self.ratio < 1:
            raise ConfigError("search budget must be positive and ratio >= 1")
        if self.gap_obstacles not in ("cloud", "grid"):
            raise ConfigError("gap_obstacles must be 'cloud' or 'grid'")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown planner keys: {sorted(extra)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad planner config: {exc}") from exc

    def to_dict(self):
        return asdict(self)


@dataclass
class PlanRequest:
    start: FlatState
    goal: FlatState
    map: DualResMap
    params: PlannerParams = field(default_factory=PlannerParams)


@dataclass
class PlanPart:
    label: str
    traj: PiecewiseTrajectory
    corridor: Corridor


@dataclass
class PlanResult:
    parts: List[PlanPart]
    full: PiecewiseTrajectory
    stats: dict

    @property
    def labels(self):
        return [p.label for p in self.parts]


class _Timer:
    def __init__(self):
        self.ms = {}

    @contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.ms[name] = self.ms.get(name, 0.0) + 1e3 * (time.perf_counter() - t0)


def _thin(points, spacing):
    """Drop points closer than ``spacing`` to the last kept one (ends always kept)."""
    pts = np.asarray(points, dtype=float)
    if len(pts) <= 2:
        return pts
    keep = [0]
    for i in range(1, len(pts) - 1):
        if np.linalg.norm(pts[i] - pts[keep[-1]]) >= spacing:
            keep.append(i)
    keep.append(len(pts) - 1)
    return pts[keep]


class _Planner:
    def __init__(self, req: PlanRequest):
        self.req = req
        self.P = req.params
        self.map = req.map
        self.drone = req.map.drone
        self.timer = _Timer()
        self.stats = {"segments": [], "timings_ms": self.timer.ms}

    def fail(self, stage, reason, segment=None):
        self.stats["timings_ms"] = dict(self.timer.ms)
        return PlanFailure(stage, reason, segment, self.stats)

    # -- stages ------------------------------------------------------------------

    def global_samples(self, glob, t0, t1):
        dt = self.P.segment_dt
        ts = glob.sample_times(dt)
        sel = (ts >= t0 - 1e-12) & (ts <= t1 + 1e-12)
        return glob.eval(ts[sel])

    def solve_gap(self, path: GridPath, seg: CollidingSegment):
        """SE(3) part for a candidate segment, or ``(None, reason)``."""
        seed = generate_line_seed(path, self.map.hrm_raw, self.drone.r)
        if seed is None:
            return None, "no line seed"
        if seed.d @ (seg.e - seg.s) < 0:
            seed = LineSeed(-seed.d, seed.p, seed.length)
        cloud = self.map.cloud
        points = cloud.points if (self.P.gap_obstacles == "cloud" and cloud is not None) else None
        try:
            cor, a, b = narrow_gap_corridor(seed, self.map.hrm_raw, self.P.gap_max_box, points=points,
                                            clearance=self.drone.r + 0.05, lrm=self.map.lrm, delta=self.drone.h,
                                            standoff=self.P.gap_standoff)
        except (SeedError, CorridorError) as exc:
            return None, f"corridor: {exc}"
        lim = self.P.limits
        v_gap = min(lim.v_max / 2, self.P.v_gap)
        s = FlatState(a, v_gap * seed.d)
        g = FlatState(b, v_gap * seed.d)
        states, T = gap_initial_guess(cor, s, g, self.drone, lim, seed.d)
        prob = OptProblem(cor, s, g, lim, self.drone, SE3, self.P.se3_weights, states, T)
        res = optimize_trajectory(prob, debug_csv=self._debug_path("se3"))
        if not res.verified:
            return None, f"SE3 optimization not verified ({res.report.message})"
        return PlanPart(SE3, res.traj, cor), ""

    def connect(self, chain, s: FlatState, g: FlatState, index):
        """R3 part through an LRM corridor covering the polyline ``chain``."""
        pts = _thin(np.concatenate([np.atleast_2d(c) for c in chain]), self.P.path_spacing)
        path = GridPath(pts, float("nan"))
        try:
            cor = sfc_along_path(path, self.map.lrm, self.P.r3_max_box, delta=self.drone.h)
        except (CorridorError, PreconditionError) as exc:
            raise self.fail("corridor", str(exc), index) from exc
        prob = OptProblem(cor, s, g, self.P.limits, self.drone, R3, self.P.r3_weights)
        res = optimize_trajectory(prob, debug_csv=self._debug_path("r3"))
        if not res.verified:
            raise self.fail("r3", f"R3 optimization not verified ({res.report.message})", index)
        return PlanPart(R3, res.traj, cor)

    def _debug_path(self, kind):
        d = getattr(self, "debug_dir", None)
        if d is None:
            return None
        n = self.stats.setdefault("_debug_count", 0)
        self.stats["_debug_count"] = n + 1
        return os.path.join(d, f"opt_trace_{n:02d}_{kind}.csv")

    def single_piece(self, glob):
        """The global trajectory itself when one free polyhedron holds it."""
        pts = self.global_samples(glob, 0.0, glob.duration)
        try:
            poly = inflate_polyhedron(pts, self.map.lrm, self.P.r3_max_box)
        except PreconditionError:
            return None
        cor = Corridor([poly])
        rep = validate_trajectory(glob, cor, self.drone, R3, self.P.limits, self.P.validate_dt)
        return PlanPart(R3, glob, cor) if rep.passed else None

    def run(self) -> PlanResult:
        req, P, T = self.req, self.P, self.timer
        t_start = time.perf_counter()
        for name, st in (("start", req.start), ("goal", req.goal)):
            if self.map.lrm.occupied_at(st.p[None])[0]:
                raise PreconditionError(f"{name} position {np.round(st.p, 3).tolist()} is occupied in the LRM")
        with T("global"):
            glob = lqmt_global(req.start, req.goal, P.limits)
        with T("segments"):
            segs = extract_colliding_segments(glob, self.map.lrm, P.segment_dt, P.margin_cells)
        parts = None
        if not segs:
            with T("r3"):
                part = self.single_piece(glob)
            if part is not None:
                parts = [part]
        if parts is None:
            items = []
            for i, seg in enumerate(segs):
                with T("search"):
                    mr = mr_search(seg, self.map, P.ratio, P.budget)
                rec = {"segment": i, "class": mr.cls, "t_entry": seg.t_entry, "t_exit": seg.t_exit}
                self.stats["segments"].append(rec)
                if mr.cls == UNREACHABLE:
                    raise self.fail("search", "both searches exhausted without reaching the segment exit", i)
                if mr.cls == CLS_R3:
                    items.append((CLS_R3, seg, mr.path))
                    continue
                with T("se3"):
                    part, reason = self.solve_gap(mr.path, seg)
                if part is not None:
                    rec["planned"] = SE3
                    items.append((SE3, seg, part))
                    continue
                rec["se3_failure"] = reason
                with T("search"):
                    extra = P.budget - mr.lrs_expansions - mr.hrs_expansions
                    out = resume_lrs(mr.lrs_handle, max(extra, 0))
                if not out.found:
                    raise self.fail("se3", f"{reason}; LRS detour not found", i)
                rec["planned"] = "R3 detour"
                items.append((CLS_R3, seg, out.path))
            with T("r3"):
                parts = self.assemble(glob, items)
        with T("stitch"):
            try:
                full = stitch([p.traj for p in parts])
            except StitchError as exc:
                raise self.fail("stitch", str(exc)) from exc
        with T("validate"):
            for k, part in enumerate(parts):
                rep = validate_trajectory(part.traj, part.corridor, self.drone, part.label,
                                          P.limits, P.validate_dt)
                if not rep.passed:
                    raise self.fail("validate", f"part {k} ({part.label}): {rep.message}")
        self.stats["timings_ms"] = dict(T.ms)
        self.stats["timings_ms"]["total"] = 1e3 * (time.perf_counter() - t_start)
        self.stats["labels"] = [p.label for p in parts]
        self.stats.pop("_debug_count", None)
        return PlanResult(parts, full, self.stats)

    def assemble(self, glob, items):
        """R3 connections between the start, each SE(3) part and the goal."""
        lrm = self.map.lrm
        parts = []
        cur = self.req.start
        chain = [cur.p]
        t_cur = 0.0
        for i, (kind, seg, payload) in enumerate(items):
            chain.append(self.global_samples(glob, t_cur, seg.t_entry))
            if kind == CLS_R3:
                chain.append(payload.waypoints)
                chain.append(seg.e)
            else:
                se3 = payload
                s_wb = se3.traj.start_state()
                g_wb = se3.traj.end_state()
                lead = astar_grid(lrm, seg.s, s_wb.p, self.P.budget)
                tail = astar_grid(lrm, g_wb.p, seg.e, self.P.budget)
                if not (lead.found and tail.found):
                    raise self.fail("connect", "no LRM path to the SE3 endpoints", i)
                chain.extend([lead.path.waypoints, s_wb.p])
                parts.append(self.connect(chain, cur, s_wb, i))
                parts.append(se3)
                cur = g_wb
                chain = [g_wb.p, tail.path.waypoints, seg.e]
            t_cur = seg.t_exit
        chain.append(self.global_samples(glob, t_cur, glob.duration))
        chain.append(self.req.goal.p)
        parts.append(self.connect(chain, cur, self.req.goal, len(items)))
        return parts


def plan(req: PlanRequest, debug_dir=None) -> PlanResult:
    """Plan from ``req.start`` to ``req.goal``; raises :class:`PlanFailure` on failure."""
    pl = _Planner(req)
    pl.debug_dir = debug_dir
    return pl.run()


# -- export ------------------------------------------------------------------------


def export_plan(result: PlanResult, out_dir, rate=100.0, extra_summary=None):
    """Write trajectory CSV, corridor JSON/OBJ and a summary JSON into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    write_trajectory_csv(result.full, os.path.join(out_dir, "trajectory.csv"), rate)
    cor = {"parts": [{"label": p.label, "polyhedra": [poly.to_dict() for poly in p.corridor]}
                     for p in result.parts]}
    with open(os.path.join(out_dir, "corridor.json"), "w") as fh:
        json.dump(cor, fh, indent=1)
    write_obj([poly for p in result.parts for poly in p.corridor], os.path.join(out_dir, "corridor.obj"))
    summary = summarize(result)
    if extra_summary:
        summary.update(extra_summary)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    return summary


def summarize(result: PlanResult):
    jumps = junction_jumps(result.full)
    return {
        "labels": result.labels,
        "duration_s": result.full.duration,
        "length_m": result.full.length(),
        "max_junction_jump": float(jumps.max()) if jumps.size else 0.0,
        "segments": result.stats.get("segments", []),
        "timings_ms": result.stats.get("timings_ms", {}),
    }


def read_corridor_json(path):
    """Inverse of the corridor part of :func:`export_plan`: list of (label, Corridor)."""
    from .polyhedron import Polyhedron

    with open(path) as fh:
        data = json.load(fh)
    return [(p["label"], Corridor([Polyhedron.from_dict(rows) for rows in p["polyhedra"]]))
            for p in data["parts"]]


# -- receding horizon --------------------------------------------------------------


def plan_collides(result: PlanResult, dmap: DualResMap, dt=1e-2):
    """True if the plan hits obstacles known in ``dmap``.

    R3 parts are checked as points against the LRM; SE(3) parts by testing
    nearby raw cloud points against the body ellipsoid along the trajectory.
    """
    from .trajectory import rotations_from_flat, yaw_samples

    for part in result.parts:
        ts = part.traj.sample_times(dt)
        pos = part.traj.eval(ts)
        if part.label == R3:
            if np.any(dmap.lrm.occupied_at(pos)):
                return True
            continue
        if dmap.cloud is None or len(dmap.cloud) == 0:
            continue
        R = rotations_from_flat(part.traj.eval(ts, 2), yaw_samples(part.traj, ts))
        pts = dmap.cloud.points
        lo = pos.min(axis=0) - dmap.drone.r
        hi = pos.max(axis=0) + dmap.drone.r
        pts = pts[np.all((pts >= lo) & (pts <= hi), axis=1)]
        if len(pts) == 0:
            continue
        inv = 1.0 / np.array([dmap.drone.r, dmap.drone.r, dmap.drone.h])
        for p, Rk in zip(pos, R):
            body = (pts - p) @ Rk * inv
            if np.any((body**2).sum(axis=1) < 1.0):
                return True
    return False


@dataclass
class ReplanSession:
    """State of a simulated receding-horizon flight (perfect tracking)."""

    world: PointCloud
    bounds: tuple
    drone: object
    goal: FlatState
    params: PlannerParams
    sensor_radius: float
    known: PointCloud
    dmap: DualResMap
    current: Optional[PlanResult] = None
    plan_t0: float = 0.0  # session time at which ``current`` started
    now: float = 0.0
    state: Optional[FlatState] = None
    executed: list = field(default_factory=list)  # (t0, t1, PlanResult) executed spans
    events: list = field(default_factory=list)
    done: bool = False
    failed: Optional[str] = None


def _local_goal(pos, goal: FlatState, dmap: DualResMap, D):
    """Goal clipped to distance ``D`` along the straight line, pulled back to LRM-free space."""
    d = goal.p - pos
    n = float(np.linalg.norm(d))
    if n <= D:
        return goal, True
    u = d / n
    for back in np.arange(0.0, D, dmap.lrm.resolution / 2):
        q = pos + (D - back) * u
        if not dmap.lrm.occupied_at(q[None])[0]:
            return FlatState(q), False
    return FlatState(pos), False


def start_session(world: PointCloud, bounds, drone, start: FlatState, goal: FlatState,
                  params: PlannerParams, sensor_radius=None) -> ReplanSession:
    radius = params.horizon if sensor_radius is None else sensor_radius
    known = sensor_reveal(world, start.p, radius)
    dmap = build_dual_map(known, drone, bounds)
    sess = ReplanSession(world, bounds, drone, goal, params, radius, known, dmap, state=start)
    _replan(sess, "initial")
    return sess


def _replan(sess: ReplanSession, reason):
    local, final = _local_goal(sess.state.p, sess.goal, sess.dmap, sess.params.horizon)
    req = PlanRequest(sess.state, local, sess.dmap, sess.params)
    t0 = time.perf_counter()
    try:
        res = plan(req)
    except (WBPlanError, ValueError) as exc:
        sess.events.append({"t": sess.now, "reason": reason, "ok": False, "error": str(exc)})
        return False
    res.stats["final"] = final
    sess.events.append({"t": round(sess.now, 6), "reason": reason, "ok": True,
                        "plan_ms": 1e3 * (time.perf_counter() - t0), "labels": res.labels})
    if sess.current is not None:
        sess.executed.append((sess.plan_t0, sess.now, sess.current))
    sess.current = res
    sess.plan_t0 = sess.now
    return True


def replan_step(sess: ReplanSession, step=0.1, true_world: Optional[PointCloud] = None) -> ReplanSession:
    """Advance the simulated vehicle by ``step`` seconds and replan if triggered.

    Triggers: the remaining distance on the current plan drops below D/3
    (unless it already ends at the global goal), or the plan collides with
    newly revealed obstacles.
    """
    if sess.done or sess.failed:
        return sess
    world = sess.world if true_world is None else true_world
    cur = sess.current
    if cur is None:
        sess.failed = "no plan"
        return sess
    local_t = min(sess.now + step - sess.plan_t0, cur.full.duration)
    sess.now = sess.plan_t0 + local_t
    sess.state = cur.full.state(local_t)
    if sess.dmap.hrm_raw.occupied_at(sess.state.p[None])[0]:
        sess.failed = f"vehicle inside known obstacle at t={sess.now:.3f}"
        return sess
    seen = sensor_reveal(world, sess.state.p, sess.sensor_radius)
    merged = sess.known.merge(seen)
    grew = len(merged) != len(sess.known)
    if grew:
        sess.known = merged
        sess.dmap = build_dual_map(merged, sess.drone, sess.bounds)
    final = cur.stats.get("final", False)
    if final and local_t >= cur.full.duration - 1e-9:
        sess.executed.append((sess.plan_t0, sess.now, cur))
        sess.done = True
        return sess
    ts = cur.full.sample_times(0.05)
    pts = cur.full.eval(ts[ts >= local_t])
    remaining = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()) if len(pts) > 1 else 0.0
    reason = None
    if grew and plan_collides(cur, sess.dmap):
        reason = "collision"
    elif not final and remaining < sess.params.horizon / 3:
        reason = "distance"
    if reason is not None:
        ok = _replan(sess, reason)
        if not ok and reason == "collision":
            sess.failed = f"replan after collision failed at t={sess.now:.3f}"
        elif not ok and local_t >= cur.full.duration - 1e-9:
            sess.failed = f"stuck at the end of a plan at t={sess.now:.3f}"
    return sess


def run_session(sess: ReplanSession, step=0.1, max_time=120.0) -> ReplanSession:
    while not (sess.done or sess.failed) and sess.now < max_time:
        replan_step(sess, step)
    if not (sess.done or sess.failed):
        sess.failed = "time limit"
    return sess
