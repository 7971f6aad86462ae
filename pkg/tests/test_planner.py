from pathlib import Path

import numpy as np
import pytest
import yaml
from conftest import gap_request

from wbplan.errors import ConfigError, PlanFailure, PreconditionError
from wbplan.harness import Scenario, maze_endpoints
from wbplan.mapping import DroneModel, MazeConfig, PointCloud, build_dual_map, generate_maze
from wbplan.optimize import R3, SE3, validate_trajectory
from wbplan.planner import (
    PlannerParams,
    PlanRequest,
    export_plan,
    plan,
    plan_collides,
    read_corridor_json,
    run_session,
    start_session,
)
from wbplan.trajectory import (
    FlatState,
    junction_jumps,
    lqmt_global,
    read_trajectory_csv,
    rotations_from_flat,
    yaw_samples,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="module")
def narrow_plan():
    req, gap = gap_request(0.28, 1.0)
    return req, gap, plan(req)


def _check_plan(req, res):
    assert np.abs(res.full.start_state().as_array() - req.start.as_array()).max() <= 1e-9
    assert np.abs(res.full.end_state().as_array() - req.goal.as_array()).max() <= 1e-9
    jumps = junction_jumps(res.full)
    assert jumps.size == 0 or jumps.max() <= 1e-6
    for part in res.parts:
        rep = validate_trajectory(part.traj, part.corridor, req.map.drone, part.label, req.params.limits)
        assert rep.passed, rep.message


def test_empty_map_is_single_global_piece():
    drone = DroneModel()
    bounds = (np.array([0, -2, 0]), np.array([8, 2, 3]))
    dmap = build_dual_map(PointCloud(np.empty((0, 3))), drone, bounds)
    req = PlanRequest(FlatState([1, 0, 1.5]), FlatState([7, 0.5, 1.5]), dmap)
    res = plan(req)
    assert res.labels == [R3] and len(res.full) == 1
    glob = lqmt_global(req.start, req.goal, req.params.limits)
    assert np.array_equal(res.full.pieces[0].coeffs, glob.pieces[0].coeffs)
    _check_plan(req, res)


def test_wide_gap_is_r3_only():
    req, _ = gap_request(1.0, 1.5)
    res = plan(req)
    assert set(res.labels) == {R3}
    _check_plan(req, res)


def test_narrow_gap_has_se3_part(narrow_plan):
    req, gap, res = narrow_plan
    assert res.labels == [R3, SE3, R3]
    _check_plan(req, res)


def test_narrow_gap_rolls_through(narrow_plan):
    req, gap, res = narrow_plan
    se3 = res.parts[1].traj
    ts = se3.sample_times(1e-3)
    pos = se3.eval(ts)
    k = int(np.argmin(np.abs(pos[:, 0] - gap.center[0])))
    R = rotations_from_flat(se3.eval(ts[k:k + 1], 2), yaw_samples(se3, ts[k:k + 1]))[0]
    tilt = np.degrees(np.arccos(abs(R[2, 2])))
    assert tilt > 45.0
    assert not plan_collides(res, req.map)


def test_closed_gap_fails_in_search():
    req, _ = gap_request(0.05, 0.05)
    with pytest.raises(PlanFailure) as err:
        plan(req)
    assert err.value.stage == "search"


def test_occupied_start_rejected():
    req, gap = gap_request(0.28, 1.0)
    req.start = FlatState([gap.x0 + 0.05, -2.0, 1.25])
    with pytest.raises(PreconditionError):
        plan(req)


def test_plans_are_deterministic():
    req, _ = gap_request(0.26, 1.2, (0.4, 1.3))
    a, b = plan(req), plan(req)
    assert a.labels == b.labels
    for p, q in zip(a.full.pieces, b.full.pieces):
        assert np.array_equal(p.coeffs, q.coeffs) and p.duration == q.duration


@pytest.mark.parametrize("seed", [0, 3])
def test_maze_plans(seed):
    cfg = MazeConfig(n_walls=2)
    drone = DroneModel()
    dmap = build_dual_map(generate_maze(cfg, seed), drone, cfg.bounds)
    s, g = maze_endpoints(cfg)
    req = PlanRequest(s, g, dmap)
    _check_plan(req, plan(req))


def test_export_round_trip(tmp_path, narrow_plan):
    req, _, res = narrow_plan
    summary = export_plan(res, tmp_path)
    assert summary["labels"] == res.labels
    parts = read_corridor_json(tmp_path / "corridor.json")
    assert [lab for lab, _ in parts] == res.labels
    for (lab, cor), part in zip(parts, res.parts):
        for p, q in zip(cor, part.corridor):
            assert np.allclose(p.A, q.A) and np.allclose(p.b, q.b)
    data = read_trajectory_csv(tmp_path / "trajectory.csv")
    assert data["t"][-1] == pytest.approx(res.full.duration)
    assert (tmp_path / "corridor.obj").exists()


def test_params_from_dict():
    p = PlannerParams.from_dict({"horizon": 10.0, "r3_weights": {"time": 1.0}})
    assert p.horizon == 10.0 and p.r3_weights.time == 1.0 and p.r3_weights.stall_rtol == 1e-2
    with pytest.raises(ConfigError):
        PlannerParams.from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        PlannerParams(horizon=0)


# -- receding horizon ----------------------------------------------------------------


def test_known_world_needs_no_obstacle_replans():
    cfg = MazeConfig(n_walls=1, lead=5.0, narrow_fraction=1.0)
    world = generate_maze(cfg, 2)
    s, g = maze_endpoints(cfg)
    sess = start_session(world, cfg.bounds, DroneModel(), s, g, PlannerParams(), sensor_radius=100.0)
    run_session(sess)
    assert sess.done and sess.failed is None
    assert not any(e["reason"] == "collision" for e in sess.events)


def test_revealed_gap_triggers_replan_and_succeeds():
    data = yaml.safe_load((CONFIGS / "reveal_gap.yaml").read_text())
    sc = Scenario.from_dict(data, base_dir=str(CONFIGS))
    sess = start_session(sc.cloud, sc.bounds, sc.drone, sc.start, sc.goal, sc.params, sc.sensor_radius)
    run_session(sess, sc.step, sc.max_time)
    assert sess.done and sess.failed is None, sess.failed
    replans = [e for e in sess.events if e["reason"] == "collision"]
    assert len(replans) >= 1 and all(e["ok"] for e in replans)
    assert any(SE3 in e.get("labels", []) for e in replans)
    # the executed flight never enters the true world's obstacles
    full_map = build_dual_map(sc.cloud, sc.drone, sc.bounds)
    for t0, t1, res in sess.executed:
        ts = np.linspace(0.0, min(t1 - t0, res.full.duration), 500)
        assert not full_map.hrm_raw.occupied_at(res.full.eval(ts)).any()
