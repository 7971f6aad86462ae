import csv
import json

import numpy as np
import pytest
import yaml

import wbplan.planner as planner_mod
from wbplan.cli import main
from wbplan.harness import BenchmarkConfig, RunRecord, run_benchmark, run_one, summarize_records, validate_plan
from wbplan.mapping import MazeConfig, read_ply
from wbplan.optimize import OptResult, ValidationReport, _Objective, initial_guess
from wbplan.planner import PlanPart, PlanResult
from wbplan.polyhedron import Corridor, Polyhedron
from wbplan.trajectory import read_trajectory_csv


def _small_cfg(tmp_path, **maze):
    return BenchmarkConfig(wall_counts=[1], seeds=3, maze=MazeConfig(**maze), out_dir=str(tmp_path / "bench"))


# -- independent acceptance ----------------------------------------------------------------


def test_lying_optimizer_is_caught(monkeypatch, tmp_path):
    """An optimizer (and planner check) that claim success on the raw initial guess."""

    def liar(prob, debug_csv=None):
        states, T = initial_guess(prob)
        obj = _Objective(prob, 1.0, 4)
        traj = obj.trajectory(obj.pack(states, T))
        fake = ValidationReport(True, 0.0, None, None, None, np.zeros(3), True)
        return OptResult(traj, True, True, fake)

    def trusting(*args, **kwargs):
        return ValidationReport(True, 0.0, None, None, None, np.zeros(3), True)

    monkeypatch.setattr(planner_mod, "optimize_trajectory", liar)
    monkeypatch.setattr(planner_mod, "validate_trajectory", trusting)
    cfg = BenchmarkConfig(wall_counts=[2], seeds=1, out_dir=str(tmp_path))
    rec = run_one(cfg, 2, 0)
    assert not rec.success and rec.failure_stage == "validation"


def test_validate_plan_rejects_out_of_corridor(narrow_request_plan):
    req, res = narrow_request_plan
    assert validate_plan(res, req) == (True, "")
    shrunk = [PlanPart(p.label, p.traj, Corridor([Polyhedron(P.A, P.b - 0.05) for P in p.corridor]))
              for p in res.parts]
    ok, why = validate_plan(PlanResult(shrunk, res.full, res.stats), req)
    assert not ok and why.startswith("part ")
    moved = planner_mod.PlanRequest(req.start, planner_mod.FlatState(req.goal.p + 0.01), req.map, req.params)
    assert validate_plan(res, moved) == (False, "trajectory does not end at the requested state")


@pytest.fixture(scope="module")
def narrow_request_plan():
    from conftest import gap_request

    req, _ = gap_request(0.28, 1.0)
    return req, planner_mod.plan(req)


# -- aggregation and determinism -----------------------------------------------------------


def test_summary_counts():
    recs = [RunRecord(1, 0, True, 10.0, 5.0, 3.0, labels="R3"),
            RunRecord(1, 1, False, 12.0, failure_stage="search"),
            RunRecord(2, 0, True, 11.0, 7.0, 4.0, labels="R3|SE3|R3")]
    rows = summarize_records(recs)
    assert [(r["walls"], r["runs"], r["successes"]) for r in rows] == [(1, 2, 1), (2, 1, 1)]
    assert rows[0]["success_rate"] == "0.5000" and rows[0]["mean_length_m"] == "5.000000"
    assert recs[2].n_se3 == 1 and recs[1].row()["success"] == 0


def test_bench_is_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        cfg = BenchmarkConfig(wall_counts=[1, 2], seeds=2, out_dir=str(tmp_path / f"b{k}"))
        run_benchmark(cfg)
        outs.append(cfg.out_dir)
    for name in ("runs.csv", "summary.csv"):
        a = open(f"{outs[0]}/{name}", "rb").read()
        b = open(f"{outs[1]}/{name}", "rb").read()
        assert a == b
    with open(f"{outs[0]}/timings.json") as fh:
        t = json.load(fh)
    assert t["median_plan_ms"] > 0 and "hardware" in t
    with open(f"{outs[0]}/runs.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4


def test_wide_gaps_are_all_r3(tmp_path):
    recs = run_benchmark(_small_cfg(tmp_path, narrow_fraction=0.0))
    assert all(r.success for r in recs)
    assert all(set(r.labels.split("|")) == {"R3"} for r in recs)


def test_narrow_gaps_force_se3(tmp_path):
    recs = run_benchmark(_small_cfg(tmp_path, narrow_fraction=1.0))
    assert sum(r.n_se3 for r in recs) >= 1
    assert all(r.success for r in recs)


def test_bench_config_errors(tmp_path):
    from wbplan.errors import ConfigError, InputError

    with pytest.raises(ConfigError):
        BenchmarkConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        BenchmarkConfig(seeds=0)
    with pytest.raises(ConfigError):
        BenchmarkConfig(wall_counts=[11])
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(InputError):
        run_benchmark(BenchmarkConfig(wall_counts=[1], seeds=1, out_dir=str(blocker / "sub")))


# -- command line ------------------------------------------------------------------------


def _write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_cli_gen_maze(tmp_path):
    out = tmp_path / "m.ply"
    assert main(["gen-maze", "--seed", "3", "--walls", "2", "--out", str(out)]) == 0
    cloud = read_ply(out)
    meta = json.loads((tmp_path / "m.json").read_text())
    assert meta["points"] == len(cloud) and len(meta["gaps"]) == 2
    assert main(["gen-maze", "--walls", "0", "--out", str(out)]) == 2


def test_cli_plan_success_and_outputs(tmp_path):
    cfg = _write_yaml(tmp_path / "s.yaml", {
        "world": {"boxes": [{"lo": [3, -2, 0], "hi": [3.2, 0.5, 3]}], "bounds": [[0, -2, 0], [8, 2, 3]]},
        "start": [1, 0, 1.5], "goal": [7, 0, 1.5]})
    out = tmp_path / "out"
    assert main(["plan", "--config", cfg, "--out", str(out), "--debug"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["success"] and summary["validation"] == "passed"
    traj = read_trajectory_csv(out / "trajectory.csv")
    assert np.allclose([traj["px"][0], traj["px"][-1]], [1, 7])
    assert list((out / "debug").glob("opt_trace_*.csv"))


def test_cli_plan_ply_world(tmp_path):
    ply = tmp_path / "m.ply"
    assert main(["gen-maze", "--seed", "1", "--walls", "1", "--out", str(ply)]) == 0
    meta = json.loads((tmp_path / "m.json").read_text())
    cfg = _write_yaml(tmp_path / "s.yaml", {"world": {"ply": "m.ply", "bounds": meta["bounds"]},
                                            "start": meta["start"], "goal": meta["goal"]})
    assert main(["plan", "--config", cfg, "--out", str(tmp_path / "o")]) == 0


def test_cli_exit_codes(tmp_path):
    world = {"boxes": [{"lo": [3, -2, 0], "hi": [3.2, 2, 3]}], "bounds": [[0, -2, 0], [8, 2, 3]]}
    sealed = _write_yaml(tmp_path / "sealed.yaml", {"world": world, "start": [1, 0, 1.5], "goal": [7, 0, 1.5]})
    assert main(["plan", "--config", sealed, "--out", str(tmp_path / "a")]) == 1
    occupied = _write_yaml(tmp_path / "occ.yaml", {"world": world, "start": [3.1, 0, 1.5], "goal": [7, 0, 1.5]})
    assert main(["plan", "--config", occupied, "--out", str(tmp_path / "b")]) == 1
    bad = _write_yaml(tmp_path / "bad.yaml", {"world": world, "start": [1, 0, 1.5], "goal": [7, 0, 1.5],
                                              "unknown": 3})
    assert main(["plan", "--config", bad, "--out", str(tmp_path / "c")]) == 2
    assert main(["plan", "--config", str(tmp_path / "missing.yaml")]) == 2
    (tmp_path / "broken.yaml").write_text("world: [unclosed\n")
    assert main(["plan", "--config", str(tmp_path / "broken.yaml")]) == 2
    assert main(["bench", "--seeds", "0", "--out", str(tmp_path / "d")]) == 2


def test_cli_bench_and_sim(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--walls", "1", "--seeds", "2", "--out", str(out)]) == 0
    assert (out / "runs.csv").exists() and (out / "summary.csv").exists()
    sim = _write_yaml(tmp_path / "sim.yaml", {
        "world": {"boxes": [{"lo": [4, -2, 0], "hi": [4.2, 0.6, 3]}], "bounds": [[0, -2, 0], [8, 2, 3]]},
        "start": [1, 0, 1.5], "goal": [7, 0, 1.5], "sensor_radius": 2.5, "mode": "receding"})
    so = tmp_path / "sim"
    assert main(["sim", "--config", sim, "--out", str(so)]) == 0
    summary = json.loads((so / "summary.json").read_text())
    assert summary["success"] and (so / "known_final.ply").exists() and (so / "trajectory.csv").exists()
