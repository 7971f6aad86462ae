import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wbplan.errors import DomainError, InfeasibleError, InputError, SingularityError, StitchError
from wbplan.trajectory import (
    CSV_COLUMNS,
    FlatState,
    KinoLimits,
    PiecewiseTrajectory,
    PolyPiece,
    basis,
    boundary_matrix,
    check_kinodynamic,
    flat_to_rotation,
    junction_jumps,
    lqmt_global,
    read_trajectory_csv,
    snap_gram,
    solve_boundary_polynomial,
    stitch,
    write_trajectory_csv,
    yaw_tangent,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)
states = st.builds(lambda p, v, a, j: FlatState(p, v, a, j), vec3, vec3, vec3, vec3)
durations = st.floats(0.2, 5.0)


def _line(slope, T=2.0):
    c = np.zeros((8, 3))
    c[1] = slope
    return PiecewiseTrajectory([PolyPiece(c, T)])


# -- basis and evaluation ----------------------------------------------------------


def test_basis_matches_power_rule():
    t = 0.7
    for k in range(5):
        expect = [math.perm(n, k) * t ** (n - k) if n >= k else 0.0 for n in range(8)]
        assert np.allclose(basis(t, k), expect, rtol=1e-14, atol=0)
    assert basis(np.array([0.1, 0.2]), 2).shape == (2, 8)


def test_constant_and_linear_pieces():
    c = np.zeros((8, 3))
    c[0] = [1, 2, 3]
    const = PiecewiseTrajectory([PolyPiece(c, 1.0)])
    assert np.allclose(const.eval(0.4, 1), 0.0)
    lin = _line([1, 2, 3])
    for t in (0.0, 0.3, 2.0):
        assert np.allclose(lin.eval(t, 1), [1, 2, 3])


def test_eval_domain_and_piece_selection():
    c0 = np.zeros((8, 3))
    c1 = np.zeros((8, 3))
    c1[0] = 1.0
    tr = PiecewiseTrajectory([PolyPiece(c0, 1.0), PolyPiece(c1, 1.0)])
    # right-open intervals: t = 1 belongs to the second piece; the end is inclusive
    assert np.allclose(tr.eval(1.0), 1.0)
    assert np.allclose(tr.eval(2.0), 1.0)
    assert np.allclose(tr.eval(np.array([0.5, 1.0, 1.5])), [[0, 0, 0], [1, 1, 1], [1, 1, 1]])
    with pytest.raises(DomainError):
        tr.eval(2.1)
    with pytest.raises(DomainError):
        tr.eval(-0.1)
    with pytest.raises(DomainError):
        tr.eval(0.5, order=5)


@given(arrays(np.float64, (8, 3), elements=st.floats(-3, 3)), durations, st.floats(0.05, 0.95),
       st.integers(0, 3))
def test_derivative_matches_central_difference(c, T, frac, k):
    tr = PiecewiseTrajectory([PolyPiece(c, T)])
    t = frac * T
    h = 1e-5 * T
    fd = (tr.eval(t + h, k) - tr.eval(t - h, k)) / (2 * h)
    exact = tr.eval(t, k + 1)
    scale = max(np.abs(exact).max(), np.abs(tr.eval(t, k)).max() / T, 1.0)
    assert np.abs(fd - exact).max() <= 1e-5 * scale


def test_snap_gram_matches_quadrature():
    rng = np.random.default_rng(0)
    c = rng.normal(size=(8, 3))
    T = 1.3
    H = snap_gram(T)
    ts = np.linspace(0, T, 4001)
    s = basis(ts, 4) @ c
    integral = np.trapezoid((s**2).sum(axis=1), ts)
    assert np.trace(c.T @ H @ c) == pytest.approx(integral, rel=1e-6)


# -- boundary-value solve -------------------------------------------------------------


@given(states, states, durations)
def test_boundary_solve_reproduces_conditions(s0, s1, T):
    pc = solve_boundary_polynomial(s0, s1, T)
    assert np.abs(pc.start_state().as_array() - s0.as_array()).max() <= 1e-9
    assert np.abs(pc.end_state().as_array() - s1.as_array()).max() <= 1e-9 * max(1.0, 1.0 / T**3)


def test_rest_to_rest_zero_and_symmetry():
    z = FlatState(np.zeros(3))
    assert np.allclose(solve_boundary_polynomial(z, z, 1.0).coeffs, 0.0)
    pc = solve_boundary_polynomial(z, FlatState([1.0, 0, 0]), 2.0)
    assert np.abs(pc.eval(1.0) - [0.5, 0, 0]).max() <= 1e-9
    # independent solve with a generic least-squares routine
    rhs = np.vstack([z.as_array(), FlatState([1.0, 0, 0]).as_array()])
    c_ref = np.linalg.lstsq(boundary_matrix(2.0), rhs, rcond=None)[0]
    assert np.allclose(pc.coeffs, c_ref, atol=1e-10)


def test_boundary_solve_rejects_bad_duration():
    z = FlatState(np.zeros(3))
    with pytest.raises(DomainError):
        solve_boundary_polynomial(z, z, 0.0)


# -- LQMT global trajectory -------------------------------------------------------------


def test_lqmt_ten_metres_speed_tight():
    lim = KinoLimits(2.0, 20.0, 200.0)
    tr = lqmt_global(FlatState(np.zeros(3)), FlatState([10.0, 0, 0]), lim)
    rep = check_kinodynamic(tr, lim)
    assert rep.ok
    assert rep.max_norms[0] <= 2.0
    assert rep.max_norms[0] >= 0.99 * 2.0


def test_lqmt_monotone_in_speed_limit():
    s, g = FlatState(np.zeros(3)), FlatState([6.0, 2.0, 1.0])
    t_fast = lqmt_global(s, g, KinoLimits(4.0, 20, 200)).duration
    t_slow = lqmt_global(s, g, KinoLimits(2.0, 20, 200)).duration
    assert t_slow > t_fast


def test_lqmt_zero_displacement_floor():
    s = FlatState([1.0, 1.0, 1.0])
    tr = lqmt_global(s, s, KinoLimits())
    assert tr.duration == pytest.approx(0.1)
    assert np.allclose(tr.eval(0.05), [1, 1, 1])


def test_lqmt_infeasible_cap():
    with pytest.raises(InfeasibleError):
        lqmt_global(FlatState(np.zeros(3)), FlatState([1e4, 0, 0]), KinoLimits(1.0, 1.0, 1.0), T_cap=10.0)


@given(vec3, vec3)
def test_lqmt_output_is_feasible(p0, p1):
    lim = KinoLimits()
    tr = lqmt_global(FlatState(p0), FlatState(p1), lim)
    assert check_kinodynamic(tr, lim, 1e-3).ok


# -- kinodynamic check ---------------------------------------------------------------------


def test_kinodynamic_reports():
    z = PiecewiseTrajectory([PolyPiece(np.zeros((8, 3)), 1.0)])
    rep = check_kinodynamic(z, KinoLimits())
    assert rep.ok and np.all(rep.max_norms == 0)
    rep = check_kinodynamic(_line([3, 0, 0]), KinoLimits(2.0, 20, 200))
    assert not rep.ok and rep.first_violation[0] == 0.0
    with pytest.raises(DomainError):
        check_kinodynamic(z, KinoLimits(), dt=0)


def test_kinodynamic_max_close_to_refined_grid():
    rng = np.random.default_rng(3)
    c = rng.normal(size=(8, 3)) * 0.2
    tr = PiecewiseTrajectory([PolyPiece(c, 1.5)])
    coarse = check_kinodynamic(tr, KinoLimits(), 1e-3).max_norms[0]
    fine = check_kinodynamic(tr, KinoLimits(), 1e-4).max_norms[0]
    assert abs(coarse - fine) <= 1e-6 * max(1.0, fine)


# -- yaw and attitude --------------------------------------------------------------------


def test_yaw_tangent_cases():
    assert yaw_tangent(_line([1, 0, 0]), 1.0) == pytest.approx(0.0)
    assert yaw_tangent(_line([0, 1, 0]), 1.0) == pytest.approx(math.pi / 2)
    # +x motion followed by hover keeps the last yaw
    go = solve_boundary_polynomial(FlatState(np.zeros(3), [1, 0, 0]), FlatState([1, 0, 0]), 1.0)
    hover = PolyPiece(np.vstack([[1, 0, 0], np.zeros((7, 3))]), 1.0)
    tr = PiecewiseTrajectory([go, hover])
    assert yaw_tangent(tr, 1.5) == pytest.approx(0.0, abs=1e-9)


def test_flat_to_rotation_examples():
    assert np.allclose(flat_to_rotation(np.zeros(3), 0.0), np.eye(3))
    R = flat_to_rotation(np.array([0.0, 9.81, 0.0]), math.pi / 2)
    zb = np.array([0, 1, 1]) / math.sqrt(2)
    assert np.allclose(R[:, 2], zb)
    assert np.allclose(R.T @ zb, [0, 0, 1])
    with pytest.raises(SingularityError):
        flat_to_rotation(np.array([0, 0, -9.81]), 0.0)


@given(vec3, st.floats(-math.pi, math.pi))
def test_flat_to_rotation_orthonormal(a, psi):
    a = a * 4
    thrust = a + [0, 0, 9.81]
    if np.linalg.norm(thrust) < 1e-2:
        return
    R = flat_to_rotation(a, psi)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(R[:, 2], thrust / np.linalg.norm(thrust), atol=1e-12)


# -- stitching and export -------------------------------------------------------------------


def test_stitch_cases():
    a = FlatState(np.zeros(3))
    b = FlatState([1, 0, 0], [0.5, 0, 0])
    c = FlatState([2, 1, 0])
    p1 = PiecewiseTrajectory([solve_boundary_polynomial(a, b, 1.0)])
    p2 = PiecewiseTrajectory([solve_boundary_polynomial(b, c, 1.2)])
    assert stitch([p1]) is p1
    full = stitch([p1, p2])
    assert len(full) == 2 and junction_jumps(full).max() <= 1e-6
    b_bad = FlatState([1, 0, 0], [0.6, 0, 0])
    p2_bad = PiecewiseTrajectory([solve_boundary_polynomial(b_bad, c, 1.2)])
    with pytest.raises(StitchError) as err:
        stitch([p1, p2_bad])
    assert err.value.junction == 0 and err.value.component == "v"


def test_csv_round_trip(tmp_path):
    tr = PiecewiseTrajectory([solve_boundary_polynomial(FlatState(np.zeros(3)), FlatState([1, 1, 0.5]), 1.5)])
    path = tmp_path / "t.csv"
    write_trajectory_csv(tr, path, rate=100)
    data = read_trajectory_csv(path)
    assert list(data) == CSV_COLUMNS
    ts = data["t"]
    assert ts[0] == 0 and ts[-1] == pytest.approx(1.5)
    assert np.allclose(np.column_stack([data["px"], data["py"], data["pz"]]), tr.eval(ts), atol=1e-8)
    q = np.column_stack([data["qw"], data["qx"], data["qy"], data["qz"]])
    assert np.allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-7)
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(InputError):
        read_trajectory_csv(bad)
