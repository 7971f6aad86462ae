"""Piecewise degree-7 polynomial trajectories and flatness utilities.

Every piece stores an 8x3 coefficient matrix ``c`` and a duration ``T``;
position on the piece is ``c.T @ beta(t)`` with ``beta(t) = [1, t, ..., t^7]``
in local time. Seven is ``2s - 1`` for ``s = 4``, which is the lowest degree
that can match position, velocity, acceleration and jerk at both ends.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, InfeasibleError, InputError, SingularityError, StitchError

GRAVITY = 9.81
DEGREE = 7
NCOEF = DEGREE + 1
E3 = np.array([0.0, 0.0, 1.0])
MIN_DURATION = 0.1

# falling factorials n!/(n-k)! for k = 0..4, n = 0..7
_FF = np.array(
    [[math.perm(n, k) if n >= k else 0 for n in range(NCOEF)] for k in range(5)],
    dtype=float,
)


def basis(t, order=0):
    """Time basis (or its ``order``-th derivative) for scalar or array ``t``.

    Returns shape ``(8,)`` for scalar input and ``(len(t), 8)`` otherwise.
    """
    t = np.asarray(t, dtype=float)
    scalar = t.ndim == 0
    t = np.atleast_1d(t).ravel()
    out = np.zeros((t.size, NCOEF))
    out[:, order:] = np.vander(t, NCOEF - order, increasing=True) * _FF[order, order:]
    return out[0] if scalar else out


def boundary_matrix(T):
    """8x8 map from coefficients to [p, v, a, j](0) and [p, v, a, j](T)."""
    A = np.zeros((NCOEF, NCOEF))
    for k in range(4):
        A[k, k] = _FF[k, k]
        A[4 + k] = basis(T, k)
    return A


def snap_gram(T):
    """Gram matrix H with ``integral_0^T snap^2 dt = c^T H c`` (per axis)."""
    H = np.zeros((NCOEF, NCOEF))
    for i in range(4, NCOEF):
        for j in range(4, NCOEF):
            e = i + j - 7
            H[i, j] = _FF[4, i] * _FF[4, j] * T**e / e
    return H


@dataclass(frozen=True)
class FlatState:
    """Position, velocity, acceleration and jerk of the flat output."""

    p: np.ndarray
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    j: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("p", "v", "a", "j"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"FlatState.{name} must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def at_rest(cls, p):
        return cls(np.asarray(p, dtype=float))

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float).reshape(4, 3)
        return cls(arr[0], arr[1], arr[2], arr[3])

    def as_array(self):
        return np.stack([self.p, self.v, self.a, self.j])

    def __eq__(self, other):
        if not isinstance(other, FlatState):
            return NotImplemented
        return bool(np.array_equal(self.as_array(), other.as_array()))

    def __hash__(self):
        return hash(self.as_array().tobytes())


@dataclass(frozen=True)
class KinoLimits:
    v_max: float = 4.0
    a_max: float = 20.0
    j_max: float = 200.0

    def __post_init__(self):
        if not (self.v_max > 0 and self.a_max > 0 and self.j_max > 0):
            raise DomainError("kinodynamic limits must be positive")

    def as_array(self):
        return np.array([self.v_max, self.a_max, self.j_max])


@dataclass(frozen=True)
class PolyPiece:
    coeffs: np.ndarray
    duration: float

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float).reshape(NCOEF, 3)
        if not self.duration > 0:
            raise DomainError("piece duration must be positive")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "duration", float(self.duration))

    def eval(self, t, order=0):
        return basis(t, order) @ self.coeffs

    def state(self, t):
        return FlatState.from_array([self.eval(t, k) for k in range(4)])

    def start_state(self):
        return self.state(0.0)

    def end_state(self):
        return self.state(self.duration)


class PiecewiseTrajectory:
    """Ordered sequence of polynomial pieces on consecutive time intervals."""

    def __init__(self, pieces: Sequence[PolyPiece]):
        if len(pieces) == 0:
            raise DomainError("a trajectory needs at least one piece")
        self.pieces = tuple(pieces)
        self.durations = np.array([pc.duration for pc in self.pieces])
        self.breaks = np.concatenate([[0.0], np.cumsum(self.durations)])
        self._coeffs = np.stack([pc.coeffs for pc in self.pieces])

    def __len__(self):
        return len(self.pieces)

    @property
    def duration(self):
        return float(self.breaks[-1])

    def locate(self, t):
        """Piece index and local time; right-open intervals, last endpoint inclusive."""
        t = np.asarray(t, dtype=float)
        T = self.duration
        if np.any(t < -1e-12) or np.any(t > T + 1e-12):
            raise DomainError(f"t outside [0, {T}]")
        t = np.clip(t, 0.0, T)
        idx = np.searchsorted(self.breaks, t, side="right") - 1
        idx = np.clip(idx, 0, len(self.pieces) - 1)
        return idx, t - self.breaks[idx]

    def eval(self, t, order=0):
        """Value of the ``order``-th derivative; ``t`` may be scalar or array."""
        return self.eval_orders(t, (order,))[0]

    def eval_orders(self, t, orders=(0, 1, 2, 3)):
        """Several derivative orders at the same times, sharing one power table."""
        if any(k not in (0, 1, 2, 3, 4) for k in orders):
            raise DomainError("order must be in 0..4")
        idx, tau = self.locate(t)
        if np.ndim(tau) == 0:
            return [basis(tau, k) @ self._coeffs[idx] for k in orders]
        V = np.vander(tau, NCOEF, increasing=True)
        # group samples by piece; sorted inputs give contiguous runs
        order_idx = np.argsort(idx, kind="stable")
        cuts = np.flatnonzero(np.diff(idx[order_idx])) + 1
        runs = [r for r in np.split(order_idx, cuts) if r.size]
        outs = []
        for k in orders:
            B = V[:, : NCOEF - k] * _FF[k, k:]
            out = np.empty((len(tau), 3))
            for run in runs:
                out[run] = B[run] @ self._coeffs[idx[run[0]], k:]
            outs.append(out)
        return outs

    def state(self, t):
        return FlatState.from_array(self.eval_orders(t))

    def start_state(self):
        return self.pieces[0].start_state()

    def end_state(self):
        return self.pieces[-1].end_state()

    def sample_times(self, dt):
        """Closed uniform grid over the whole duration, endpoint included."""
        n = int(math.floor(self.duration / dt + 1e-9))
        ts = np.arange(n + 1) * dt
        if ts[-1] < self.duration - 1e-12:
            ts = np.append(ts, self.duration)
        return ts

    def length(self, dt=1e-3):
        ts = self.sample_times(dt)
        p = self.eval(ts)
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def eval_trajectory(traj: PiecewiseTrajectory, t, order=0):
    return traj.eval(t, order)


def solve_boundary_polynomial(s0: FlatState, s1: FlatState, T: float) -> PolyPiece:
    """Unique degree-7 piece matching p, v, a, j at both ends over duration T."""
    if not T > 0:
        raise DomainError("T must be positive")
    rhs = np.vstack([s0.as_array(), s1.as_array()])
    coeffs = np.linalg.solve(boundary_matrix(T), rhs)
    return PolyPiece(coeffs, T)


@dataclass
class KinoReport:
    max_norms: np.ndarray
    first_violation: list
    limits: np.ndarray

    @property
    def ok(self):
        return all(t is None for t in self.first_violation)

    def as_dict(self):
        names = ("v", "a", "j")
        return {
            f"max_{n}": float(m) for n, m in zip(names, self.max_norms)
        } | {f"first_violation_{n}": t for n, t in zip(names, self.first_violation)}


def check_kinodynamic(traj: PiecewiseTrajectory, limits: KinoLimits, dt=1e-3, tol=1e-6):
    """Sample v, a, j on a closed grid and report max norms and first violations."""
    if not dt > 0:
        raise DomainError("dt must be positive")
    ts = traj.sample_times(dt)
    lim = limits.as_array()
    max_norms = np.zeros(3)
    first = []
    for k, val in enumerate(traj.eval_orders(ts, (1, 2, 3))):
        nrm = np.linalg.norm(val, axis=1)
        max_norms[k] = nrm.max()
        bad = np.nonzero(nrm > lim[k] + tol)[0]
        first.append(float(ts[bad[0]]) if bad.size else None)
    return KinoReport(max_norms, first, lim)


def lqmt_global(s_s: FlatState, g_g: FlatState, limits: KinoLimits, rho=None,
                rel_tol=1e-3, T_cap=1e3, dt=1e-3) -> PiecewiseTrajectory:
    """Obstacle-free single-piece trajectory with the smallest limit-feasible duration.

    The duration is found by doubling from a floor and then bisecting to
    ``rel_tol``. ``rho`` (time weight) is accepted for interface parity and unused.
    """
    del rho

    def feasible(T, step):
        traj = PiecewiseTrajectory([solve_boundary_polynomial(s_s, g_g, T)])
        return check_kinodynamic(traj, limits, step).ok

    if s_s == g_g:
        return PiecewiseTrajectory([solve_boundary_polynomial(s_s, g_g, MIN_DURATION)])

    # bisect on a coarse grid, then confirm (and nudge up) on the requested one
    coarse = max(dt, 1e-2)
    dist = float(np.linalg.norm(g_g.p - s_s.p))
    lo = MIN_DURATION
    if feasible(lo, coarse):
        hi = lo
    else:
        hi = max(2.0 * lo, dist / limits.v_max)
        while not feasible(hi, coarse):
            lo = hi
            hi *= 2.0
            if hi > T_cap:
                raise InfeasibleError(f"no feasible duration below cap {T_cap} s")
        while hi - lo > rel_tol * hi:
            mid = 0.5 * (lo + hi)
            if feasible(mid, coarse):
                hi = mid
            else:
                lo = mid
    while not feasible(hi, dt):
        hi *= 1.0 + rel_tol
        if hi > T_cap:
            raise InfeasibleError(f"no feasible duration below cap {T_cap} s")
    return PiecewiseTrajectory([solve_boundary_polynomial(s_s, g_g, hi)])


def yaw_samples(traj: PiecewiseTrajectory, ts, eps_v=1e-3, initial=0.0):
    """Tangent yaw at sorted times ``ts``, holding the last defined value at hover."""
    v = traj.eval(np.asarray(ts, dtype=float), 1)
    speed = np.hypot(v[:, 0], v[:, 1])
    yaw = np.arctan2(v[:, 1], v[:, 0])
    defined = speed >= eps_v
    idx = np.where(defined, np.arange(len(yaw)), -1)
    idx = np.maximum.accumulate(idx)
    return np.where(idx >= 0, yaw[np.maximum(idx, 0)], initial)


def yaw_tangent(traj: PiecewiseTrajectory, t, eps_v=1e-3, dt=1e-3):
    """Yaw from the horizontal velocity at ``t``; hover reuses the latest defined yaw."""
    grid = np.append(np.arange(0.0, t, dt), t)
    return float(yaw_samples(traj, grid, eps_v)[-1])


def flat_to_rotation(a, psi, eps_t=1e-3):
    """Rotation matrix [x_b y_b z_b] from acceleration and yaw via flatness."""
    R = rotations_from_flat(np.asarray(a, dtype=float)[None], np.array([psi]), eps_t)
    return R[0]


def rotations_from_flat(acc, psi, eps_t=1e-3):
    """Vectorised ``flat_to_rotation`` for ``acc`` (N,3) and ``psi`` (N,)."""
    thrust = acc + GRAVITY * E3
    tn = np.linalg.norm(thrust, axis=1)
    if np.any(tn <= eps_t):
        raise SingularityError("thrust direction undefined (free fall)")
    zb = thrust / tn[:, None]
    xc = np.stack([np.cos(psi), np.sin(psi), np.zeros_like(psi)], axis=1)
    yb = np.cross(zb, xc)
    yn = np.linalg.norm(yb, axis=1)
    degenerate = yn < 1e-9
    if np.any(degenerate):
        # body z parallel to the heading: build x_b from the lateral heading instead
        yc = np.stack([-np.sin(psi), np.cos(psi), np.zeros_like(psi)], axis=1)
        xb_alt = np.cross(yc[degenerate], zb[degenerate])
        xb_alt /= np.linalg.norm(xb_alt, axis=1)[:, None]
        yb[degenerate] = np.cross(zb[degenerate], xb_alt)
        yn = np.linalg.norm(yb, axis=1)
    yb = yb / yn[:, None]
    xb = np.cross(yb, zb)
    return np.stack([xb, yb, zb], axis=2)


def stitch(parts: Sequence[PiecewiseTrajectory], tol=1e-6) -> PiecewiseTrajectory:
    """Concatenate trajectories whose terminal and initial states agree."""
    if len(parts) == 1:
        return parts[0]
    names = ("p", "v", "a", "j")
    for i in range(len(parts) - 1):
        e = parts[i].end_state().as_array()
        s = parts[i + 1].start_state().as_array()
        jumps = np.abs(e - s).max(axis=1)
        worst = int(np.argmax(jumps))
        if jumps[worst] > tol:
            raise StitchError(i, names[worst], float(jumps[worst]))
    pieces = [pc for part in parts for pc in part.pieces]
    return PiecewiseTrajectory(pieces)


def junction_jumps(traj: PiecewiseTrajectory):
    """Max absolute discontinuity per derivative order (0..3) at each piece junction."""
    out = np.zeros((len(traj) - 1, 4))
    for i in range(len(traj) - 1):
        e = traj.pieces[i].end_state().as_array()
        s = traj.pieces[i + 1].start_state().as_array()
        out[i] = np.abs(e - s).max(axis=1)
    return out


# -- CSV export ----------------------------------------------------------------------

CSV_COLUMNS = ["t", "px", "py", "pz", "vx", "vy", "vz", "ax", "ay", "az", "jx", "jy", "jz",
               "yaw", "qw", "qx", "qy", "qz"]


def write_trajectory_csv(traj: PiecewiseTrajectory, path, rate=100.0):
    """Sample ``traj`` at ``rate`` Hz with the flatness attitude as a unit quaternion.

    Samples in free fall (undefined thrust direction) repeat the previous attitude.
    """
    from scipy.spatial.transform import Rotation

    ts = traj.sample_times(1.0 / rate)
    vals = [traj.eval(ts, k) for k in range(4)]
    psi = yaw_samples(traj, ts)
    thrust = np.linalg.norm(vals[2] + GRAVITY * E3, axis=1)
    ok = thrust > 1e-3
    R = np.tile(np.eye(3), (len(ts), 1, 1))
    if ok.any():
        R[ok] = rotations_from_flat(vals[2][ok], psi[ok])
    for i in np.nonzero(~ok)[0]:
        if i > 0:
            R[i] = R[i - 1]
    q = Rotation.from_matrix(R).as_quat()  # x, y, z, w
    q = q * np.where(q[:, 3:4] < 0, -1.0, 1.0)
    rows = np.column_stack([ts, *vals, psi, q[:, 3], q[:, 0], q[:, 1], q[:, 2]])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def read_trajectory_csv(path):
    """Load a CSV written by :func:`write_trajectory_csv` as a dict of column arrays."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    if data.dtype.names is None or list(data.dtype.names) != CSV_COLUMNS:
        raise InputError(f"{path}: unexpected trajectory CSV header")
    return {name: np.atleast_1d(data[name]) for name in CSV_COLUMNS}
