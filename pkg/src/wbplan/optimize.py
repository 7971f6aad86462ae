"""Corridor-constrained trajectory optimization (R3 sphere / SE3 ellipsoid).

Decision variables are the full flat states at the M-1 interior junctions and
the log durations of the M pieces. Each piece is the degree-7 boundary-value
polynomial between its two junction states, so continuity up to jerk holds by
construction. Corridor and kinodynamic constraints enter as smoothed-hinge
penalties sampled uniformly on each piece; the objective and its analytic
gradient are minimised with L-BFGS. Every result is re-checked by
:func:`validate_trajectory`, which uses its own evaluation route.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy.optimize import minimize

from .errors import NumericalError, PreconditionError, SingularityError
from .mapping import DroneModel
from .polyhedron import Corridor, Polyhedron
from .trajectory import (
    GRAVITY,
    FlatState,
    KinoLimits,
    PiecewiseTrajectory,
    PolyPiece,
    _FF,
    boundary_matrix,
    rotations_from_flat,
    yaw_samples,
)

log = logging.getLogger(__name__)

R3 = "R3"
SE3 = "SE3"

# falling factorial table for the snap Gram derivative


@dataclass
class OptWeights:
    smooth: float = 1e-3
    time: float = 2.0
    penalty: float = 1e4
    samples_per_piece: int = 16
    # penalised residuals target this margin inside the feasible set
    geo_margin: float = 2e-3
    kino_margin: float = 2e-2
    hinge_width: float = 1e-3
    thrust_floor: float = 0.5
    max_iter: int = 300
    gtol: float = 1e-6
    ftol: float = 1e-7
    # stop once sample-feasible and the objective moved < stall_rtol over stall_window iterations
    stall_window: int = 10
    stall_rtol: float = 1e-3
    retries: int = 3
    min_duration: float = 0.02
    max_duration: float = 100.0


@dataclass
class OptProblem:
    corridor: Corridor
    start: FlatState
    goal: FlatState
    limits: KinoLimits
    drone: DroneModel
    mode: str = R3
    weights: OptWeights = field(default_factory=OptWeights)
    init_states: Optional[np.ndarray] = None
    init_durations: Optional[np.ndarray] = None
    delta_overlap: Optional[float] = None

    @property
    def n_pieces(self):
        return len(self.corridor)


@dataclass
class ValidationReport:
    passed: bool
    max_geo_residual: float
    worst_time: Optional[float]
    worst_row: Optional[int]
    worst_piece: Optional[int]
    max_norms: np.ndarray
    kino_ok: bool
    message: str = ""

    def as_dict(self):
        return {
            "passed": self.passed,
            "max_geo_residual": self.max_geo_residual,
            "worst_time": self.worst_time,
            "worst_row": self.worst_row,
            "worst_piece": self.worst_piece,
            "max_v": float(self.max_norms[0]),
            "max_a": float(self.max_norms[1]),
            "max_j": float(self.max_norms[2]),
            "kino_ok": self.kino_ok,
            "message": self.message,
        }


@dataclass
class OptResult:
    traj: PiecewiseTrajectory
    converged: bool
    verified: bool
    report: ValidationReport
    trace: list = field(default_factory=list)
    attempts: int = 1


# -- constraint evaluators -------------------------------------------------------


def r3_constraint_eval(poly: Polyhedron, p):
    """Per-row ``a.p - b``; feasible iff every entry is <= 0."""
    return poly.residuals(np.asarray(p, dtype=float))


def se3_constraint_eval(poly: Polyhedron, R, p, drone: DroneModel):
    """Per-row ``||Q R^T a|| + a.p - b`` for the body ellipsoid at pose (R, p)."""
    R = np.asarray(R, dtype=float)
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
        raise PreconditionError("R is not orthonormal")
    ARQ = poly.A @ R @ drone.Q
    return np.sqrt((ARQ**2).sum(axis=1)) + poly.A @ np.asarray(p, dtype=float) - poly.b


def _hinge(x, w):
    """C2 cubic smoothing of max(0, x) with transition width w; value and slope."""
    f = np.zeros_like(x)
    df = np.zeros_like(x)
    mid = (x > 0) & (x < w)
    hi = x >= w
    xm = x[mid]
    f[mid] = xm**3 / w**2 - xm**4 / (2 * w**3)
    df[mid] = 3 * xm**2 / w**2 - 2 * xm**3 / w**3
    f[hi] = x[hi] - 0.5 * w
    df[hi] = 1.0
    return f, df


# -- objective ---------------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _hinge1(x, w):
    if x <= 0.0:
        return 0.0, 0.0
    if x < w:
        return x**3 / w**2 - x**4 / (2 * w**3), 3 * x**2 / w**2 - 2 * x**3 / w**3
    return x - 0.5 * w, 1.0


@numba.njit(cache=True)
def _objective_kernel(states, T, Ap, bp, nrows, frac, FF, se3, r2, dq, lim, mu,
                      ws, wt, geo_m, kino_m, hw, floor):
    """Cost, state gradient, duration gradient and max sampled residual.

    Per piece: ``c = A(T)^-1 S``; the gradient reaches the boundary states via
    ``A^-T dJ/dc`` and the duration via ``-A^-1 A'(T) c`` plus the explicit
    scaling of the sample times ``t_k = frac_k T``.
    """
    M = T.shape[0]
    K = frac.shape[0]
    total = 0.0
    maxres = -np.inf
    gstates = np.zeros_like(states)
    gT = np.zeros(M)
    B = np.zeros((5, 8))
    val = np.zeros((5, 3))
    G = np.zeros((4, 3))
    for i in range(M):
        Ti = T[i]
        Amat = np.zeros((8, 8))
        for k in range(4):
            Amat[k, k] = FF[k, k]
            for n in range(k, 8):
                Amat[4 + k, n] = FF[k, n] * Ti ** (n - k)
        Ainv = np.linalg.inv(Amat)
        S = np.empty((8, 3))
        S[:4] = states[i]
        S[4:] = states[i + 1]
        c = Ainv @ S
        gc = np.zeros((8, 3))
        cost = wt * Ti
        gTi = wt
        # snap energy: H_ab = FF4_a FF4_b T^e / e with e = a + b - 7
        for a in range(4, 8):
            for bb in range(4, 8):
                e = a + bb - 7
                h0 = FF[4, a] * FF[4, bb] / e
                Hab = h0 * Ti**e
                dHab = h0 * e * Ti ** (e - 1)
                for d in range(3):
                    cost += ws * c[a, d] * Hab * c[bb, d]
                    gTi += ws * c[a, d] * dHab * c[bb, d]
                    gc[a, d] += 2 * ws * Hab * c[bb, d]
        for kk in range(K):
            t = frac[kk] * Ti
            for o in range(5):
                for n in range(8):
                    B[o, n] = FF[o, n] * t ** (n - o) if n >= o else 0.0
            for o in range(5):
                for d in range(3):
                    s = 0.0
                    for n in range(o, 8):
                        s += B[o, n] * c[n, d]
                    val[o, d] = s
            G[:, :] = 0.0
            ux = val[2, 0]
            uy = val[2, 1]
            uz = val[2, 2] + 9.81
            un = np.sqrt(ux * ux + uy * uy + uz * uz)
            zx = ux / un
            zy = uy / un
            zz = uz / un
            for r in range(nrows[i]):
                nx = Ap[i, r, 0]
                ny = Ap[i, r, 1]
                nz = Ap[i, r, 2]
                res = nx * val[0, 0] + ny * val[0, 1] + nz * val[0, 2] - bp[i, r]
                q = 0.0
                ext = 1.0
                if se3:
                    q = zx * nx + zy * ny + zz * nz
                    ext = np.sqrt(max(r2 - dq * q * q, 1e-12))
                    res += ext
                if res > maxres:
                    maxres = res
                f, df = _hinge1(res + geo_m, hw)
                if df != 0.0 or f != 0.0:
                    cost += mu * f
                    G[0, 0] += mu * df * nx
                    G[0, 1] += mu * df * ny
                    G[0, 2] += mu * df * nz
                    if se3:
                        # dq/da = (n - q z) / |u|
                        coef = mu * df * (-dq * q / ext) / un
                        G[2, 0] += coef * (nx - q * zx)
                        G[2, 1] += coef * (ny - q * zy)
                        G[2, 2] += coef * (nz - q * zz)
            if se3:
                f, df = _hinge1(floor - un, hw)
                if df != 0.0 or f != 0.0:
                    cost += mu * f
                    G[2, 0] -= mu * df * ux / un
                    G[2, 1] -= mu * df * uy / un
                    G[2, 2] -= mu * df * uz / un
            for o in range(1, 4):
                l2 = lim[o - 1] ** 2
                s = (val[o, 0] ** 2 + val[o, 1] ** 2 + val[o, 2] ** 2) / l2 - 1.0
                if s > maxres:
                    maxres = s
                f, df = _hinge1(s + kino_m, hw)
                if df != 0.0 or f != 0.0:
                    cost += mu * f
                    for d in range(3):
                        G[o, d] += mu * 2 * df / l2 * val[o, d]
            for o in range(4):
                for d in range(3):
                    g = G[o, d]
                    if g != 0.0:
                        for n in range(o, 8):
                            gc[n, d] += B[o, n] * g
                        # explicit dependence of the sample time on T
                        gTi += frac[kk] * g * val[o + 1, d]
        gS = Ainv.T @ gc
        gstates[i] += gS[:4]
        gstates[i + 1] += gS[4:]
        dA = np.zeros((8, 8))
        for k in range(4):
            for n in range(k + 1, 8):
                dA[4 + k, n] = FF[k + 1, n] * Ti ** (n - k - 1)
        dc = Ainv @ (dA @ c)
        for n in range(8):
            for d in range(3):
                gTi -= gc[n, d] * dc[n, d]
        gT[i] = gTi
        total += cost
    return total, gstates, gT, maxres


class _Objective:
    """Objective with analytic gradient over (interior states, log durations)."""

    def __init__(self, prob: OptProblem, penalty, kappa):
        self.prob = prob
        self.M = prob.n_pieces
        self.mu = float(penalty)
        self.kappa = kappa
        w = prob.weights
        self.w = w
        self.frac = np.arange(kappa + 1) / kappa
        self.start = prob.start.as_array()
        self.goal = prob.goal.as_array()
        self.se3 = prob.mode == SE3
        d = prob.drone
        self.r2 = d.r**2
        self.dq = d.r**2 - d.h**2
        self.lim = prob.limits.as_array()
        polys = list(prob.corridor)
        rows = max(len(p) for p in polys)
        self.A = np.zeros((self.M, rows, 3))
        self.b = np.zeros((self.M, rows))
        self.nrows = np.array([len(p) for p in polys], dtype=np.int64)
        for i, p in enumerate(polys):
            self.A[i, : len(p)] = p.A
            self.b[i, : len(p)] = p.b
        self.last_maxres = np.inf
        self.last_f = np.inf
        self.last_x = None

    def unpack(self, x):
        M = self.M
        inner = x[: 12 * (M - 1)].reshape(M - 1, 4, 3)
        states = np.concatenate([self.start[None], inner, self.goal[None]])
        T = np.exp(x[12 * (M - 1):])
        return states, T

    def pack(self, states, T):
        return np.concatenate([states[1:-1].ravel(), np.log(T)])

    def __call__(self, x):
        w = self.w
        states, T = self.unpack(x)
        total, gstates, gT, maxres = _objective_kernel(
            states, T, self.A, self.b, self.nrows, self.frac, _FF, self.se3, self.r2, self.dq,
            self.lim, self.mu, w.smooth, w.time, w.geo_margin, w.kino_margin, w.hinge_width,
            w.thrust_floor)
        grad = np.concatenate([gstates[1:-1].ravel(), gT * T])
        if not (np.isfinite(total) and np.all(np.isfinite(grad))):
            raise NumericalError("non-finite objective or gradient")
        self.last_maxres = maxres
        self.last_f = total
        self.last_x = x.copy()
        return total, grad

    def trajectory(self, x):
        states, T = self.unpack(x)
        pieces = []
        for i in range(self.M):
            S = np.vstack([states[i], states[i + 1]])
            pieces.append(PolyPiece(np.linalg.solve(boundary_matrix(T[i]), S), T[i]))
        return PiecewiseTrajectory(pieces)


def initial_guess(prob: OptProblem):
    """Junction positions at overlap Chebyshev centers; durations from length / (v_max/2)."""
    M = prob.n_pieces
    if prob.init_states is not None:
        states = np.asarray(prob.init_states, dtype=float).copy()
    else:
        pts = [prob.start.p]
        pts.extend(c for c, _ in prob.corridor.overlap_balls())
        pts.append(prob.goal.p)
        pts = np.array(pts)
        states = np.zeros((M + 1, 4, 3))
        states[:, 0] = pts
        cruise = 0.5 * prob.limits.v_max
        for i in range(1, M):
            d = pts[i + 1] - pts[i - 1]
            n = np.linalg.norm(d)
            if n > 1e-9:
                states[i, 1] = d / n * min(cruise, n)
    states[0] = prob.start.as_array()
    states[-1] = prob.goal.as_array()
    if prob.init_durations is not None:
        T = np.asarray(prob.init_durations, dtype=float)
    else:
        seg = np.linalg.norm(np.diff(states[:, 0], axis=0), axis=1)
        T = np.maximum(seg / (0.5 * prob.limits.v_max), 0.2)
    return states, T


def gap_initial_guess(corridor: Corridor, start: FlatState, goal: FlatState, drone: DroneModel,
                      limits: KinoLimits, direction, lateral_acc=2.0, min_speed=1.0, clearance=0.02):
    """Attitude-aware initial states for a three-piece narrow-gap corridor.

    The middle piece is seeded with a constant-acceleration arc whose thrust
    axis is the normal of the thinnest face pair of the gap polyhedron, so the
    body starts out already tilted to pass edge-on. Pieces one and two meet
    where the ellipsoid has just left the first polyhedron along ``direction``.
    Returns ``(states, durations)`` for :class:`OptProblem`.
    """
    if len(corridor) != 3:
        raise PreconditionError("gap initial guess needs exactly three polyhedra")
    P1, P2, P3 = corridor.polys
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    V = P2.vertices()
    best = None
    for nrm in P2.A:
        # face pairs roughly parallel to the travel direction bound the gap width
        n_perp = nrm - (nrm @ d) * d
        if np.linalg.norm(n_perp) < 0.5:
            continue
        n_perp = n_perp / np.linalg.norm(n_perp)
        width = float((V @ n_perp).max() - (V @ n_perp).min())
        if best is None or width < best[0] - 1e-12:
            best = (width, n_perp)
    n_w = best[1] if best is not None else np.array([0.0, 0.0, 1.0])
    if n_w[2] < 0:
        n_w = -n_w
    cz = float(n_w[2])
    lam = GRAVITY * cz + lateral_acc * (1.0 - cz)
    acc = lam * n_w - GRAVITY * np.array([0.0, 0.0, 1.0])

    s_in = float((P1.vertices() @ d).max()) - drone.r - clearance
    s_out = float((P3.vertices() @ d).min()) + drone.r + clearance
    if s_out - s_in < 0.1:
        mid = 0.5 * (s_in + s_out)
        s_in, s_out = mid - 0.05, mid + 0.05
    length = s_out - s_in
    a_n = np.linalg.norm(acc)
    # keep the arc excursion within half of the room left along the acceleration
    speed = max(min_speed, 0.5 * (np.linalg.norm(start.v) + np.linalg.norm(goal.v)))
    if a_n > 1e-6:
        ahat = acc / a_n
        room = float((V @ ahat).max() - (V @ ahat).min()) - 2 * drone.r
        room = max(room, 0.05)
        tau_max = np.sqrt(8 * 0.5 * room / a_n)
        speed = max(speed, length / tau_max)
    speed = min(speed, 0.75 * limits.v_max)
    tau = length / speed
    c2, _ = P2.chebyshev()
    p_mid = c2 + (0.5 * (s_in + s_out) - c2 @ d) * d - acc * tau**2 / 16
    states = np.zeros((4, 4, 3))
    states[0] = start.as_array()
    states[3] = goal.as_array()
    states[1, 0] = p_mid - speed * d * tau / 2 + acc * tau**2 / 8
    states[1, 1] = speed * d - acc * tau / 2
    states[1, 2] = acc
    states[2, 0] = p_mid + speed * d * tau / 2 + acc * tau**2 / 8
    states[2, 1] = speed * d + acc * tau / 2
    states[2, 2] = acc

    def leg(p0, v0, p1, v1):
        avg = 0.5 * (np.linalg.norm(v0) + np.linalg.norm(v1))
        return max(np.linalg.norm(p1 - p0) / max(avg, 0.5), 1.0)

    T = np.array([
        leg(start.p, start.v, states[1, 0], states[1, 1]),
        tau,
        leg(states[2, 0], states[2, 1], goal.p, goal.v),
    ])
    return states, T


def optimize_trajectory(prob: OptProblem, debug_csv=None) -> OptResult:
    """Minimise smoothness + time + penalties, then verify with the independent checker."""
    if prob.delta_overlap is not None:
        prob.corridor.check_overlap(prob.delta_overlap)
    w = prob.weights
    states, T = initial_guess(prob)
    mu = w.penalty
    kappa = w.samples_per_piece
    x0 = None
    trace = []
    result = None
    for attempt in range(w.retries + 1):
        obj = _Objective(prob, mu, kappa)
        if x0 is None:
            x0 = obj.pack(states, T)
        hist = []

        def cb(xk):
            # L-BFGS-B reports the accepted iterate, which was the last evaluation
            if not np.array_equal(xk, obj.last_x):
                obj(xk)
            hist.append((len(hist), obj.last_f, obj.last_maxres))
            n = w.stall_window
            if n and len(hist) > n and obj.last_maxres <= 0:
                old = hist[-1 - n][1]
                if old - obj.last_f <= w.stall_rtol * abs(obj.last_f):
                    raise StopIteration

        bounds = [(None, None)] * (12 * (obj.M - 1)) + [(np.log(w.min_duration), np.log(w.max_duration))] * obj.M
        res = minimize(obj, x0, jac=True, method="L-BFGS-B", callback=cb, bounds=bounds,
                       options={"maxiter": w.max_iter, "gtol": w.gtol, "ftol": w.ftol, "maxcor": 20})
        trace.extend((attempt, it, val, mr) for it, val, mr in hist)
        traj = obj.trajectory(res.x)
        report = validate_trajectory(traj, prob.corridor, prob.drone, prob.mode, prob.limits)
        converged = bool(res.success)
        result = OptResult(traj, converged, report.passed, report, trace, attempt + 1)
        if report.passed:
            break
        x0 = res.x
        mu *= 10.0
        kappa *= 2
    if debug_csv is not None:
        with open(debug_csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["attempt", "iteration", "objective", "max_residual"])
            wr.writerows(trace)
    return result


# -- independent validation --------------------------------------------------------


def validate_trajectory(traj: PiecewiseTrajectory, corridor: Corridor, drone: DroneModel,
                        mode, limits: KinoLimits, dt=1e-3, tol=1e-6) -> ValidationReport:
    """Dense check of corridor membership and kinodynamic limits.

    Sample ``t`` belongs to piece ``i`` when ``T_{i-1} <= t <= T_i``; junction
    samples are checked against both neighbouring polyhedra. SE3 mode rebuilds
    the full attitude (tangent yaw + flatness) and evaluates the entry-wise
    ellipsoid form ``sqrt(((A R Q)^2) 1) + A p - b``.
    """
    if len(traj) != len(corridor):
        return ValidationReport(False, np.inf, None, None, None, np.zeros(3), False,
                                "piece count differs from corridor length")
    ts = traj.sample_times(dt)
    ts = np.unique(np.concatenate([ts, traj.breaks]))
    pos, vel, acc, jer = traj.eval_orders(ts)
    Rs = None
    if mode == SE3:
        psi = yaw_samples(traj, ts)
        try:
            Rs = rotations_from_flat(acc, psi)
        except SingularityError as exc:
            return ValidationReport(False, np.inf, None, None, None, np.zeros(3), False, str(exc))
    worst = -np.inf
    where = (None, None, None)
    for i, poly in enumerate(corridor):
        lo, hi = traj.breaks[i], traj.breaks[i + 1]
        sel = (ts >= lo - 1e-12) & (ts <= hi + 1e-12)
        P = pos[sel]
        lin = P @ poly.A.T - poly.b[None, :]
        if Rs is not None:
            ARQ = np.einsum("rk,nkl,l->nrl", poly.A, Rs[sel], np.diag(drone.Q))
            lin = np.sqrt((ARQ**2).sum(axis=2)) + lin
        k = np.unravel_index(np.argmax(lin), lin.shape)
        if lin[k] > worst:
            worst = float(lin[k])
            where = (float(ts[sel][k[0]]), int(k[1]), i)
    norms = np.array([
        np.linalg.norm(vel, axis=1).max(),
        np.linalg.norm(acc, axis=1).max(),
        np.linalg.norm(jer, axis=1).max(),
    ])
    kino_ok = bool(np.all(norms <= limits.as_array() + tol))
    geo_ok = worst <= tol
    msg = []
    if not geo_ok:
        msg.append(f"corridor residual {worst:.3g} at t={where[0]:.4f} (piece {where[2]}, row {where[1]})")
    if not kino_ok:
        msg.append(f"kinodynamic max norms {np.round(norms, 4).tolist()}")
    return ValidationReport(geo_ok and kino_ok, worst, where[0], where[1], where[2], norms,
                            kino_ok, "; ".join(msg))
