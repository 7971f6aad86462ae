"""Convex safe-flight corridors grown from seeds, and the narrow-gap line seed.

Obstacles are axis-aligned cubes of half-size ``margin`` around obstacle
points. With the default ``margin = resolution / 2`` and the occupied cell
centers as points, the cubes are exactly the occupied cells. Passing raw
cloud points with ``margin = 0`` cuts the polyhedron against the measured
surface itself, which is what the narrow-gap corridor uses.

Growth has two stages. An axis-aligned box is first grown face by face in
round-robin steps until each face touches an obstacle or the cap. Then, for
as long as some obstacle still pokes into the polyhedron, the one nearest to
the box contributes the plane through its closest point, orthogonal to the
box-obstacle closest-point direction. That plane supports both sets, so the
box is kept and the obstacle is cut away.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .errors import CorridorError, PreconditionError, SeedError
from .mapping import VoxelGrid, nearest_occupied_within, segment_first_collision
from .polyhedron import Corridor, Polyhedron
from .search import GridPath

_EPS = 1e-9


@dataclass(frozen=True)
class LineSeed:
    d: np.ndarray
    p: np.ndarray
    length: float

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        n = np.linalg.norm(d)
        if n <= 0 or not self.length > 0:
            raise PreconditionError("line seed needs a nonzero direction and positive length")
        object.__setattr__(self, "d", d / n)
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))

    @property
    def endpoints(self):
        half = 0.5 * self.length * self.d
        return self.p - half, self.p + half


def _obstacles_in(grid: VoxelGrid, lo, hi, points=None, pad=0.0):
    """Obstacle points whose cubes can touch the box [lo, hi]."""
    if points is None:
        a = np.maximum(grid.index(lo - pad) - 1, 0)
        b = np.minimum(grid.index(hi + pad) + 2, grid.dims)
        if np.any(b <= a):
            return np.zeros((0, 3))
        sub = grid.occ[a[0]:b[0], a[1]:b[1], a[2]:b[2]]
        return grid.center(np.argwhere(sub) + a)
    pts = np.asarray(points, dtype=float)
    keep = np.all((pts >= lo - pad) & (pts <= hi + pad), axis=1)
    return pts[keep]


def _grow_box(lo, hi, cap_lo, cap_hi, obs, m, step):
    """Round-robin face growth of [lo, hi] inside the cap, blocked by obstacle cubes."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    obs = np.ascontiguousarray(obs, dtype=float).reshape(-1, 3)
    _grow_box_kernel(lo, hi, np.asarray(cap_lo, float), np.asarray(cap_hi, float),
                     obs - m, obs + m, float(step), _EPS)
    return lo, hi


@njit(cache=True)
def _grow_box_kernel(lo, hi, cap_lo, cap_hi, olo, ohi, step, eps):
    active = np.ones(6, dtype=np.bool_)
    n = olo.shape[0]
    while active.any():
        for f in range(6):
            if not active[f]:
                continue
            ax = f % 3
            a1 = (ax + 1) % 3
            a2 = (ax + 2) % 3
            if f < 3:
                limit = cap_hi[ax]
                for i in range(n):
                    # cubes overlapping the box interior in the two other axes, ahead of the face
                    if (olo[i, a1] < hi[a1] - eps and ohi[i, a1] > lo[a1] + eps
                            and olo[i, a2] < hi[a2] - eps and ohi[i, a2] > lo[a2] + eps
                            and olo[i, ax] >= hi[ax] - eps and olo[i, ax] < limit):
                        limit = olo[i, ax]
                new = min(hi[ax] + step, limit)
                if new <= hi[ax] + eps:
                    active[f] = False
                hi[ax] = max(hi[ax], new)
            else:
                limit = cap_lo[ax]
                for i in range(n):
                    if (olo[i, a1] < hi[a1] - eps and ohi[i, a1] > lo[a1] + eps
                            and olo[i, a2] < hi[a2] - eps and ohi[i, a2] > lo[a2] + eps
                            and ohi[i, ax] <= lo[ax] + eps and ohi[i, ax] > limit):
                        limit = ohi[i, ax]
                new = max(lo[ax] - step, limit)
                if new >= lo[ax] - eps:
                    active[f] = False
                lo[ax] = min(lo[ax], new)


def _cut_planes(lo, hi, A, b, obs, m):
    """Add separating planes until no obstacle cube enters the polyhedron."""
    A = list(A)
    b = list(b)
    if len(obs) == 0:
        return np.array(A), np.array(b)
    Am = np.array(A)
    bm = np.array(b)
    # a cube is out once its nearest corner is on the far side of one row
    alive = np.all(obs @ Am.T - m * np.abs(Am).sum(axis=1) < bm - _EPS, axis=1)
    clo = obs - m
    chi = obs + m
    while alive.any():
        idx = np.nonzero(alive)[0]
        gap = np.maximum(np.maximum(clo[idx] - hi, lo - chi[idx]), 0.0)
        dist = np.linalg.norm(gap, axis=1)
        k = idx[int(np.argmin(dist))]
        # closest points between box and cube
        pb = np.clip(obs[k], lo, hi)
        pc = np.clip(pb, clo[k], chi[k])
        pb = np.clip(pc, lo, hi)
        d = pc - pb
        nd = np.linalg.norm(d)
        if nd > 1e-12:
            n = d / nd
        else:
            # touching: separate along the axis where the cube sits against a face
            sep = np.maximum(clo[k] - hi, lo - chi[k])
            ax = int(np.argmax(sep))
            n = np.zeros(3)
            n[ax] = 1.0 if clo[k, ax] >= hi[ax] - 1e-9 else -1.0
        off = float(n @ pc)
        A.append(n)
        b.append(off)
        out = obs[idx] @ n - m * np.abs(n).sum() >= off - _EPS
        alive[idx[out]] = False
        alive[k] = False
    return np.array(A), np.array(b)


def inflate_polyhedron(seed, grid: VoxelGrid, max_box, points=None, margin=None, step=None) -> Polyhedron:
    """Obstacle-free convex polyhedron around a point or segment seed.

    ``seed`` is a point ``(3,)``, a segment ``(2, 3)`` or a point set
    ``(n, 3)``; growth starts from its bounding box, which must be free. The
    cap box is that bounding box padded by ``max_box`` and clipped to the
    grid bounds.
    """
    seed = np.atleast_2d(np.asarray(seed, dtype=float))
    if seed.ndim != 2 or seed.shape[1] != 3:
        raise PreconditionError("seed must be a point, a segment or a point set")
    if np.any(grid.occupied_at(seed)) or (
            len(seed) == 2 and segment_first_collision(grid, seed[0], seed[1]) is not None):
        raise PreconditionError("seed is not in free space")
    m = grid.resolution / 2 if margin is None else float(margin)
    step = grid.resolution if step is None else step
    lo = seed.min(axis=0)
    hi = seed.max(axis=0)
    cap_lo = np.maximum(lo - max_box, grid.origin)
    cap_hi = np.minimum(hi + max_box, grid.upper)
    obs = _obstacles_in(grid, cap_lo, cap_hi, points, pad=m + grid.resolution)
    inside = np.all((obs - m < hi - _EPS) & (obs + m > lo + _EPS), axis=1)
    if inside.any():
        raise PreconditionError("seed box touches an obstacle")
    blo, bhi = _grow_box(lo, hi, cap_lo, cap_hi, obs, m, step)
    box = Polyhedron.from_box(cap_lo, cap_hi)
    A, b = _cut_planes(blo, bhi, box.A, box.b, obs, m)
    return Polyhedron(A, b)


# -- narrow gaps -------------------------------------------------------------------


def _occupied_sorted(grid: VoxelGrid, q, d_max):
    """Occupied cell centers within ``d_max`` of ``q``, nearest first."""
    lo = np.maximum(grid.index(q - d_max), 0)
    hi = np.minimum(grid.index(q + d_max) + 1, grid.dims)
    if np.any(hi <= lo):
        return np.zeros((0, 3))
    idx = np.argwhere(grid.occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]) + lo
    centers = grid.center(idx)
    dist = np.linalg.norm(centers - q, axis=1)
    keep = dist <= d_max
    order = np.argsort(dist[keep], kind="stable")
    return centers[keep][order]


def _opposing_pair(grid: VoxelGrid, q, d_c, max_tries=6):
    """Nearest obstacle and the first one hit marching the opposite way.

    The nearest cell is tried first. When nothing lies opposite it (a
    waypoint close to the end of a slot, say), further cells in clearly
    different directions are tried.
    """
    q = np.asarray(q, dtype=float)
    tried = []
    for oa in _occupied_sorted(grid, q, d_c):
        u = q - oa
        nu = np.linalg.norm(u)
        if nu < 1e-12:
            continue
        u = u / nu
        if any(u @ w > 0.9 for w in tried):
            continue
        tried.append(u)
        hit = segment_first_collision(grid, q, q + d_c * u)
        if hit is not None:
            # nudge into the hit cell to read its index robustly
            ob = grid.center(grid.index(hit + 1e-9 * u))
            if np.linalg.norm(ob - q) <= d_c:
                return oa, ob
        if len(tried) >= max_tries:
            break
    return None


def generate_line_seed(path: GridPath, hrm_raw: VoxelGrid, r) -> Optional[LineSeed]:
    """Line seed through a narrow gap from a high-resolution path.

    For every waypoint, the nearest occupied cell within ``2 r`` and the first
    occupied cell hit by marching away from it form an opposing pair (with a
    few fallback directions, see :func:`_opposing_pair`); the
    seed runs through the centroid of all pairs along the average heading of
    the paired waypoints.
    """
    if len(path.waypoints) == 0:
        raise PreconditionError("empty path")
    d_c = 2.0 * r
    O, N = [], []
    for q in path.waypoints:
        pair = _opposing_pair(hrm_raw, q, d_c)
        if pair is not None:
            O.extend(pair)
            N.append(q)
    if not N:
        return None
    N = np.array(N)
    O = np.array(O)
    steps = np.diff(N, axis=0)
    lens = np.linalg.norm(steps, axis=1)
    ok = lens > 1e-12
    mean = (steps[ok] / lens[ok, None]).mean(axis=0) if ok.any() else np.zeros(3)
    if np.linalg.norm(mean) < 1e-6:
        mean = N[-1] - N[0]
        if np.linalg.norm(mean) < 1e-6:
            mean = path.waypoints[-1] - path.waypoints[0]
        if np.linalg.norm(mean) < 1e-6:
            return None
    d = mean / np.linalg.norm(mean)
    p = O.mean(axis=0)
    proj = (N - p) @ d
    length = max(float(proj.max() - proj.min()), 2 * hrm_raw.resolution)
    return LineSeed(d, p, length)


def _push_endpoint(p, direction, hrm_raw, free_check, max_push, step, standoff=0.0):
    """Move ``p`` along ``direction`` until ``free_check`` accepts it.

    After the first free point, keep going for up to ``standoff`` metres while
    the check still passes, which leaves room to line up with the gap.
    """
    for k in range(int(np.ceil(max_push / step)) + 1):
        q = p + k * step * direction
        if free_check(q):
            for _ in range(int(round(standoff / step))):
                nxt = q + step * direction
                if not free_check(nxt):
                    break
                q = nxt
            return q
    raise SeedError(f"no free seed endpoint within {max_push} m of {np.round(p, 3).tolist()}")


def narrow_gap_corridor(seed: LineSeed, hrm_raw: VoxelGrid, max_box=1.0, points=None,
                        clearance=None, lrm: Optional[VoxelGrid] = None, max_push=None,
                        delta=None, standoff=0.0) -> tuple:
    """Three polyhedra ``[P1, P2, P3]``: before the gap, through it, after it.

    The seed endpoints are pushed outward along the seed until they are free
    in ``hrm_raw`` with ``clearance`` to the nearest occupied cell and, when
    ``lrm`` is given, free in the LRM too (so low-resolution pieces can join
    there). ``standoff`` extends the push past the first free point where the
    space allows. Returns ``(corridor, start_point, end_point)``.
    """
    res = hrm_raw.resolution
    margin = 0.0 if points is not None else None
    clearance = res if clearance is None else clearance
    max_push = 1.0 if max_push is None else max_push

    # a tiny cube around q must be free, so rounding cannot flip the cell
    jitter = 1e-6 * np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1], indexing="ij")).reshape(3, -1).T

    def free(q):
        probe = q + jitter
        if np.any(hrm_raw.occupied_at(probe)):
            return False
        if lrm is not None and np.any(lrm.occupied_at(probe)):
            return False
        return clearance <= 0 or nearest_occupied_within(hrm_raw, q, clearance) is None

    a, b = seed.endpoints
    a = _push_endpoint(a, -seed.d, hrm_raw, free, max_push, res / 2, standoff)
    b = _push_endpoint(b, seed.d, hrm_raw, free, max_push, res / 2, standoff)
    mid = np.array([seed.p - 0.5 * seed.length * seed.d, seed.p + 0.5 * seed.length * seed.d])
    try:
        P2 = inflate_polyhedron(mid, hrm_raw, max_box, points, margin)
        P1 = inflate_polyhedron(a, hrm_raw, max_box, points, margin)
        P3 = inflate_polyhedron(b, hrm_raw, max_box, points, margin)
    except PreconditionError as exc:
        raise SeedError(str(exc)) from exc
    cor = Corridor([P1, P2, P3])
    if delta is not None:
        cor.check_overlap(delta)
    return cor, a, b


# -- corridors along paths ---------------------------------------------------------


def _seed_box_free(grid, seg, points, margin):
    lo = seg.min(axis=0)
    hi = seg.max(axis=0)
    m = grid.resolution / 2 if margin is None else margin
    obs = _obstacles_in(grid, lo, hi, points, pad=m + grid.resolution)
    return not np.any(np.all((obs - m < hi - _EPS) & (obs + m > lo + _EPS), axis=1))


def sfc_along_path(path: GridPath, grid: VoxelGrid, max_box=1.5, delta=None,
                   points=None, margin=None) -> Corridor:
    """Greedy corridor cover of a grid path.

    Each polyhedron is grown from the path step where the previous one stops
    containing the waypoints with ``delta`` to spare, so neighbours overlap
    in a ball of radius ``delta`` around that waypoint. When the step's
    bounding box clips an obstacle corner, the next waypoint alone is used.
    """
    Q = np.asarray(path.waypoints, dtype=float)
    delta = grid.resolution / 2 if delta is None else delta
    n = len(Q)
    polys = []
    k = 0
    seed = Q[0]
    while True:
        P = inflate_polyhedron(seed, grid, max_box, points, margin)
        polys.append(P)
        res = P.residuals(Q[k:]).max(axis=1)
        if np.all(res <= 1e-9):
            break
        j = k
        while j + 1 < n and res[j + 1 - k] <= -delta + 1e-9:
            j += 1
        if j == k and len(polys) > 1:
            raise CorridorError(f"corridor cover made no progress at waypoint {k}")
        k = j
        seg = Q[k:k + 2]
        seed = seg if _seed_box_free(grid, seg, points, margin) else Q[k + 1]
    return Corridor(polys)
