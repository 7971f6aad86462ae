"""Colliding-segment extraction and the dual-resolution A* race.

The grid search is a 26-connected A* with Euclidean step costs and the
Euclidean heuristic. Path costs are accumulated as integer step counts
``(n1, n2, n3)`` (axis, face-diagonal and body-diagonal moves) and converted
to ``res * (n1 + n2*sqrt2 + n3*sqrt3)`` with one fixed formula, so equal
paths always produce bit-identical costs regardless of visiting order.

All search state lives in flat arrays owned by :class:`AStarState`; the
numba kernel only advances it, which is what makes suspension and resumption
exact.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numba
import numpy as np

from .errors import ConfigError, InputError, PreconditionError, StateError
from .mapping import DualResMap, VoxelGrid
from .trajectory import PiecewiseTrajectory

R3 = "R3"
SE3_CANDIDATE = "SE3Candidate"
UNREACHABLE = "Unreachable"

FOUND = 0
EXHAUSTED = 1
UNREACH = 2
_HEAP_FULL = 3

_SQ2 = math.sqrt(2.0)
_SQ3 = math.sqrt(3.0)


def _neighbour_table():
    off = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1) if (a, b, c) != (0, 0, 0)]
    off = np.array(off, dtype=np.int64)
    return off, np.abs(off).sum(axis=1).astype(np.int64)


_OFF, _KIND = _neighbour_table()


@numba.njit(cache=True)
def _heap_push(hf, hh, hi, size, f, h, idx):
    k = size
    hf[k] = f
    hh[k] = h
    hi[k] = idx
    while k > 0:
        p = (k - 1) // 2
        if (hf[p], hh[p], hi[p]) <= (hf[k], hh[k], hi[k]):
            break
        hf[p], hf[k] = hf[k], hf[p]
        hh[p], hh[k] = hh[k], hh[p]
        hi[p], hi[k] = hi[k], hi[p]
        k = p
    return size + 1


@numba.njit(cache=True)
def _heap_pop(hf, hh, hi, size):
    idx = hi[0]
    size -= 1
    hf[0] = hf[size]
    hh[0] = hh[size]
    hi[0] = hi[size]
    k = 0
    while True:
        l = 2 * k + 1
        if l >= size:
            break
        m = l
        r = l + 1
        if r < size and (hf[r], hh[r], hi[r]) < (hf[l], hh[l], hi[l]):
            m = r
        if (hf[k], hh[k], hi[k]) <= (hf[m], hh[m], hi[m]):
            break
        hf[m], hf[k] = hf[k], hf[m]
        hh[m], hh[k] = hh[k], hh[m]
        hi[m], hi[k] = hi[k], hi[m]
        k = m
    return idx, size


@numba.njit(cache=True)
def _astar_kernel(occ, nx, ny, nz, res, goal, g, counts, parent, closed,
                  hf, hh, hi, meta, budget, off, kind):
    """Advance the search by at most ``budget`` expansions.

    ``meta = [heap size, expansions so far, found index]``. Returns a status
    code; ``_HEAP_FULL`` asks the caller to grow the heap and call again.
    """
    gx = goal // (ny * nz)
    gy = (goal // nz) % ny
    gz = goal % nz
    size = meta[0]
    done = 0
    while True:
        if size == 0:
            meta[0] = size
            return UNREACH
        if done >= budget:
            meta[0] = size
            return EXHAUSTED
        if size + 26 > hf.shape[0]:
            meta[0] = size
            return _HEAP_FULL
        cur, size = _heap_pop(hf, hh, hi, size)
        if closed[cur]:
            continue
        closed[cur] = True
        done += 1
        meta[1] += 1
        if cur == goal:
            meta[0] = size
            meta[2] = cur
            return FOUND
        cx = cur // (ny * nz)
        cy = (cur // nz) % ny
        cz = cur % nz
        c1 = counts[cur, 0]
        c2 = counts[cur, 1]
        c3 = counts[cur, 2]
        for k in range(26):
            x = cx + off[k, 0]
            y = cy + off[k, 1]
            z = cz + off[k, 2]
            if x < 0 or y < 0 or z < 0 or x >= nx or y >= ny or z >= nz:
                continue
            nb = (x * ny + y) * nz + z
            if occ[nb] or closed[nb]:
                continue
            n1 = c1
            n2 = c2
            n3 = c3
            if kind[k] == 1:
                n1 += 1
            elif kind[k] == 2:
                n2 += 1
            else:
                n3 += 1
            gn = res * (n1 + n2 * 1.4142135623730951 + n3 * 1.7320508075688772)
            if gn < g[nb]:
                g[nb] = gn
                counts[nb, 0] = n1
                counts[nb, 1] = n2
                counts[nb, 2] = n3
                parent[nb] = cur
                dx = x - gx
                dy = y - gy
                dz = z - gz
                h = res * math.sqrt(dx * dx + dy * dy + dz * dz)
                size = _heap_push(hf, hh, hi, size, gn + h, h, nb)


@dataclass
class GridPath:
    """Cell-center waypoints with the accumulated Euclidean step cost."""

    waypoints: np.ndarray
    cost: float
    cells: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return len(self.waypoints)

    def length(self):
        return float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["i", "x", "y", "z"])
            for i, (x, y, z) in enumerate(self.waypoints):
                wr.writerow([i, f"{x:.6f}", f"{y:.6f}", f"{z:.6f}"])


@dataclass(frozen=True)
class SearchOutcome:
    """Result of a budgeted search: ``status`` is FOUND, EXHAUSTED or UNREACH."""

    status: int
    path: Optional[GridPath] = None
    expansions: int = 0

    @property
    def found(self):
        return self.status == FOUND


class AStarState:
    """Resumable A* over one grid. Expansions only happen through :meth:`run`."""

    def __init__(self, grid: VoxelGrid, start, goal):
        self.grid = grid
        s_idx = grid.index(np.asarray(start, dtype=float))
        g_idx = grid.index(np.asarray(goal, dtype=float))
        for name, idx in (("start", s_idx), ("goal", g_idx)):
            if grid.cell_occupied(idx):
                raise PreconditionError(f"{name} cell {tuple(idx)} is occupied or out of bounds")
        nx, ny, nz = (int(v) for v in grid.dims)
        self.shape = (nx, ny, nz)
        n = nx * ny * nz
        self.occ = np.ascontiguousarray(grid.occ.ravel())
        self.start = int(np.ravel_multi_index(tuple(s_idx), self.shape))
        self.goal = int(np.ravel_multi_index(tuple(g_idx), self.shape))
        self.g = np.full(n, np.inf)
        self.counts = np.zeros((n, 3), dtype=np.int64)
        self.parent = np.full(n, -1, dtype=np.int64)
        self.closed = np.zeros(n, dtype=np.bool_)
        cap = 1024
        self.hf = np.empty(cap)
        self.hh = np.empty(cap)
        self.hi = np.empty(cap, dtype=np.int64)
        self.meta = np.zeros(3, dtype=np.int64)
        self.meta[2] = -1
        self.g[self.start] = 0.0
        h0 = self._h(self.start)
        self.hf[0], self.hh[0], self.hi[0] = h0, h0, self.start
        self.meta[0] = 1
        self.status = None

    def _h(self, idx):
        a = np.array(np.unravel_index(idx, self.shape))
        b = np.array(np.unravel_index(self.goal, self.shape))
        return self.grid.resolution * math.sqrt(float(((a - b) ** 2).sum()))

    @property
    def expansions(self):
        return int(self.meta[1])

    def run(self, budget) -> int:
        """Advance by at most ``budget`` expansions and return the status code."""
        if self.status in (FOUND, UNREACH):
            return self.status
        budget = int(budget)
        while True:
            st = _astar_kernel(self.occ, *self.shape, self.grid.resolution, self.goal, self.g,
                               self.counts, self.parent, self.closed, self.hf, self.hh, self.hi,
                               self.meta, budget, _OFF, _KIND)
            if st != _HEAP_FULL:
                break
            done_before = self.expansions
            self._grow()
            budget -= self.expansions - done_before
        self.status = st
        return st

    def _grow(self):
        size = int(self.meta[0])
        cap = 2 * len(self.hf)
        for name in ("hf", "hh", "hi"):
            old = getattr(self, name)
            new = np.empty(cap, dtype=old.dtype)
            new[:size] = old[:size]
            setattr(self, name, new)

    def path(self) -> GridPath:
        if self.status != FOUND:
            raise StateError("no path: search has not reached the goal")
        cells = [self.goal]
        while cells[-1] != self.start:
            cells.append(int(self.parent[cells[-1]]))
        cells = np.array(cells[::-1], dtype=np.int64)
        ijk = np.stack(np.unravel_index(cells, self.shape), axis=1)
        n1, n2, n3 = (int(v) for v in self.counts[self.goal])
        cost = self.grid.resolution * (n1 + n2 * _SQ2 + n3 * _SQ3)
        return GridPath(self.grid.center(ijk), cost, ijk)

    def outcome(self) -> SearchOutcome:
        path = self.path() if self.status == FOUND else None
        return SearchOutcome(self.status, path, self.expansions)


def path_cost_from_cells(cells, resolution):
    """Canonical cost of a 26-connected cell sequence (used by tests and oracles)."""
    cells = np.asarray(cells)
    if len(cells) < 2:
        return 0.0
    kind = np.abs(np.diff(cells, axis=0)).sum(axis=1)
    if np.any(np.abs(np.diff(cells, axis=0)).max(axis=1) > 1) or np.any(kind == 0):
        raise InputError("cells are not consecutive 26-neighbours")
    n1, n2, n3 = ((kind == k).sum() for k in (1, 2, 3))
    return resolution * (n1 + n2 * _SQ2 + n3 * _SQ3)


def astar_grid(grid: VoxelGrid, start, goal, budget=200_000) -> SearchOutcome:
    """Optimal 26-connected path from the cell containing ``start`` to that of ``goal``."""
    st = AStarState(grid, start, goal)
    st.run(budget)
    return st.outcome()


# -- dual-resolution race ---------------------------------------------------------


class LRSHandle:
    """Suspended low-resolution search; resumable exactly once."""

    def __init__(self, state: AStarState):
        self._state = state
        self.consumed = False

    @property
    def expansions(self):
        return self._state.expansions


def resume_lrs(handle: LRSHandle, extra_budget) -> SearchOutcome:
    """Continue the suspended LRS with its open and closed sets intact."""
    if handle.consumed:
        raise StateError("LRS handle already consumed")
    handle.consumed = True
    handle._state.run(extra_budget)
    return handle._state.outcome()


@dataclass
class CollidingSegment:
    s: np.ndarray
    e: np.ndarray
    t_entry: float
    t_exit: float


@dataclass
class MRResult:
    cls: str
    path: Optional[GridPath]
    lrs_handle: Optional[LRSHandle] = None
    lrs_expansions: int = 0
    hrs_expansions: int = 0


def mr_search(seg: CollidingSegment, dmap: DualResMap, ratio=1, budget=200_000, chunk=256) -> MRResult:
    """Interleave an LRM search and an HRM search; the first to finish decides.

    Round ``k`` gives the LRS ``ratio`` expansions and the HRS one. The
    searches are advanced in chunks of rounds for speed, but the winner is
    decided on exact round numbers, so the answer equals strict round-by-round
    interleaving. The LRS wins ties.
    """
    if budget <= 0:
        raise ConfigError("search budget must be positive")
    if ratio < 1:
        raise ConfigError("ratio must be >= 1")
    lrs = AStarState(dmap.lrm, seg.s, seg.e)
    hrs = AStarState(dmap.hrm, seg.s, seg.e)
    rounds_cap = budget // (ratio + 1)
    l_round = h_round = None  # round in which each search finished (found)
    l_dead = h_dead = False
    rounds = 0
    while rounds < rounds_cap:
        step = min(chunk, rounds_cap - rounds)
        if not l_dead and l_round is None:
            before = lrs.expansions
            st = lrs.run(step * ratio)
            if st == FOUND:
                # the goal pop is the expansion that finished it
                l_round = rounds + (lrs.expansions - before + ratio - 1) // ratio
            elif st == UNREACH:
                l_dead = True
        if not h_dead and h_round is None:
            before = hrs.expansions
            st = hrs.run(step)
            if st == FOUND:
                h_round = rounds + hrs.expansions - before
            elif st == UNREACH:
                h_dead = True
        rounds += step
        if l_round is not None and (h_round is None or l_round <= h_round):
            return MRResult(R3, lrs.path(), None, lrs.expansions, hrs.expansions)
        if h_round is not None and (l_round is None or h_round < l_round):
            if l_round is not None:
                # the LRS overshot its suspension point inside the chunk; replay it
                lrs = AStarState(dmap.lrm, seg.s, seg.e)
                lrs.run(h_round * ratio)
            elif not l_dead:
                lrs = _replay(dmap.lrm, seg, h_round * ratio)
            return MRResult(SE3_CANDIDATE, hrs.path(), LRSHandle(lrs), lrs.expansions, hrs.expansions)
        if l_dead and h_dead:
            break
    return MRResult(UNREACHABLE, None, None, lrs.expansions, hrs.expansions)


def _replay(grid, seg, expansions):
    """Fresh LRS advanced by exactly ``expansions`` (the state at HRS completion)."""
    st = AStarState(grid, seg.s, seg.e)
    if expansions > 0:
        st.run(expansions)
    return st


# -- colliding segments -----------------------------------------------------------


def extract_colliding_segments(traj: PiecewiseTrajectory, lrm: VoxelGrid, dt=5e-3,
                               margin_cells=2) -> List[CollidingSegment]:
    """Bracket every LRM-colliding stretch of ``traj`` with free endpoints.

    Runs closer than ``2 * margin_cells`` cells of arclength are merged, then
    each side is extended by ``margin_cells`` cells of arclength.
    """
    if not dt > 0:
        raise ConfigError("dt must be positive")
    ts = traj.sample_times(dt)
    pos = traj.eval(ts, 0)
    occ = lrm.occupied_at(pos)
    if occ[0] or occ[-1]:
        raise InputError("global start or goal lies in occupied LRM space")
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos, axis=0), axis=1))])
    edges = np.diff(occ.astype(np.int8))
    starts = list(np.nonzero(edges == 1)[0] + 1)
    ends = list(np.nonzero(edges == -1)[0])
    runs = []
    ext = margin_cells * lrm.resolution
    for a, b in zip(starts, ends):
        if runs and arc[a] - arc[runs[-1][1]] < 2 * ext:
            runs[-1][1] = b
        else:
            runs.append([a, b])
    segs = []
    for a, b in runs:
        # first free samples outside the run, then margin of arclength
        i = int(np.searchsorted(arc, arc[a - 1] - ext, side="right")) - 1
        i = max(i, 0)
        j = int(np.searchsorted(arc, arc[b + 1] + ext, side="left"))
        j = min(j, len(ts) - 1)
        while occ[i] and i < a - 1:
            i += 1
        while occ[j] and j > b + 1:
            j -= 1
        segs.append(CollidingSegment(pos[i].copy(), pos[j].copy(), float(ts[i]), float(ts[j])))
    return segs
