"""Voxel occupancy grids, dual-resolution maps and collision queries."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import ConfigError, DomainError, InputError


@dataclass(frozen=True)
class DroneModel:
    """Body ellipsoid ``Q = diag(r, r, h)``: radius ``r`` and half-height ``h``."""

    r: float = 0.3
    h: float = 0.1

    def __post_init__(self):
        if not (0 < self.h < self.r):
            raise DomainError("drone model needs 0 < h < r")

    @property
    def Q(self):
        return np.diag([self.r, self.r, self.h])


class PointCloud:
    """An immutable (n, 3) array of finite world points."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InputError("point cloud contains non-finite coordinates")
        pts = pts.copy()
        pts.setflags(write=False)
        self.points = pts

    def __len__(self):
        return len(self.points)

    def merge(self, other: "PointCloud") -> "PointCloud":
        """Union of two clouds with exact duplicates removed (order-stable)."""
        pts = np.concatenate([self.points, other.points])
        _, keep = np.unique(pts, axis=0, return_index=True)
        return PointCloud(pts[np.sort(keep)])


class VoxelGrid:
    """Dense boolean occupancy over an axis-aligned box of cubic cells.

    Points outside the box are reported occupied unless ``oob_occupied`` is off.
    """

    def __init__(self, origin, resolution, occupancy, oob_occupied=True):
        if not resolution > 0:
            raise DomainError("resolution must be positive")
        occ = np.asarray(occupancy, dtype=bool).copy()
        if occ.ndim != 3 or min(occ.shape) < 1:
            raise DomainError("occupancy must be a non-empty 3D array")
        occ.setflags(write=False)
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.resolution = float(resolution)
        self.occ = occ
        self.dims = np.array(occ.shape)
        self.oob_occupied = oob_occupied

    @property
    def upper(self):
        return self.origin + self.dims * self.resolution

    @property
    def n_occupied(self):
        return int(self.occ.sum())

    def index(self, points):
        pts = np.asarray(points, dtype=float)
        return np.floor((pts - self.origin) / self.resolution).astype(np.int64)

    def in_bounds(self, idx):
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < self.dims), axis=-1)

    def center(self, idx):
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution

    def occupied_at(self, points):
        """Vectorised occupancy for (n, 3) points (out of bounds per policy)."""
        pts = np.atleast_2d(points)
        idx = self.index(pts)
        ok = self.in_bounds(idx)
        out = np.full(len(pts), self.oob_occupied)
        i = idx[ok]
        out[ok] = self.occ[i[:, 0], i[:, 1], i[:, 2]]
        return out

    def cell_occupied(self, idx):
        idx = tuple(int(v) for v in idx)
        if not self.in_bounds(idx):
            return self.oob_occupied
        return bool(self.occ[idx])

    def occupied_centers(self):
        return self.center(np.argwhere(self.occ))

    def with_occupancy(self, occ):
        return VoxelGrid(self.origin, self.resolution, occ, self.oob_occupied)


def build_voxel_grid(cloud: PointCloud, resolution, bounds, oob_occupied=True) -> VoxelGrid:
    """Grid over ``bounds = (lo, hi)``; a cell is occupied iff a cloud point falls in it."""
    if not resolution > 0:
        raise DomainError("resolution must be positive")
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    if np.any(hi <= lo):
        raise DomainError("bounds must be non-empty")
    pts = cloud.points if isinstance(cloud, PointCloud) else PointCloud(cloud).points
    dims = np.maximum(np.ceil((hi - lo) / resolution - 1e-9).astype(int), 1)
    occ = np.zeros(dims, dtype=bool)
    grid = VoxelGrid(lo, resolution, occ, oob_occupied)
    if len(pts):
        idx = grid.index(pts)
        idx = idx[grid.in_bounds(idx)]
        occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return VoxelGrid(lo, resolution, occ, oob_occupied)


def inflation_offsets(resolution, radius):
    """Integer cell offsets whose center distance is within radius + half cell diagonal."""
    reach = radius + 0.5 * math.sqrt(3.0) * resolution
    n = int(math.floor(reach / resolution))
    rng = np.arange(-n, n + 1)
    d = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1)
    keep = np.linalg.norm(d * resolution, axis=-1) <= reach + 1e-9
    return d, keep


def inflate_grid(grid: VoxelGrid, radius, include_border=False) -> VoxelGrid:
    """Dilate occupancy: a cell becomes occupied if an occupied cell center lies
    within ``radius + half-diagonal`` of its own center.

    ``include_border`` additionally treats the out-of-bounds shell as occupied.
    """
    if radius < 0:
        raise DomainError("radius must be non-negative")
    _, keep = inflation_offsets(grid.resolution, radius)
    if keep.size == 1:
        return grid
    occ = ndimage.binary_dilation(grid.occ, structure=keep,
                                  border_value=1 if include_border else 0)
    return grid.with_occupancy(occ | grid.occ)


def query_occupied(grid: VoxelGrid, point) -> bool:
    return bool(grid.occupied_at(np.asarray(point, dtype=float)[None])[0])


def segment_first_collision(grid: VoxelGrid, p0, p1) -> Optional[np.ndarray]:
    """Earliest point on p0->p1 inside an occupied (or out-of-bounds) cell.

    Cell-exact 3D DDA traversal; returns the entry point of the first occupied
    cell, ``p0`` itself if it starts occupied, or None when the segment is free.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    if not (np.all(np.isfinite(p0)) and np.all(np.isfinite(p1))):
        raise InputError("segment endpoints must be finite")
    d = p1 - p0
    res = grid.resolution
    cell = grid.index(p0)
    if grid.cell_occupied(cell):
        return p0.copy()
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = np.where(d != 0, 1.0 / d, np.inf)
        next_bound = grid.origin + (cell + (step > 0)) * res
        t_max = np.where(d != 0, (next_bound - p0) * inv, np.inf)
        t_delta = np.where(d != 0, res * np.abs(inv), np.inf)
    end = grid.index(p1)
    n_steps = int(np.abs(end - cell).sum())
    t = _dda_walk(grid.occ, bool(grid.oob_occupied), cell, step, t_max, t_delta, n_steps + 3)
    return None if t < 0.0 else p0 + t * d


@njit(cache=True)
def _dda_walk(occ, oob, cell, step, t_max, t_delta, max_iter):
    # returns the entry parameter of the first blocked cell, or -1 if none
    nx, ny, nz = occ.shape
    for _ in range(max_iter):
        axis = 0
        for k in (1, 2):
            if t_max[k] < t_max[axis]:
                axis = k
        t = t_max[axis]
        if t > 1.0:
            return -1.0
        cell[axis] += step[axis]
        t_max[axis] += t_delta[axis]
        i, j, k = cell[0], cell[1], cell[2]
        if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz:
            if oob:
                return t
        elif occ[i, j, k]:
            return t
    return -1.0


def nearest_occupied_within(grid: VoxelGrid, p, d_max):
    """Center of the occupied cell nearest to ``p`` if within ``d_max``.

    Ties are broken by lexicographic cell index.
    """
    if not d_max > 0:
        raise DomainError("d_max must be positive")
    p = np.asarray(p, dtype=float)
    lo = np.maximum(grid.index(p - d_max), 0)
    hi = np.minimum(grid.index(p + d_max) + 1, grid.dims)
    if np.any(hi <= lo):
        return None
    sub = grid.occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    idx = np.argwhere(sub) + lo
    if len(idx) == 0:
        return None
    centers = grid.center(idx)
    dist = np.linalg.norm(centers - p, axis=1)
    best = dist.min()
    if best > d_max:
        return None
    # argwhere is lexicographic, so the first minimum wins ties
    k = int(np.nonzero(dist == best)[0][0])
    return centers[k]


@dataclass(frozen=True)
class DualResMap:
    """Low/high resolution configuration-space grids plus the raw high-resolution grid."""

    lrm: VoxelGrid
    hrm: VoxelGrid
    hrm_raw: VoxelGrid
    drone: DroneModel
    cloud: Optional[PointCloud] = None


def build_dual_map(cloud: PointCloud, drone: DroneModel, bounds,
                   lrm_inflation_cells=1, hrm_inflation_cells=0) -> DualResMap:
    """LRM at cell size r and HRM at cell size h, both anchored at ``bounds[0]``.

    The LRM is dilated by ``lrm_inflation_cells`` of its own cells (with the
    map border treated as an obstacle); the HRM by ``hrm_inflation_cells``.
    """
    lrm_raw = build_voxel_grid(cloud, drone.r, bounds)
    hrm_raw = build_voxel_grid(cloud, drone.h, bounds)
    lrm = inflate_grid(lrm_raw, lrm_inflation_cells * drone.r, include_border=True)
    hrm = inflate_grid(hrm_raw, hrm_inflation_cells * drone.h, include_border=hrm_inflation_cells > 0)
    return DualResMap(lrm, hrm, hrm_raw, drone, cloud)


def sensor_reveal(world: PointCloud, pose, radius) -> PointCloud:
    """All world points within ``radius`` of ``pose`` (omnidirectional sensor)."""
    if not radius > 0:
        raise DomainError("radius must be positive")
    d2 = ((world.points - np.asarray(pose, dtype=float)) ** 2).sum(axis=1)
    return PointCloud(world.points[d2 <= radius * radius])


# -- synthetic mazes ----------------------------------------------------------------


@dataclass
class MazeConfig:
    """Walls perpendicular to x, each pierced by one rectangular gap.

    Wall ``k`` occupies ``x in [x_k, x_k + wall_thickness]`` with
    ``x_k = room_lo.x + lead + k * wall_spacing``; the room ends ``lead``
    after the last wall. Each gap is "narrow" with probability
    ``narrow_fraction`` (size from ``narrow_width``/``narrow_height``) and
    "wide" otherwise. ``gap_margin`` keeps gaps away from the room edges.
    """

    n_walls: int = 3
    room_y: tuple = (-2.5, 2.5)
    room_z: tuple = (0.0, 2.5)
    room_x0: float = 0.0
    lead: float = 2.0
    wall_thickness: float = 0.1
    wall_spacing: float = 2.5
    narrow_width: tuple = (0.24, 0.30)
    narrow_height: tuple = (0.8, 1.4)
    wide_width: tuple = (1.3, 1.8)
    wide_height: tuple = (1.3, 1.8)
    narrow_fraction: float = 0.5
    gap_margin: float = 0.3
    point_spacing: float = 0.05

    def __post_init__(self):
        self.room_y = tuple(float(v) for v in self.room_y)
        self.room_z = tuple(float(v) for v in self.room_z)
        for name in ("narrow_width", "narrow_height", "wide_width", "wide_height"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi")
            setattr(self, name, (lo, hi))

    @property
    def bounds(self):
        """Room box ``(lo, hi)``."""
        length = 2 * self.lead + (self.n_walls - 1) * self.wall_spacing + self.wall_thickness
        lo = np.array([self.room_x0, self.room_y[0], self.room_z[0]])
        hi = np.array([self.room_x0 + length, self.room_y[1], self.room_z[1]])
        return lo, hi

    def wall_x(self, k):
        return self.room_x0 + self.lead + k * self.wall_spacing

    def validate(self, drone: Optional[DroneModel] = None):
        if not 1 <= self.n_walls <= 10:
            raise ConfigError("n_walls must be in 1..10")
        if self.wall_thickness <= 0 or self.wall_spacing <= self.wall_thickness:
            raise ConfigError("need 0 < wall_thickness < wall_spacing")
        if not 0 <= self.narrow_fraction <= 1:
            raise ConfigError("narrow_fraction must lie in [0, 1]")
        spacing_cap = (drone.h if drone else DroneModel().h) / 2
        if not 0 < self.point_spacing <= spacing_cap + 1e-12:
            raise ConfigError(f"point_spacing must be in (0, {spacing_cap}]")
        wy = self.room_y[1] - self.room_y[0] - 2 * self.gap_margin
        wz = self.room_z[1] - self.room_z[0] - 2 * self.gap_margin
        if max(self.narrow_width[1], self.wide_width[1]) > wy or \
                max(self.narrow_height[1], self.wide_height[1]) > wz:
            raise ConfigError("gap larger than the wall")

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown maze keys: {sorted(extra)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad maze config: {exc}") from exc


@dataclass(frozen=True)
class Gap:
    """Rectangular opening in wall ``wall`` spanning ``[y0, y1] x [z0, z1]``."""

    wall: int
    x0: float
    x1: float
    y0: float
    y1: float
    z0: float
    z1: float
    narrow: bool

    @property
    def center(self):
        return np.array([(self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2, (self.z0 + self.z1) / 2])

    @property
    def width(self):
        return self.y1 - self.y0

    @property
    def height(self):
        return self.z1 - self.z0


def maze_gaps(cfg: MazeConfig, seed) -> list:
    """The seeded gap layout used by :func:`generate_maze`."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    gaps = []
    for k in range(cfg.n_walls):
        narrow = bool(rng.random() < cfg.narrow_fraction)
        wr, hr = (cfg.narrow_width, cfg.narrow_height) if narrow else (cfg.wide_width, cfg.wide_height)
        w = rng.uniform(*wr)
        hgt = rng.uniform(*hr)
        yc = rng.uniform(cfg.room_y[0] + cfg.gap_margin + w / 2, cfg.room_y[1] - cfg.gap_margin - w / 2)
        zc = rng.uniform(cfg.room_z[0] + cfg.gap_margin + hgt / 2, cfg.room_z[1] - cfg.gap_margin - hgt / 2)
        x0 = cfg.wall_x(k)
        gaps.append(Gap(k, x0, x0 + cfg.wall_thickness, yc - w / 2, yc + w / 2,
                        zc - hgt / 2, zc + hgt / 2, narrow))
    return gaps


def _axis_samples(lo, hi, step, extra=()):
    n = max(int(math.ceil((hi - lo) / step - 1e-9)), 1)
    vals = np.linspace(lo, hi, n + 1)
    return np.unique(np.concatenate([vals, [v for v in extra if lo <= v <= hi]]))


def wall_points(cfg: MazeConfig, gap: Gap):
    """Lattice samples of one wall slab with the open gap rectangle removed.

    Gap edges are inserted into the lattice so the sampled gap is exactly
    the drawn rectangle.
    """
    s = cfg.point_spacing
    xs = _axis_samples(gap.x0, gap.x1, s)
    ys = _axis_samples(cfg.room_y[0], cfg.room_y[1], s, (gap.y0, gap.y1))
    zs = _axis_samples(cfg.room_z[0], cfg.room_z[1], s, (gap.z0, gap.z1))
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    inside = (Y > gap.y0) & (Y < gap.y1) & (Z > gap.z0) & (Z < gap.z1)
    return np.stack([X[~inside], Y[~inside], Z[~inside]], axis=1)


def generate_maze(cfg: MazeConfig, seed) -> PointCloud:
    """Point cloud of ``cfg.n_walls`` walls with one seeded gap each."""
    gaps = maze_gaps(cfg, seed)
    return PointCloud(np.concatenate([wall_points(cfg, g) for g in gaps]))


def single_gap_world(width, height, center_yz=(0.0, 1.25), cfg: Optional[MazeConfig] = None):
    """One full-room wall with a ``width`` x ``height`` gap at ``center_yz``.

    The wall spans the whole room cross-section, so with out-of-bounds cells
    occupied there is no way around it. Returns ``(cloud, bounds, gap)``.
    """
    cfg = MazeConfig(n_walls=1) if cfg is None else replace(cfg, n_walls=1)
    yc, zc = (float(v) for v in center_yz)
    x0 = cfg.wall_x(0)
    gap = Gap(0, x0, x0 + cfg.wall_thickness, yc - width / 2, yc + width / 2,
              zc - height / 2, zc + height / 2, width < 2 * DroneModel().r)
    if gap.y0 <= cfg.room_y[0] or gap.y1 >= cfg.room_y[1] or gap.z0 <= cfg.room_z[0] or gap.z1 >= cfg.room_z[1]:
        raise ConfigError("gap larger than the wall")
    return PointCloud(wall_points(cfg, gap)), cfg.bounds, gap


# -- ASCII PLY ---------------------------------------------------------------------


def write_ply(cloud: PointCloud, path):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for x, y, z in cloud.points:
            fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")


def read_ply(path) -> PointCloud:
    """Read an ASCII PLY with a vertex element carrying x, y, z properties."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise InputError(f"{path}: not a PLY file")
        n_vertex = None
        props = []
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise InputError(f"{path}: missing end_header")
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise InputError(f"{path}: only ASCII PLY is supported")
            if tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if n_vertex is None or not {"x", "y", "z"} <= set(props):
            raise InputError(f"{path}: vertex element with x, y, z required")
        cols = [props.index(c) for c in "xyz"]
        rows = []
        for _ in range(n_vertex):
            vals = fh.readline().split()
            rows.append([float(vals[c]) for c in cols])
    return PointCloud(np.array(rows).reshape(-1, 3))
