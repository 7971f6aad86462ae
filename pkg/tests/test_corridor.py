import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wbplan.corridor import (
    LineSeed,
    generate_line_seed,
    inflate_polyhedron,
    narrow_gap_corridor,
    sfc_along_path,
)
from wbplan.errors import CorridorError, PreconditionError
from wbplan.mapping import DroneModel, PointCloud, VoxelGrid, build_dual_map, build_voxel_grid, single_gap_world
from wbplan.polyhedron import Corridor, Polyhedron, inscribed_ball, poly_contains, read_obj, write_obj
from wbplan.search import CollidingSegment, astar_grid, mr_search

BOUNDS = (np.zeros(3), np.full(3, 2.0))


def _samples_inside(poly, lo, hi, rng, n=20000):
    x = rng.uniform(lo, hi, size=(n, 3))
    return x[poly.residuals(x).max(axis=1) < -1e-7]


# -- polyhedron basics ---------------------------------------------------------------


@given(arrays(np.float64, 3, elements=st.floats(-1, 3)))
def test_poly_contains_matches_box(x):
    P = Polyhedron.from_box([0, 0, 0], [1, 2, 1.5])
    inside = bool(np.all(x >= 0) and np.all(x <= [1, 2, 1.5]))
    assert poly_contains(P, x) == inside


def test_rows_are_normalised_and_chebyshev_box():
    P = Polyhedron(np.array([[2.0, 0, 0]]), np.array([4.0]))
    assert np.allclose(P.A, [[1, 0, 0]]) and np.allclose(P.b, [2.0])
    c, r = Polyhedron.from_box([0, 0, 0], [1, 2, 3]).chebyshev()
    assert r == pytest.approx(0.5)
    empty = Polyhedron.from_box([0, 0, 0], [1, 1, 1]).intersect(Polyhedron.from_box([2, 2, 2], [3, 3, 3]))
    assert inscribed_ball(empty.A, empty.b)[1] < 0


def test_corridor_overlap_check():
    a = Polyhedron.from_box([0, 0, 0], [1, 1, 1])
    b = Polyhedron.from_box([0.8, 0, 0], [2, 1, 1])
    cor = Corridor([a, b])
    assert cor.overlap_radii()[0] == pytest.approx(0.1)
    cor.check_overlap(0.1)
    with pytest.raises(CorridorError):
        cor.check_overlap(0.2)
    with pytest.raises(CorridorError):
        Corridor([])


def test_json_and_obj_round_trip(tmp_path):
    cor = Corridor([Polyhedron.from_box([0, 0, 0], [1, 1, 1]), Polyhedron.from_box([0.5, 0, 0], [2, 1, 1])])
    back = Corridor.from_json(cor.to_json())
    for p, q in zip(cor, back):
        assert np.array_equal(p.A, q.A) and np.array_equal(p.b, q.b)
    path = tmp_path / "c.obj"
    write_obj(list(cor), path)
    objs = read_obj(path)
    assert list(objs) == ["poly_0", "poly_1"]
    verts, faces = objs["poly_0"]
    assert len(verts) == 8 and len(faces) == 12
    assert np.all(cor[0].residuals(verts) <= 1e-6)


# -- inflation ---------------------------------------------------------------------------


def test_empty_grid_gives_cap_box():
    grid = build_voxel_grid(PointCloud(np.empty((0, 3))), 0.1, BOUNDS)
    P = inflate_polyhedron([1.0, 1.0, 1.0], grid, max_box=0.5)
    assert poly_contains(P, [0.5, 0.5, 0.5]) and poly_contains(P, [1.5, 1.5, 1.5])
    assert not poly_contains(P, [1.6, 1.0, 1.0])
    verts = P.vertices()
    assert np.allclose(verts.min(axis=0), 0.5) and np.allclose(verts.max(axis=0), 1.5)


def test_ceiling_stops_growth():
    occ = np.zeros((20, 20, 20), bool)
    occ[:, :, 15] = True  # slab at z in [1.5, 1.6]
    grid = VoxelGrid(np.zeros(3), 0.1, occ)
    P = inflate_polyhedron([1.0, 1.0, 1.0], grid, max_box=1.0)
    top = P.vertices()[:, 2].max()
    assert top == pytest.approx(1.5, abs=1e-9)


def test_occupied_seed_rejected():
    occ = np.zeros((20, 20, 20), bool)
    occ[10, 10, 10] = True
    grid = VoxelGrid(np.zeros(3), 0.1, occ)
    with pytest.raises(PreconditionError):
        inflate_polyhedron([1.05, 1.05, 1.05], grid, 0.5)


@settings(max_examples=40)
@given(st.integers(0, 2**31 - 1), st.floats(0.02, 0.1))
def test_inflated_polyhedron_is_obstacle_free(seed, density):
    rng = np.random.default_rng(seed)
    occ = rng.random((20, 20, 20)) < density
    grid = VoxelGrid(np.zeros(3), 0.1, occ)
    free = np.argwhere(~occ)
    q = grid.center(free[rng.integers(len(free))])
    P = inflate_polyhedron(q, grid, max_box=0.8)
    assert poly_contains(P, q)
    pts = _samples_inside(P, q - 0.8, q + 0.8, rng)
    # no sample strictly inside the polyhedron lies in an occupied cell
    assert not grid.occupied_at(pts).any()


# -- narrow gaps ------------------------------------------------------------------------


def _gap_setup(width, height, center=(0.0, 1.25)):
    drone = DroneModel()
    cloud, bounds, gap = single_gap_world(width, height, center)
    dmap = build_dual_map(cloud, drone, bounds)
    seg = CollidingSegment(np.array([gap.x0 - 1.0, center[0], 1.25]),
                           np.array([gap.x1 + 1.0, center[0], 1.25]), 0.0, 1.0)
    res = mr_search(seg, dmap)
    return drone, cloud, dmap, gap, res


@pytest.mark.parametrize("w,h,c", [(0.28, 1.0, (0.0, 1.25)), (0.24, 0.8, (0.5, 1.0)),
                                   (0.30, 0.30, (0.0, 1.25)), (0.26, 1.2, (-1.0, 1.3))])
def test_line_seed_through_gap(w, h, c):
    drone, cloud, dmap, gap, res = _gap_setup(w, h, c)
    seed = generate_line_seed(res.path, dmap.hrm_raw, drone.r)
    diag = np.sqrt(3) * drone.h
    # the seed crosses the gap plane within a cell diagonal of the centerline across the narrow axis
    assert abs(seed.p[1] - gap.center[1]) <= diag
    assert abs(seed.p[0] - gap.center[0]) <= diag
    angle = np.degrees(np.arccos(abs(seed.d[0])))
    assert angle <= 15.0
    assert 2 * drone.h - 1e-12 <= seed.length <= res.path.length()
    if abs(w - h) < 0.05:
        assert np.linalg.norm(seed.p - gap.center) <= diag


def test_line_seed_none_without_obstacles():
    grid = build_voxel_grid(PointCloud(np.empty((0, 3))), 0.1, BOUNDS)
    path = astar_grid(grid, [0.2, 1, 1], [1.8, 1, 1]).path
    assert generate_line_seed(path, grid, 0.3) is None
    with pytest.raises(PreconditionError):
        LineSeed(np.zeros(3), np.zeros(3), 1.0)


@pytest.mark.parametrize("w,h", [(0.28, 1.0), (0.24, 0.8), (0.30, 1.4)])
def test_narrow_corridor_overlaps_and_contains_seed(w, h):
    drone, cloud, dmap, gap, res = _gap_setup(w, h)
    seed = generate_line_seed(res.path, dmap.hrm_raw, drone.r)
    cor, a, b = narrow_gap_corridor(seed, dmap.hrm_raw, points=cloud.points,
                                    clearance=drone.r + 0.05, lrm=dmap.lrm, standoff=0.4)
    assert len(cor) == 3
    assert min(cor.overlap_radii()) >= drone.h
    assert cor[1].contains(np.array(seed.endpoints)).all()
    assert poly_contains(cor[0], a) and poly_contains(cor[2], b)
    # no cloud point strictly inside any piece
    for P in cor:
        assert np.all(P.residuals(cloud.points).max(axis=1) >= -1e-9)
    assert not dmap.lrm.occupied_at(np.stack([a, b])).any()


# -- corridors along paths --------------------------------------------------------------


def test_sfc_covers_l_shaped_path():
    occ = np.zeros((20, 20, 10), bool)
    occ[5:20, 5:20, :] = True  # leaves an L-shaped free region
    grid = VoxelGrid(np.zeros(3), 0.1, occ)
    out = astar_grid(grid, [1.8, 0.2, 0.5], [0.2, 1.8, 0.5])
    cor = sfc_along_path(out.path, grid, max_box=1.0)
    assert len(cor) >= 2
    for q in out.path.waypoints:
        assert any(poly_contains(P, q, 1e-9) for P in cor)
    assert min(cor.overlap_radii()) >= 0.05 - 1e-9
    rng = np.random.default_rng(0)
    for P in cor:
        pts = _samples_inside(P, np.zeros(3), np.array([2.0, 2.0, 1.0]), rng)
        assert not grid.occupied_at(pts).any()
