"""H-representation polyhedra ``{x : A x <= b}`` with unit row normals."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection

from .errors import CorridorError, InputError


@dataclass(frozen=True)
class Polyhedron:
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float).reshape(-1, 3)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise InputError("A and b row counts differ")
        nrm = np.linalg.norm(A, axis=1)
        if np.any(nrm <= 0):
            raise InputError("zero normal in polyhedron")
        A = A / nrm[:, None]
        b = b / nrm
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def from_box(cls, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        eye = np.eye(3)
        return cls(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))

    @property
    def rows(self):
        return list(zip(self.A, self.b))

    def __len__(self):
        return len(self.b)

    def residuals(self, x):
        """``A x - b`` for one point (m,) or many points (n, m)."""
        x = np.asarray(x, dtype=float)
        return x @ self.A.T - self.b

    def contains(self, x, slack=0.0):
        r = self.residuals(x)
        return np.all(r <= slack, axis=-1)

    def intersect(self, other: "Polyhedron") -> "Polyhedron":
        return Polyhedron(np.vstack([self.A, other.A]), np.concatenate([self.b, other.b]))

    def chebyshev(self):
        """Center and radius of the largest inscribed ball (radius < 0 if empty)."""
        return inscribed_ball(self.A, self.b)

    def vertices(self):
        """Vertex enumeration by halfspace intersection around the Chebyshev center."""
        c, rad = self.chebyshev()
        if rad <= 1e-9:
            raise CorridorError("polyhedron has empty interior")
        hs = HalfspaceIntersection(np.hstack([self.A, -self.b[:, None]]), c)
        return hs.intersections

    def to_dict(self):
        return [{"normal": a.tolist(), "offset": float(b)} for a, b in self.rows]

    @classmethod
    def from_dict(cls, rows):
        return cls(np.array([r["normal"] for r in rows]), np.array([r["offset"] for r in rows]))


def poly_contains(poly: Polyhedron, x, slack=0.0):
    """True iff ``a.x - b <= slack`` for every row."""
    return bool(poly.contains(np.asarray(x, dtype=float), slack))


def inscribed_ball(A, b):
    """Largest ball inside ``A x <= b`` (unit rows) via a small LP.

    Maximises ``s`` subject to ``a_k.x + s <= b_k``. Radius is capped at 1e3.
    """
    n = A.shape[0]
    c = np.zeros(4)
    c[3] = -1.0
    A_ub = np.hstack([A, np.ones((n, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=b, bounds=[(None, None)] * 3 + [(None, 1e3)],
                  method="highs")
    if res.status != 0:
        return np.full(3, np.nan), -np.inf
    return res.x[:3], float(res.x[3])


def overlap_radius(p: Polyhedron, q: Polyhedron):
    """Inscribed-ball radius of the intersection of two polyhedra."""
    return p.intersect(q).chebyshev()[1]


class Corridor:
    """Ordered sequence of overlapping polyhedra."""

    def __init__(self, polys: Sequence[Polyhedron]):
        if len(polys) == 0:
            raise CorridorError("empty corridor")
        self.polys = list(polys)

    def __len__(self):
        return len(self.polys)

    def __iter__(self):
        return iter(self.polys)

    def __getitem__(self, i):
        return self.polys[i]

    def overlap_balls(self):
        """Chebyshev (center, radius) of each consecutive intersection, computed once."""
        key = tuple(id(P) for P in self.polys)
        if getattr(self, "_balls_key", None) != key:
            self._balls = [a.intersect(b).chebyshev() for a, b in zip(self.polys[:-1], self.polys[1:])]
            self._balls_key = key
        return list(self._balls)

    def overlap_radii(self):
        return [rad for _, rad in self.overlap_balls()]

    def check_overlap(self, delta):
        radii = self.overlap_radii()
        for k, rad in enumerate(radii):
            if rad < delta - 1e-9:
                raise CorridorError(
                    f"overlap {k}-{k + 1} admits radius {rad:.4f} < required {delta:.4f}"
                )
        return radii

    def to_json(self):
        return json.dumps({"polyhedra": [p.to_dict() for p in self.polys]}, indent=1)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls([Polyhedron.from_dict(rows) for rows in data["polyhedra"]])


def write_obj(polys: Sequence[Polyhedron], path):
    """Write polyhedra as triangulated OBJ meshes, one object per polyhedron."""
    lines = []
    offset = 1
    for k, poly in enumerate(polys):
        verts = poly.vertices()
        hull = ConvexHull(verts)
        lines.append(f"o poly_{k}")
        lines.extend(f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in hull.points)
        lines.extend(f"f {a + offset} {b + offset} {c + offset}" for a, b, c in hull.simplices)
        offset += len(hull.points)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_obj(path):
    """Parse an OBJ written by :func:`write_obj` into per-object vertex arrays."""
    objects = {}
    current = None
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "o":
                current = parts[1]
                objects[current] = {"v": [], "f": []}
            elif parts[0] == "v":
                objects[current]["v"].append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                objects[current]["f"].append([int(x) for x in parts[1:4]])
    return {k: (np.array(o["v"]), np.array(o["f"])) for k, o in objects.items()}
