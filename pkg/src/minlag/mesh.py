"""Boundary-augmented piecewise Cartesian point sets.

The solver works on a finite point set consisting of interior nodes (corners
of uniform quadtree leaf cells kept at a safety gap ``delta`` from the
boundary) plus boundary nodes sampled along the domain boundary at a much
finer spacing ``h_B``.  The fine boundary resolution is what keeps the wide
interior stencils consistent near the boundary: as the target resolution h
shrinks, ``h_B = h**1.5`` shrinks strictly faster.

Mesh resolution is described by five lengths/angles:

* ``h``        target interior resolution (leaf cells are refined to <= h),
* ``h_B``      boundary node spacing, o(h),
* ``delta``    gap between interior nodes and the boundary, O(h),
* ``dtheta``   angular resolution of the direction set, O(sqrt(h)),
* ``r``        stencil search radius, O(sqrt(h)).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ConvexBody

__all__ = ["MeshParams", "QuadMesh", "MeshBuildError", "build_mesh", "realized_metrics"]

INTERIOR = 0
BOUNDARY = 1


class MeshBuildError(RuntimeError):
    """Raised when the requested parameters cannot produce a usable mesh."""


@dataclass(frozen=True)
class MeshParams:
    """Resolution parameters; unset fields default to the standard scalings.

    Defaults: ``h_B = h**hB_exponent`` (exponent 1.5), ``delta = 0.5 * h``,
    ``dtheta = c_theta * sqrt(h)``, ``r = c_r * sqrt(h)`` with
    ``c_theta = 1`` and ``c_r = 2``.
    """

    h: float
    h_B: float = None
    delta: float = None
    dtheta: float = None
    r: float = None

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.h_B is None:
            object.__setattr__(self, "h_B", self.h**1.5)
        if self.delta is None:
            object.__setattr__(self, "delta", 0.5 * self.h)
        if self.dtheta is None:
            object.__setattr__(self, "dtheta", math.sqrt(self.h))
        if self.r is None:
            object.__setattr__(self, "r", 2.0 * math.sqrt(self.h))
        if not self.h / 4 <= self.delta <= self.h:
            raise ValueError("delta must lie in [h/4, h]")
        if self.h_B > self.h:
            raise ValueError("h_B must not exceed h")
        if self.dtheta <= 0 or self.dtheta > math.pi / 2:
            raise ValueError("dtheta must lie in (0, pi/2]")
        if self.r <= self.h:
            raise ValueError("search radius r must exceed h")

    @classmethod
    def from_h(cls, h, c_theta=1.0, c_r=2.0, delta_factor=0.5, hB_exponent=1.5):
        """Build params from h and the dimensionless mesh constants."""
        return cls(
            h=h,
            h_B=h**hB_exponent,
            delta=delta_factor * h,
            dtheta=c_theta * math.sqrt(h),
            r=c_r * math.sqrt(h),
        )


@dataclass
class QuadMesh:
    """Finite point set with interior/boundary tags and radius queries.

    Immutable after construction; all queries are read-only.  Node ids index
    ``points`` with interior nodes first (quadtree traversal order) and then
    boundary nodes in arclength order, so runs are reproducible bit for bit.
    """

    points: np.ndarray          # (n, 2)
    tags: np.ndarray            # (n,) INTERIOR or BOUNDARY
    params: MeshParams
    cells: np.ndarray = None    # kept leaf cells (cx, cy, half) for diagnostics
    cell_size: float = None     # uniform kept-leaf edge length
    _tree: cKDTree = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=float)
        self.tags = np.asarray(self.tags, dtype=np.int8)
        if len(self.points) != len(self.tags):
            raise ValueError("points/tags length mismatch")
        self._tree = cKDTree(self.points)
        self.interior_ids = np.flatnonzero(self.tags == INTERIOR)
        self.boundary_ids = np.flatnonzero(self.tags == BOUNDARY)

    def __len__(self):
        return len(self.points)

    @property
    def n_interior(self):
        return len(self.interior_ids)

    @property
    def n_boundary(self):
        return len(self.boundary_ids)

    def neighbors_in_ball(self, node, radius):
        """Ids of all nodes within ``radius`` of node ``node``, excluding it,
        in increasing id order."""
        ids = self._tree.query_ball_point(self.points[node], radius)
        ids = np.sort(np.asarray(ids, dtype=np.int64))
        return ids[ids != node]

    def points_in_ball(self, p, radius):
        """Ids of all nodes within ``radius`` of an arbitrary point."""
        ids = self._tree.query_ball_point(np.asarray(p, dtype=float), radius)
        return np.sort(np.asarray(ids, dtype=np.int64))

    def nearest_node(self, p, interior_only=False):
        if interior_only:
            d = np.linalg.norm(self.points[self.interior_ids] - np.asarray(p), axis=1)
            return int(self.interior_ids[np.argmin(d)])
        _, idx = self._tree.query(np.asarray(p, dtype=float))
        return int(idx)

    # ------------------------------------------------------------------- io
    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node_id", "x", "y", "tag"])
            for i, (p, t) in enumerate(zip(self.points, self.tags)):
                writer.writerow([i, repr(float(p[0])), repr(float(p[1])), int(t)])

    @classmethod
    def from_csv(cls, path, params):
        rows = []
        with open(path) as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                rows.append((float(row[1]), float(row[2]), int(row[3])))
        pts = np.array([(x, y) for x, y, _ in rows])
        tags = np.array([t for _, _, t in rows], dtype=np.int8)
        return cls(points=pts, tags=tags, params=params)

    @classmethod
    def from_points(cls, points, tags, params):
        """Wrap an explicit point set (used by tests and imports)."""
        return cls(points=np.asarray(points, dtype=float), tags=tags, params=params)


def _root_box(domain):
    """Power-of-two root cell around the centroid.

    A dyadic root keeps all corner coordinates exact in floating point and,
    deliberately, does not align the lattice with the domain boundary.
    """
    c = domain.centroid()
    ring = domain.boundary_points(512)
    extent = np.max(np.abs(ring - c))
    half = 2.0 ** math.ceil(math.log2(1.05 * extent))
    return c, half


def build_mesh(domain: ConvexBody, params: MeshParams) -> QuadMesh:
    """Build the boundary-augmented quadtree mesh for a convex domain.

    Interior nodes are the corners of uniform leaf cells (edge <= h) whose
    corners all sit at signed distance <= -delta; boundary nodes are placed
    on the boundary curve at arclength spacing <= h_B.
    """
    center, half0 = _root_box(domain)
    depth = max(1, math.ceil(math.log2(2.0 * half0 / params.h)))
    cell = 2.0 * half0 / 2.0**depth

    # Iterative refinement; cells conservatively outside the domain stop early.
    stack = [(center[0] - half0, center[1] - half0, half0)]
    kept = []
    sqrt2 = math.sqrt(2.0)
    while stack:
        x0, y0, half = stack.pop()
        cx, cy = x0 + half, y0 + half
        if domain.signed_distance((cx, cy)) - half * sqrt2 > 0:
            continue  # entirely outside (signed distance is 1-Lipschitz)
        if 2.0 * half > cell * 1.0000001:
            h2 = 0.5 * half
            stack.extend(
                [
                    (x0, y0, h2),
                    (x0 + half, y0, h2),
                    (x0, y0 + half, h2),
                    (x0 + half, y0 + half, h2),
                ]
            )
            continue
        corners = np.array(
            [[x0, y0], [x0 + 2 * half, y0], [x0, y0 + 2 * half], [x0 + 2 * half, y0 + 2 * half]]
        )
        # Signed distance is convex, so its max over the cell sits at a corner.
        if np.max(domain.signed_distance(corners)) <= -params.delta:
            kept.append((x0, y0, half))

    if not kept:
        raise MeshBuildError(f"no interior cells at h={params.h}; domain too small")

    # Corners in traversal order, deduplicated on the exact dyadic lattice.
    seen = {}
    interior = []
    for x0, y0, half in kept:
        for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
            px, py = x0 + 2 * half * dx, y0 + 2 * half * dy
            key = (round((px - center[0]) / cell), round((py - center[1]) / cell))
            if key not in seen:
                seen[key] = True
                interior.append((px, py))
    interior = np.array(interior)
    if len(interior) < 9:
        raise MeshBuildError(
            f"only {len(interior)} interior nodes at h={params.h}; domain too small"
        )

    n_bdy = max(8, math.ceil(domain.perimeter() / params.h_B))
    boundary = domain.boundary_points(n_bdy)

    pts = np.vstack([interior, boundary])
    tags = np.concatenate(
        [np.full(len(interior), INTERIOR, dtype=np.int8), np.full(len(boundary), BOUNDARY, dtype=np.int8)]
    )
    cells = np.array([(x0 + half, y0 + half, half) for x0, y0, half in kept])
    return QuadMesh(points=pts, tags=tags, params=params, cells=cells, cell_size=cell)


def realized_metrics(mesh: QuadMesh, domain: ConvexBody, samples=4096, seed=0):
    """Measured (h, h_B, delta) for a built mesh.

    h and h_B estimate sup-min covering distances by sampling the domain and
    its boundary; delta is the exact minimum interior-to-boundary-node
    distance.
    """
    rng = np.random.default_rng(seed)
    c = domain.centroid()
    ring = domain.boundary_points(512)
    extent = np.max(np.abs(ring - c), axis=0)
    pool = c + rng.uniform(-1, 1, size=(8 * samples, 2)) * extent
    pool = pool[domain.signed_distance(pool) < 0][:samples]
    d_int, _ = mesh._tree.query(pool)
    h_real = float(np.max(d_int)) if len(pool) else math.nan

    n_dense = max(4096, 8 * mesh.n_boundary)
    dense = domain.boundary_points(n_dense)
    bdy_tree = cKDTree(mesh.points[mesh.boundary_ids])
    d_bdy, _ = bdy_tree.query(dense)
    hB_real = float(np.max(d_bdy))

    if mesh.n_interior and mesh.n_boundary:
        d_gap, _ = bdy_tree.query(mesh.points[mesh.interior_ids])
        delta_real = float(np.min(d_gap))
    else:
        delta_real = math.nan
    return h_real, hB_real, delta_real
