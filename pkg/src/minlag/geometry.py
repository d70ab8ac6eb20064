"""Convex planar bodies: signed distance, support function, normals.

Every shape used by the solver (source domain or gradient target) is one of
a small family of convex bodies.  Each body answers the same queries:

* ``signed_distance(p)``: Euclidean distance to the boundary, negative
  strictly inside, zero on the boundary, positive outside.
* ``support(n)``: sup of ``n . y`` over the body (the support function).
* ``outward_normal(p)``: unit outward normal at a boundary point.
* ``contains(p)``, ``boundary_points(count)``, ``centroid()``, ...

Signed distances and support functions are exact (up to scalar root finding
for the ellipse), which keeps the boundary operator of the solver at the
accuracy of the underlying difference scheme.  All queries are read-only;
bodies are immutable after construction.
"""

from __future__ import annotations

import abc
import math

import numpy as np

__all__ = [
    "ConvexBody",
    "Disk",
    "Ellipse",
    "Polygon",
    "Square",
    "Segment",
    "body_from_config",
]


def _as_points(p):
    """Coerce to an (n, 2) float array; also report whether input was a single point."""
    a = np.asarray(p, dtype=float)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[-1] != 2:
        raise ValueError(f"expected 2-d points, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("points must have finite coordinates")
    return a, single


def _unit_rows(n):
    """Normalize rows to unit length (support functions are positively homogeneous)."""
    a, single = _as_points(n)
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero direction vector")
    return a / norms[:, None], single


class ConvexBody(abc.ABC):
    """A bounded convex region of the plane."""

    kind: str = "convex"

    # ------------------------------------------------------------------ core
    @abc.abstractmethod
    def signed_distance(self, p):
        """Signed Euclidean distance to the boundary; accepts (2,) or (n, 2)."""

    @abc.abstractmethod
    def nearest_boundary_point(self, p):
        """Closest point on the boundary; accepts (2,) or (n, 2)."""

    @abc.abstractmethod
    def support(self, n):
        """Support function sup_y n.y; non-unit directions are normalized."""

    @abc.abstractmethod
    def outward_normal(self, p):
        """Unit outward normal at boundary point ``p`` (corner points get the
        bisector of the adjacent normals)."""

    @abc.abstractmethod
    def boundary_points(self, count):
        """``count`` points on the boundary, approximately uniform in arclength."""

    @abc.abstractmethod
    def centroid(self):
        """Area centroid (midpoint for the degenerate segment)."""

    @abc.abstractmethod
    def max_norm(self):
        """max |y| over the body, i.e. the largest support value."""

    @abc.abstractmethod
    def diameter(self):
        pass

    # ----------------------------------------------------------- conveniences
    @property
    def boundary_tol(self):
        return 1e-9 * self.diameter()

    def contains(self, p):
        """Membership test: signed distance <= 0."""
        sd = self.signed_distance(p)
        return sd <= 0.0

    def gradient_bound(self, safety=1.1):
        """Strict upper bound on |p| over the body, with a safety factor."""
        return safety * self.max_norm()

    def signed_distance_gradient(self, p):
        """Gradient of the signed distance function.

        Default implementation uses central differences with step
        1e-6 * diameter; smooth shapes override with the analytic value
        (the outward normal at the nearest boundary point).
        """
        a, single = _as_points(p)
        step = 1e-6 * self.diameter()
        ex = np.array([step, 0.0])
        ey = np.array([0.0, step])
        gx = (self.signed_distance(a + ex) - self.signed_distance(a - ex)) / (2 * step)
        gy = (self.signed_distance(a + ey) - self.signed_distance(a - ey)) / (2 * step)
        g = np.stack([gx, gy], axis=-1)
        return g[0] if single else g

    def _check_on_boundary(self, p):
        sd = np.abs(self.signed_distance(p))
        if np.any(sd > 1e3 * self.boundary_tol):
            raise ValueError(
                f"point not on the boundary of {self.kind} "
                f"(|signed distance| = {np.max(sd):.3e})"
            )


class Disk(ConvexBody):
    kind = "disk"

    def __init__(self, radius=1.0, center=(0.0, 0.0)):
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)

    def signed_distance(self, p):
        a, single = _as_points(p)
        d = np.linalg.norm(a - self.center, axis=1) - self.radius
        return d[0] if single else d

    def nearest_boundary_point(self, p):
        a, single = _as_points(p)
        v = a - self.center
        r = np.linalg.norm(v, axis=1)
        # For the center itself any boundary point is nearest; pick +x.
        deg = r < 1e-300
        v[deg] = [1.0, 0.0]
        r[deg] = 1.0
        q = self.center + self.radius * v / r[:, None]
        return q[0] if single else q

    def support(self, n):
        u, single = _unit_rows(n)
        s = u @ self.center + self.radius
        return s[0] if single else s

    def outward_normal(self, p):
        self._check_on_boundary(p)
        a, single = _as_points(p)
        v = a - self.center
        v /= np.linalg.norm(v, axis=1)[:, None]
        return v[0] if single else v

    def signed_distance_gradient(self, p):
        a, single = _as_points(p)
        v = a - self.center
        r = np.linalg.norm(v, axis=1)
        deg = r < 1e-300
        v[deg] = [1.0, 0.0]
        r[deg] = 1.0
        g = v / r[:, None]
        return g[0] if single else g

    def boundary_points(self, count):
        if count < 3:
            raise ValueError("need at least 3 boundary points")
        t = 2 * np.pi * np.arange(count) / count
        return self.center + self.radius * np.stack([np.cos(t), np.sin(t)], axis=1)

    def centroid(self):
        return self.center.copy()

    def max_norm(self):
        return float(np.linalg.norm(self.center) + self.radius)

    def diameter(self):
        return 2.0 * self.radius

    def perimeter(self):
        return 2.0 * np.pi * self.radius


def _ellipse_root(a, b, u, v):
    """Parameter of the nearest-point projection onto the axis-aligned ellipse
    (x/a)^2 + (y/b)^2 = 1 for first-quadrant queries (u, v) with v > 0.

    The nearest boundary point is (a^2 u/(t+a^2), b^2 v/(t+b^2)) where t is the
    unique root of F(t) = (a u/(t+a^2))^2 + (b v/(t+b^2))^2 - 1 on (-b^2, inf).
    F is strictly decreasing there, so bisection is safe; ~110 halvings bring
    the bracket to machine width.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    lo = np.full_like(u, -(b * b))
    hi = np.maximum(a * u, b * v) + np.hypot(a * u, b * v) + a * a

    def f(t):
        return (a * u / (t + a * a)) ** 2 + (b * v / (t + b * b)) ** 2 - 1.0

    # Expand the upper bracket in the (rare) case it is not yet past the root.
    for _ in range(60):
        bad = f(hi) > 0
        if not np.any(bad):
            break
        hi = np.where(bad, 2 * hi + 1.0, hi)
    for _ in range(110):
        mid = 0.5 * (lo + hi)
        pos = f(mid) > 0.0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    return 0.5 * (lo + hi)


class Ellipse(ConvexBody):
    """Image of the unit disk under a symmetric positive definite matrix, shifted.

    Equivalently the sublevel set |M^{-1}(p - c)| <= 1; the quadratic-form
    parametrization x' Q x <= 1 corresponds to M = Q^{-1/2}.
    """

    kind = "ellipse"

    def __init__(self, matrix, center=(0.0, 0.0)):
        m = np.asarray(matrix, dtype=float).reshape(2, 2)
        if not np.allclose(m, m.T, atol=1e-12 * np.abs(m).max()):
            raise ValueError("ellipse matrix must be symmetric")
        w, q = np.linalg.eigh(m)
        if np.any(w <= 0):
            raise ValueError("ellipse matrix must be positive definite")
        self.matrix = 0.5 * (m + m.T)
        self.center = np.asarray(center, dtype=float)
        # Principal frame: columns of q are the semi-axis directions, w the lengths.
        order = np.argsort(w)[::-1]
        self._axes = w[order]          # (a, b) with a >= b
        self._frame = q[:, order]      # rotation into the principal frame
        self._inv = np.linalg.inv(self.matrix)
        self._arclength_table = None

    @classmethod
    def from_quadratic_form(cls, quadratic, center=(0.0, 0.0)):
        q = np.asarray(quadratic, dtype=float).reshape(2, 2)
        w, v = np.linalg.eigh(0.5 * (q + q.T))
        if np.any(w <= 0):
            raise ValueError("quadratic form must be positive definite")
        m = (v * (1.0 / np.sqrt(w))) @ v.T
        return cls(m, center)

    def _to_frame(self, p):
        return (p - self.center) @ self._frame

    def _from_frame(self, q):
        return q @ self._frame.T + self.center

    def _nearest_in_frame(self, q):
        """Nearest boundary point, computed in the principal frame."""
        a, b = self._axes
        u = np.abs(q[:, 0])
        v = np.abs(q[:, 1])
        out = np.empty_like(q)

        on_axis = v <= 1e-14 * a
        gen = ~on_axis
        if np.any(gen):
            t = _ellipse_root(a, b, u[gen], v[gen])
            out[gen, 0] = a * a * u[gen] / (t + a * a)
            out[gen, 1] = b * b * v[gen] / (t + b * b)
        if np.any(on_axis):
            uu = u[on_axis]
            # On the major axis the projection splits at the evolute point.
            if a > b:
                split = (a * a - b * b) / a
                inner = uu < split
                x = np.where(inner, a * a * uu / (a * a - b * b), a)
                y = np.where(inner, b * np.sqrt(np.maximum(0.0, 1 - (x / a) ** 2)), 0.0)
            else:
                x = np.full_like(uu, a)
                y = np.zeros_like(uu)
            out[on_axis, 0] = x
            out[on_axis, 1] = y
        out[:, 0] *= np.sign(q[:, 0]) + (q[:, 0] == 0)
        out[:, 1] *= np.sign(q[:, 1]) + (q[:, 1] == 0)
        return out

    def nearest_boundary_point(self, p):
        a, single = _as_points(p)
        q = self._to_frame(a)
        near = self._nearest_in_frame(q)
        res = self._from_frame(near)
        return res[0] if single else res

    def signed_distance(self, p):
        a, single = _as_points(p)
        q = self._to_frame(a)
        near = self._nearest_in_frame(q)
        dist = np.linalg.norm(q - near, axis=1)
        ax, bx = self._axes
        inside = (q[:, 0] / ax) ** 2 + (q[:, 1] / bx) ** 2 <= 1.0
        sd = np.where(inside, -dist, dist)
        return sd[0] if single else sd

    def support(self, n):
        u, single = _unit_rows(n)
        s = u @ self.center + np.linalg.norm(u @ self.matrix, axis=1)
        return s[0] if single else s

    def outward_normal(self, p):
        self._check_on_boundary(p)
        a, single = _as_points(p)
        g = (a - self.center) @ self._inv @ self._inv
        g /= np.linalg.norm(g, axis=1)[:, None]
        return g[0] if single else g

    def signed_distance_gradient(self, p):
        a, single = _as_points(p)
        near = self.nearest_boundary_point(a)
        g = (near - self.center) @ self._inv @ self._inv
        g /= np.linalg.norm(g, axis=1)[:, None]
        return g[0] if single else g

    def _arclength(self):
        if self._arclength_table is None:
            t = np.linspace(0.0, 2 * np.pi, 16385)
            pts = np.stack([np.cos(t), np.sin(t)], axis=1) @ self.matrix.T
            seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            self._arclength_table = (t, np.concatenate([[0.0], np.cumsum(seg)]))
        return self._arclength_table

    def boundary_points(self, count):
        if count < 3:
            raise ValueError("need at least 3 boundary points")
        t, s = self._arclength()
        targets = s[-1] * np.arange(count) / count
        angles = np.interp(targets, s, t)
        ring = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return ring @ self.matrix.T + self.center

    def centroid(self):
        return self.center.copy()

    def max_norm(self):
        if np.allclose(self.center, 0.0):
            return float(self._axes[0])
        pts = self.boundary_points(4096)
        return float(np.max(np.linalg.norm(pts, axis=1)))

    def diameter(self):
        return 2.0 * float(self._axes[0])

    def perimeter(self):
        return float(self._arclength()[1][-1])


class Polygon(ConvexBody):
    """Convex polygon from counterclockwise vertices."""

    kind = "polygon"

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float).reshape(-1, 2)
        if len(v) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if area2 <= 0:
            raise ValueError("vertices must be counterclockwise")
        edges = np.roll(v, -1, axis=0) - v
        cross = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
        if np.any(cross < -1e-12 * np.max(np.abs(v)) ** 2):
            raise ValueError("vertices must describe a convex polygon")
        self.vertices = v
        self._edges = edges
        self._edge_len = np.linalg.norm(edges, axis=1)
        # Outward normals of a CCW polygon point to the right of each edge.
        self._normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1) / self._edge_len[:, None]

    def _edge_distances(self, a):
        """Distance from each query point to every edge segment, (n, n_edges)."""
        v = self.vertices
        e = self._edges
        rel = a[:, None, :] - v[None, :, :]
        t = np.einsum("nij,ij->ni", rel, e) / (self._edge_len**2)[None, :]
        t = np.clip(t, 0.0, 1.0)
        foot = v[None, :, :] + t[:, :, None] * e[None, :, :]
        return np.linalg.norm(a[:, None, :] - foot, axis=2), foot

    def signed_distance(self, p):
        a, single = _as_points(p)
        dists, _ = self._edge_distances(a)
        dmin = dists.min(axis=1)
        rel = a[:, None, :] - self.vertices[None, :, :]
        inside = np.all(np.einsum("nij,ij->ni", rel, self._normals) <= 0.0, axis=1)
        sd = np.where(inside, -dmin, dmin)
        return sd[0] if single else sd

    def nearest_boundary_point(self, p):
        a, single = _as_points(p)
        dists, foot = self._edge_distances(a)
        idx = dists.argmin(axis=1)
        q = foot[np.arange(len(a)), idx]
        return q[0] if single else q

    def support(self, n):
        u, single = _unit_rows(n)
        s = (u @ self.vertices.T).max(axis=1)
        return s[0] if single else s

    def outward_normal(self, p):
        self._check_on_boundary(p)
        a, single = _as_points(p)
        dists, _ = self._edge_distances(a)
        tol = 10 * self.boundary_tol
        out = np.empty_like(a)
        for i, row in enumerate(dists):
            near = np.flatnonzero(row <= row.min() + tol)
            n = self._normals[near].sum(axis=0)
            out[i] = n / np.linalg.norm(n)
        return out[0] if single else out

    def boundary_points(self, count):
        if count < 3:
            raise ValueError("need at least 3 boundary points")
        cum = np.concatenate([[0.0], np.cumsum(self._edge_len)])
        targets = cum[-1] * np.arange(count) / count
        seg = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(self.vertices) - 1)
        local = (targets - cum[seg]) / self._edge_len[seg]
        # Snap the first sample on each edge to the vertex so corners are kept.
        _, first = np.unique(seg, return_index=True)
        local[first] = 0.0
        return self.vertices[seg] + local[:, None] * self._edges[seg]

    def centroid(self):
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        cross = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
        area = cross.sum() / 2.0
        return (v + w).T @ cross / (6.0 * area)

    def max_norm(self):
        return float(np.max(np.linalg.norm(self.vertices, axis=1)))

    def diameter(self):
        v = self.vertices
        return float(np.max(np.linalg.norm(v[:, None, :] - v[None, :, :], axis=2)))

    def perimeter(self):
        return float(self._edge_len.sum())


class Square(Polygon):
    """Axis-aligned square of given half-width."""

    kind = "square"

    def __init__(self, half_width, center=(0.0, 0.0)):
        if half_width <= 0:
            raise ValueError("half width must be positive")
        c = np.asarray(center, dtype=float)
        w = float(half_width)
        super().__init__(c + w * np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float))
        self.half_width = w
        self.center = c


class Segment(ConvexBody):
    """Degenerate convex body: a closed line segment (used only as a target).

    The segment has empty interior, so the signed distance is nonnegative
    everywhere and zero exactly on the segment.
    """

    kind = "segment"

    def __init__(self, start, end):
        self.start = np.asarray(start, dtype=float)
        self.end = np.asarray(end, dtype=float)
        d = self.end - self.start
        self._len = float(np.linalg.norm(d))
        if self._len == 0:
            raise ValueError("segment endpoints coincide")
        self._dir = d / self._len
        self._normal = np.array([self._dir[1], -self._dir[0]])

    def nearest_boundary_point(self, p):
        a, single = _as_points(p)
        t = np.clip((a - self.start) @ self._dir, 0.0, self._len)
        q = self.start + t[:, None] * self._dir
        return q[0] if single else q

    def signed_distance(self, p):
        a, single = _as_points(p)
        q = self.nearest_boundary_point(a)
        d = np.linalg.norm(np.atleast_2d(q) - a, axis=1)
        return d[0] if single else d

    def support(self, n):
        u, single = _unit_rows(n)
        s = np.maximum(u @ self.start, u @ self.end)
        return s[0] if single else s

    def outward_normal(self, p):
        # Every direction in the normal fan is admissible; return the fixed
        # right-hand perpendicular for determinism.
        self._check_on_boundary(p)
        a, single = _as_points(p)
        out = np.tile(self._normal, (len(a), 1))
        return out[0] if single else out

    def boundary_points(self, count):
        if count < 3:
            raise ValueError("need at least 3 boundary points")
        t = np.linspace(0.0, self._len, count)
        return self.start + t[:, None] * self._dir

    def centroid(self):
        return 0.5 * (self.start + self.end)

    def max_norm(self):
        return float(max(np.linalg.norm(self.start), np.linalg.norm(self.end)))

    def diameter(self):
        return self._len

    def perimeter(self):
        return self._len


def body_from_config(spec):
    """Build a body from a plain dict (the JSON shape description).

    Recognized kinds: disk, ellipse (matrix row-major, alias matrix_disk),
    square, polygon (flat coordinate list), segment.
    """
    spec = dict(spec)
    kind = spec.pop("kind")
    center = spec.pop("center", (0.0, 0.0))
    if kind == "disk":
        return Disk(radius=spec.get("radius", 1.0), center=center)
    if kind in ("ellipse", "ellipse_matrix", "matrix_disk"):
        return Ellipse(np.asarray(spec["matrix"], dtype=float).reshape(2, 2), center=center)
    if kind == "square":
        return Square(half_width=spec["half_width"], center=center)
    if kind == "polygon":
        return Polygon(np.asarray(spec["vertices"], dtype=float).reshape(-1, 2))
    if kind == "segment":
        return Segment(spec["start"], spec["end"])
    raise ValueError(f"unknown body kind: {kind!r}")
