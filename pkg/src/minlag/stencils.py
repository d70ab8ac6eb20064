"""Generalized finite difference stencils on scattered mesh nodes.

Second directional derivatives are approximated from one neighbor per
quadrant of the local (nu, nu-perp) axes, each neighbor chosen to align as
closely as possible with the nu line inside the search ball.  Writing the
selected neighbors in polar form (rho_j, phi_j) with C_j = rho_j cos(phi_j)
and S_j = rho_j sin(phi_j), the quadrant pairs straddling each half of the
nu axis are first combined transversally (weights proportional to the
opposing |S|, i.e. linear interpolation onto the axis), and the two
resulting on-axis pseudo-points feed a three point second difference.
Equivalently, the weights a_j are the unique solution of

    a_1 S_1 + a_4 S_4 = 0,  a_2 S_2 + a_3 S_3 = 0,
    sum a_j C_j = 0,        sum a_j C_j^2 = 2,

so ``sum a_j (u(x_j) - u(x_0))`` annihilates affine functions, reproduces
the pure directional quadratic exactly, and keeps every weight nonnegative
(negative monotonicity).  The cross term ``sum a_j C_j S_j`` is the leading
consistency error; it vanishes with the alignment angles of the selected
neighbors.  First derivatives reuse the same neighbors through the two
point linear-exactness system and directional derivatives at boundary nodes
use an inward triangle whose convex hull contains the inward ray.

Stencils are precomputed once per mesh and cached as flat arrays so the
nonlinear operators can be evaluated with gathers; construction is
independent per node and deterministic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .geometry import ConvexBody
from .mesh import QuadMesh

__all__ = [
    "DirectionSet",
    "SecondDerivStencil",
    "FirstDerivStencil",
    "StencilCache",
    "EmptyQuadrant",
    "DegenerateDenominator",
    "ConvexHullViolation",
    "NoValidTriangle",
    "select_quadrant_neighbors",
    "second_deriv_coefficients",
    "first_deriv_coefficients",
    "boundary_direction_coefficients",
    "find_boundary_triangle",
]

ALIGN_RTOL = 1e-9        # |S| <= ALIGN_RTOL * rho counts as on-axis
DEGENERATE_RTOL = 1e-14


class EmptyQuadrant(RuntimeError):
    """A quadrant of the search ball holds no node: (h, r) are incompatible."""

    def __init__(self, node, quadrant, direction):
        self.node = node
        self.quadrant = quadrant
        self.direction = np.asarray(direction)
        super().__init__(
            f"no mesh node in quadrant {quadrant} at node {node} "
            f"for direction ({self.direction[0]:+.4f}, {self.direction[1]:+.4f})"
        )


class DegenerateDenominator(RuntimeError):
    """Near-collinear neighbor configuration; the weight system is singular."""


class ConvexHullViolation(RuntimeError):
    """Boundary triangle does not contain the inward ray."""


class NoValidTriangle(RuntimeError):
    """No admissible neighbor pair near a boundary node; mesh too coarse there."""

    def __init__(self, node, direction=None):
        self.node = node
        self.direction = direction
        msg = f"no valid boundary triangle at node {node}"
        if direction is not None:
            msg += f" for direction ({direction[0]:+.4f}, {direction[1]:+.4f})"
        super().__init__(msg)


@dataclass(frozen=True)
class DirectionSet:
    """Unit directions nu_j = (cos(j dtheta), sin(j dtheta)), j = 1..floor(pi/dtheta).

    The half-turn set drives second derivatives (antipodal directions are
    redundant there); boundary directional derivatives sweep the doubled,
    full-circle set.
    """

    dtheta: float

    def __post_init__(self):
        if not 0 < self.dtheta <= math.pi / 2:
            raise ValueError("dtheta must lie in (0, pi/2]")

    @property
    def m(self):
        return int(math.floor(math.pi / self.dtheta))

    @property
    def angles(self):
        return self.dtheta * np.arange(1, self.m + 1)

    @property
    def vectors(self):
        a = self.angles
        return np.stack([np.cos(a), np.sin(a)], axis=1)

    @property
    def full_angles(self):
        return self.dtheta * np.arange(1, 2 * self.m + 1)

    @property
    def full_vectors(self):
        a = self.full_angles
        return np.stack([np.cos(a), np.sin(a)], axis=1)


@dataclass(frozen=True)
class SecondDerivStencil:
    center: int
    direction: np.ndarray
    neighbors: np.ndarray      # 4 node ids (may repeat in aligned cases)
    coefficients: np.ndarray   # a_j, 1/length^2
    rho: np.ndarray
    phi: np.ndarray


@dataclass(frozen=True)
class FirstDerivStencil:
    center: int
    direction: np.ndarray
    variant: str               # forward | backward | centered | boundary-inward
    neighbors: np.ndarray
    coefficients: np.ndarray   # b_j, 1/length


def _perp(v):
    v = np.asarray(v, dtype=float)
    return np.array([-v[1], v[0]])


def _quadrant_masks(C, S, tol):
    """Closed-quadrant membership; axis points belong to both adjacent quadrants."""
    return (
        (C >= -tol) & (S >= -tol),
        (C <= tol) & (S >= -tol),
        (C <= tol) & (S <= tol),
        (C >= -tol) & (S <= tol),
    )


def select_quadrant_neighbors(mesh: QuadMesh, node, nu, r):
    """One neighbor id per quadrant of the (nu, nu-perp) axes at an interior node.

    Each quadrant returns the node in the ball minimizing sin^2(phi); ties go
    to smaller rho, then smaller node id.  Raises :class:`EmptyQuadrant` when
    a quadrant holds no node at all.
    """
    ids = mesh.neighbors_in_ball(node, r)
    if len(ids) == 0:
        raise EmptyQuadrant(node, 1, nu)
    x0 = mesh.points[node]
    d = mesh.points[ids] - x0
    rho = np.linalg.norm(d, axis=1)
    order = np.lexsort((ids, rho))
    ids, d, rho = ids[order], d[order], rho[order]
    nu = np.asarray(nu, dtype=float)
    C = d @ nu
    S = d @ _perp(nu)
    sin2 = (S / rho) ** 2
    tol = ALIGN_RTOL * rho
    out = np.empty(4, dtype=np.int64)
    for q, mask in enumerate(_quadrant_masks(C, S, tol)):
        if not np.any(mask):
            raise EmptyQuadrant(node, q + 1, nu)
        key = np.where(mask, sin2, np.inf)
        out[q] = ids[int(np.argmin(key))]
    return out


def _pair_solve(C, S, rho):
    """Nonnegative second-difference weights, vectorized over leading axes.

    Inputs shaped (..., 4) in slot order (q1, q2, q3, q4), so slots (1, 4)
    straddle the forward axis and (2, 3) the backward axis.  Returns the
    weights and a boolean mask of degenerate members (an axis pseudo-point
    on the wrong side, or a vanishing normalization).
    """
    tol = ALIGN_RTOL * rho
    s1, s2, s3, s4 = (S[..., j] for j in range(4))
    den_p = s1 - s4
    den_m = s2 - s3
    collapsed_p = den_p <= tol[..., 0] + tol[..., 3]
    collapsed_m = den_m <= tol[..., 1] + tol[..., 2]
    w1 = np.where(collapsed_p, 1.0, -s4 / np.where(collapsed_p, 1.0, den_p))
    w4 = np.where(collapsed_p, 0.0, s1 / np.where(collapsed_p, 1.0, den_p))
    w2 = np.where(collapsed_m, 1.0, -s3 / np.where(collapsed_m, 1.0, den_m))
    w3 = np.where(collapsed_m, 0.0, s2 / np.where(collapsed_m, 1.0, den_m))
    c_pos = w1 * C[..., 0] + w4 * C[..., 3]
    c_neg = w2 * C[..., 1] + w3 * C[..., 2]
    q_pos = w1 * C[..., 0] ** 2 + w4 * C[..., 3] ** 2
    q_neg = w2 * C[..., 1] ** 2 + w3 * C[..., 2] ** 2
    scale = np.max(rho, axis=-1)
    degenerate = (c_pos <= DEGENERATE_RTOL * scale) | (c_neg >= -DEGENERATE_RTOL * scale)
    norm = q_pos * (-c_neg) + q_neg * c_pos
    degenerate |= norm <= DEGENERATE_RTOL * scale**3
    safe = np.where(degenerate, 1.0, norm)
    a_pos = 2.0 * (-c_neg) / safe
    a_neg = 2.0 * c_pos / safe
    a = np.stack([a_pos * w1, a_neg * w2, a_neg * w3, a_pos * w4], axis=-1)
    return a, degenerate


def second_deriv_coefficients(x0, nu, neighbors):
    """Weights a_1..a_4 of the generalized second difference along ``nu``.

    ``neighbors`` holds one point per quadrant (quadrants 1..4 of the
    (nu, nu-perp) axes).  Exactly aligned neighbors collapse the transverse
    interpolation onto themselves, so an aligned forward/backward pair
    reduces to the classical non-uniform three point difference (remaining
    slots get weight zero).
    """
    x0 = np.asarray(x0, dtype=float)
    nu = np.asarray(nu, dtype=float)
    pts = np.asarray(neighbors, dtype=float).reshape(4, 2)
    d = pts - x0
    rho = np.linalg.norm(d, axis=1)
    if np.any(rho <= 0):
        raise ValueError("neighbor coincides with the center")
    C = d @ nu
    S = d @ _perp(nu)
    tol = ALIGN_RTOL * rho
    expected = np.array([1.0, 1.0, -1.0, -1.0])
    if np.any(expected * S < -tol):
        raise ValueError("neighbors are not in quadrant order (q1, q2, q3, q4)")
    a, degenerate = _pair_solve(C[None], S[None], rho[None])
    if degenerate[0]:
        raise DegenerateDenominator(
            "axis pseudo-points collapse; neighbors do not straddle the direction"
        )
    return a[0]


def _pair_coeffs(ha, ka, hb, kb):
    """Two-point weights exact on affine functions: b.h = 1, b.k = 0."""
    den = ha * kb - hb * ka
    return kb / den, -ka / den, den


def first_deriv_coefficients(x0, direction, xa, xb):
    """One-sided first derivative weights on a straddling pair.

    Exact on affine functions; if a neighbor lies on the axis the standard
    two point difference on that neighbor alone is returned.
    """
    x0 = np.asarray(x0, dtype=float)
    e = np.asarray(direction, dtype=float)
    da = np.asarray(xa, dtype=float) - x0
    db = np.asarray(xb, dtype=float) - x0
    ha, ka = da @ e, da @ _perp(e)
    hb, kb = db @ e, db @ _perp(e)
    if ka * kb > 0 and abs(ka) > ALIGN_RTOL * np.linalg.norm(da):
        raise ValueError("neighbors must straddle the derivative axis")
    if abs(ka) <= ALIGN_RTOL * np.linalg.norm(da):
        return 1.0 / ha, 0.0
    if abs(kb) <= ALIGN_RTOL * np.linalg.norm(db):
        return 0.0, 1.0 / hb
    ba, bb, den = _pair_coeffs(ha, ka, hb, kb)
    scale = max(np.linalg.norm(da), np.linalg.norm(db)) ** 2
    if abs(den) < DEGENERATE_RTOL * scale:
        raise DegenerateDenominator(f"first derivative denominator {den:.3e}")
    return ba, bb


def boundary_direction_coefficients(x0, n, x1, x2):
    """Monotone weights for the outward directional derivative at a boundary node.

    The inward ray ``x0 - t n`` must enter the triangle (x0, x1, x2); then the
    weights on ``u(x_i) - u(x_0)`` are both nonpositive and the difference is
    exact on affine functions.
    """
    x0 = np.asarray(x0, dtype=float)
    n = np.asarray(n, dtype=float)
    d1 = np.asarray(x1, dtype=float) - x0
    d2 = np.asarray(x2, dtype=float) - x0
    scale = max(np.linalg.norm(d1), np.linalg.norm(d2))
    h1, k1 = d1 @ n, d1 @ _perp(n)
    h2, k2 = d2 @ n, d2 @ _perp(n)
    if h1 > 1e-10 * scale or h2 > 1e-10 * scale:
        raise ConvexHullViolation("neighbors must lie on the inward side")
    if k1 * k2 > ALIGN_RTOL * scale**2:
        raise ConvexHullViolation("neighbors must straddle the inward ray")
    det = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(det) < DEGENERATE_RTOL * scale**2:
        raise DegenerateDenominator(f"boundary triangle is degenerate (det {det:.3e})")
    alpha = (-(n[0]) * d2[1] + n[1] * d2[0]) / det
    beta = (d1[0] * (-n[1]) + d1[1] * n[0]) / det
    if alpha < -1e-10 / scale or beta < -1e-10 / scale:
        raise ConvexHullViolation("inward ray leaves the triangle")
    if abs(k1) <= ALIGN_RTOL * scale:
        return 1.0 / h1, 0.0
    if abs(k2) <= ALIGN_RTOL * scale:
        return 0.0, 1.0 / h2
    b1, b2, den = _pair_coeffs(h1, k1, h2, k2)
    return b1, b2


def _triangle_search(x0, n_x, cand_ids, cand_pts, normals):
    """Best boundary triangle per direction, vectorized over directions.

    Candidates must be pre-sorted by (distance, id).  For each direction the
    valid pair minimizing max(|x1-x0|, |x2-x0|) is returned (ids), or -1 when
    none exists.  Directions with ``n . n_x <= 0`` are never admissible.
    """
    K = len(cand_ids)
    n_dirs = len(normals)
    tri = np.full((n_dirs, 2), -1, dtype=np.int64)
    adm = normals @ n_x > 0.0
    if K < 2 or not np.any(adm):
        return tri, adm & False

    d = cand_pts - x0
    rho = np.linalg.norm(d, axis=1)
    h = d @ normals.T                      # (K, n_dirs)
    h_ok = h <= 1e-10 * rho[:, None]

    ii, jj = np.triu_indices(K, k=1)       # pairs ordered by (j, i): max rho ascending
    order = np.lexsort((ii, jj))
    ii, jj = ii[order], jj[order]
    det = d[ii, 0] * d[jj, 1] - d[ii, 1] * d[jj, 0]
    det_ok = np.abs(det) > 1e-12 * rho[ii] * rho[jj]
    safe_det = np.where(det_ok, det, 1.0)
    # Solve -n = alpha d_i + beta d_j per (pair, direction).
    alpha = (np.outer(d[jj, 0], normals[:, 1]) - np.outer(d[jj, 1], normals[:, 0])) / safe_det[:, None]
    beta = (np.outer(d[ii, 1], normals[:, 0]) - np.outer(d[ii, 0], normals[:, 1])) / safe_det[:, None]
    valid = (
        (alpha >= -1e-10)
        & (beta >= -1e-10)
        & det_ok[:, None]
        & h_ok[ii]
        & h_ok[jj]
        & adm[None, :]
    )
    found = valid.any(axis=0)
    first = np.argmax(valid, axis=0)
    hit = np.flatnonzero(found)
    tri[hit, 0] = cand_ids[ii[first[hit]]]
    tri[hit, 1] = cand_ids[jj[first[hit]]]
    return tri, found & adm


def find_boundary_triangle(mesh: QuadMesh, domain: ConvexBody, node, n, search_factor=3.0):
    """Neighbor pair (x1, x2) for the boundary directional derivative at ``node``.

    Searches nodes within ``search_factor * h`` and returns the valid pair
    minimizing the larger neighbor distance (ties by node id); raises
    :class:`NoValidTriangle` when none exists.
    """
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n)
    x0 = mesh.points[node]
    n_x = domain.outward_normal(x0)
    ids = mesh.points_in_ball(x0, search_factor * mesh.params.h)
    ids = ids[ids != node]
    if len(ids) < 2:
        raise NoValidTriangle(node, n)
    pts = mesh.points[ids]
    rho = np.linalg.norm(pts - x0, axis=1)
    order = np.lexsort((ids, rho))
    ids, pts = ids[order], pts[order]
    tri, ok = _triangle_search(x0, n_x, ids, pts, n[None, :])
    if not ok[0]:
        raise NoValidTriangle(node, n)
    return int(tri[0, 0]), int(tri[0, 1])


class StencilCache:
    """All stencils of a mesh, stored as flat arrays for vectorized evaluation.

    Interior nodes carry one second-derivative stencil per direction of the
    half-turn set plus the two coordinate-axis stencils (used by the
    Lax-Friedrichs regularization and gradient extraction), with first
    derivative weights and the per-node diffusion coefficient
    ``eps = max |b_j| / a_j``.  Boundary nodes carry a triangle and weight
    pair per admissible full-circle direction; directions whose triangle
    search fails (possible at polygon corners and for nearly tangent
    directions) are dropped from the admissible set, and a node must keep at
    least two directions.
    """

    AXIS = np.array([[1.0, 0.0], [0.0, 1.0]])

    def __init__(self, mesh: QuadMesh, domain: ConvexBody, dirs: DirectionSet, search_factor=3.0):
        self.mesh = mesh
        self.domain = domain
        self.dirs = dirs
        self.search_factor = search_factor
        self._build_interior()
        self._build_boundary()

    # ---------------------------------------------------------------- build
    def _build_interior(self):
        mesh, dirs = self.mesh, self.dirs
        m = dirs.m
        M = m + 2
        NU = np.vstack([dirs.vectors, self.AXIS])
        NUP = np.stack([-NU[:, 1], NU[:, 0]], axis=1)
        ni = mesh.n_interior
        self.nbr = np.empty((ni, M, 4), dtype=np.int64)
        self.acoef = np.empty((ni, M, 4))
        self.bcoef = np.zeros((ni, 2, 4))
        self.eps = np.empty(ni)
        r = mesh.params.r

        for row, node in enumerate(mesh.interior_ids):
            ids = mesh.neighbors_in_ball(node, r)
            if len(ids) < 4:
                raise EmptyQuadrant(int(node), 1, NU[0])
            x0 = mesh.points[node]
            d = mesh.points[ids] - x0
            rho = np.linalg.norm(d, axis=1)
            order = np.lexsort((ids, rho))
            ids, d, rho = ids[order], d[order], rho[order]
            C = d @ NU.T
            S = d @ NUP.T
            sin2 = (S / rho[:, None]) ** 2
            tol = ALIGN_RTOL * rho[:, None]
            sel = np.empty((M, 4), dtype=np.intp)
            for q, mask in enumerate(_quadrant_masks(C, S, tol)):
                key = np.where(mask, sin2, np.inf)
                sel[:, q] = np.argmin(key, axis=0)
                bad = ~np.isfinite(key[sel[:, q], np.arange(M)])
                if np.any(bad):
                    j = int(np.argmax(bad))
                    raise EmptyQuadrant(int(node), q + 1, NU[j])
            cols = np.arange(M)[:, None]
            Csel = C[sel, cols]
            Ssel = S[sel, cols]
            rsel = rho[sel]
            self.nbr[row] = ids[sel]
            self.acoef[row] = _stencil_weights(int(node), NU, Csel, Ssel, rsel)
            self.bcoef[row], self.eps[row] = _axis_first_derivs(
                int(node), Csel[m:], Ssel[m:], rsel[m:], self.acoef[row, m:]
            )

    def _build_boundary(self):
        mesh, dirs = self.mesh, self.dirs
        normals = dirs.full_vectors
        nb = mesh.n_boundary
        n_dirs = len(normals)
        self.bdy_normal = np.empty((nb, 2))
        self.adm = np.zeros((nb, n_dirs), dtype=bool)
        self.tri = np.full((nb, n_dirs, 2), -1, dtype=np.int64)
        self.tri_co = np.zeros((nb, n_dirs, 2))
        self.dropped = np.zeros(nb, dtype=np.int64)
        radius = self.search_factor * mesh.params.h

        for row, node in enumerate(mesh.boundary_ids):
            x0 = mesh.points[node]
            n_x = self.domain.outward_normal(x0)
            self.bdy_normal[row] = n_x
            ids = mesh.points_in_ball(x0, radius)
            ids = ids[ids != node]
            if len(ids) < 2:
                raise NoValidTriangle(int(node))
            pts = mesh.points[ids]
            rho = np.linalg.norm(pts - x0, axis=1)
            order = np.lexsort((ids, rho))
            ids, pts = ids[order], pts[order]
            tri, ok = _triangle_search(x0, n_x, ids, pts, normals)
            requested = normals @ n_x > 0.0
            self.dropped[row] = int(np.sum(requested & ~ok))
            if np.sum(ok) < 2:
                raise NoValidTriangle(int(node))
            self.adm[row] = ok
            self.tri[row] = tri
            for j in np.flatnonzero(ok):
                b1, b2 = boundary_direction_coefficients(
                    x0, normals[j], mesh.points[tri[j, 0]], mesh.points[tri[j, 1]]
                )
                self.tri_co[row, j] = (b1, b2)

    # ---------------------------------------------------------------- views
    @property
    def m(self):
        return self.dirs.m

    def interior_row(self, node):
        row = np.searchsorted(self.mesh.interior_ids, node)
        if row >= self.mesh.n_interior or self.mesh.interior_ids[row] != node:
            raise KeyError(f"node {node} is not interior")
        return int(row)

    def boundary_row(self, node):
        row = np.searchsorted(self.mesh.boundary_ids, node)
        if row >= self.mesh.n_boundary or self.mesh.boundary_ids[row] != node:
            raise KeyError(f"node {node} is not a boundary node")
        return int(row)

    def second_deriv_stencil(self, node, dir_index):
        row = self.interior_row(node)
        x0 = self.mesh.points[node]
        nbr = self.nbr[row, dir_index]
        d = self.mesh.points[nbr] - x0
        nu = np.vstack([self.dirs.vectors, self.AXIS])[dir_index]
        C = d @ nu
        S = d @ _perp(nu)
        return SecondDerivStencil(
            center=int(node),
            direction=nu,
            neighbors=nbr.copy(),
            coefficients=self.acoef[row, dir_index].copy(),
            rho=np.hypot(C, S),
            phi=np.arctan2(S, C),
        )

    def first_deriv_stencil(self, node, axis, variant):
        row = self.interior_row(node)
        m = self.m
        nbr = self.nbr[row, m + axis]
        b = self.bcoef[row, axis]
        direction = self.AXIS[axis]
        if variant == "forward":
            keep = [0, 3]
        elif variant == "backward":
            keep = [1, 2]
        elif variant == "centered":
            return FirstDerivStencil(int(node), direction, "centered", nbr.copy(), 0.5 * b)
        else:
            raise ValueError(f"unknown variant {variant!r}")
        return FirstDerivStencil(int(node), direction, variant, nbr[keep], b[keep])

    def dump_csv(self, path):
        """Stencil audit dump: one row per (node, direction)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["node_id", "dir_index", "n1", "n2", "n3", "n4", "a1", "a2", "a3", "a4"]
            )
            for row, node in enumerate(self.mesh.interior_ids):
                for j in range(self.m + 2):
                    writer.writerow(
                        [int(node), j, *self.nbr[row, j], *self.acoef[row, j]]
                    )


def _stencil_weights(node, NU, C, S, rho):
    """Second-derivative weights for all directions of one node; (M, 4) inputs."""
    out, degenerate = _pair_solve(C, S, rho)
    if np.any(degenerate):
        j = int(np.argmax(degenerate))
        raise DegenerateDenominator(
            f"degenerate stencil at node {node}, direction {j} "
            f"({NU[j][0]:+.4f}, {NU[j][1]:+.4f})"
        )
    bad = out.min(axis=1) < -1e-12 * np.abs(out).max(axis=1)
    if np.any(bad):
        j = int(np.argmax(bad))
        raise DegenerateDenominator(
            f"negative stencil weight at node {node}, direction {j}: {out[j]}"
        )
    return out


def _axis_first_derivs(node, C, S, rho, a):
    """Forward/backward weights on the two axis stencils plus eps = max |b|/a.

    Slot layout per axis: (b_1, b_2, b_3, b_4) with the forward pair in slots
    (1, 4) and the backward pair in slots (2, 3).
    """
    b = np.zeros((2, 4))
    for axis in range(2):
        for sa, sb in ((0, 3), (1, 2)):
            ha, ka, ra = C[axis, sa], S[axis, sa], rho[axis, sa]
            hb, kb, rb = C[axis, sb], S[axis, sb], rho[axis, sb]
            if abs(ka) <= ALIGN_RTOL * ra:
                b[axis, sa] = 1.0 / ha
            elif abs(kb) <= ALIGN_RTOL * rb:
                b[axis, sb] = 1.0 / hb
            else:
                ba, bb, den = _pair_coeffs(ha, ka, hb, kb)
                if abs(den) < DEGENERATE_RTOL * max(ra, rb) ** 2:
                    raise DegenerateDenominator(
                        f"degenerate first derivative pair at node {node}, axis {axis}"
                    )
                b[axis, sa], b[axis, sb] = ba, bb
    live = a > 0
    if np.any(~live & (np.abs(b) > 0)):
        raise DegenerateDenominator(
            f"first derivative weight without matching second derivative weight at node {node}"
        )
    eps = float(np.max(np.abs(b[live]) / a[live]))
    return b, eps


def moment_residuals(cache: StencilCache):
    """Moment residuals of every cached second-derivative stencil.

    Returns an (n_interior, m + 2, 4) array stacking |sum a C|, |sum a S|,
    |sum a C S| and |sum a C^2 - 2| on the last axis.  The first, second and
    fourth are identities of the construction and must sit at round-off; the
    cross moment is the scheme's leading consistency term and only shrinks
    with the alignment angles.
    """
    mesh, dirs = cache.mesh, cache.dirs
    NU = np.vstack([dirs.vectors, StencilCache.AXIS])
    NUP = np.stack([-NU[:, 1], NU[:, 0]], axis=1)
    x0 = mesh.points[mesh.interior_ids][:, None, None, :]
    d = mesh.points[cache.nbr] - x0
    C = np.einsum("nmqd,md->nmq", d, NU)
    S = np.einsum("nmqd,md->nmq", d, NUP)
    a = cache.acoef
    res = np.stack(
        [
            np.abs((a * C).sum(-1)),
            np.abs((a * S).sum(-1)),
            np.abs((a * C * S).sum(-1)),
            np.abs((a * C * C).sum(-1) - 2.0),
        ],
        axis=-1,
    )
    return res
