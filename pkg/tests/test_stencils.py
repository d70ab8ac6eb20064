import numpy as np
import pytest

from minlag.geometry import Disk, Square
from minlag.mesh import BOUNDARY, INTERIOR, MeshParams, QuadMesh, build_mesh
from minlag.stencils import (
    DirectionSet,
    EmptyQuadrant,
    NoValidTriangle,
    StencilCache,
    boundary_direction_coefficients,
    find_boundary_triangle,
    first_deriv_coefficients,
    moment_residuals,
    second_deriv_coefficients,
    select_quadrant_neighbors,
)
from tests.test_mesh import lattice_mesh


def pairing_system_solve(x0, nu, pts):
    """Independent oracle: solve the defining 4x4 linear system directly.

    Conditions: transverse cancellation within each straddling pair,
    annihilation of the axial linear term, unit curvature normalization.
    """
    d = np.asarray(pts, dtype=float) - np.asarray(x0, dtype=float)
    nu = np.asarray(nu, dtype=float)
    C = d @ nu
    S = d @ np.array([-nu[1], nu[0]])
    rows = np.array(
        [
            [S[0], 0.0, 0.0, S[3]],
            [0.0, S[1], S[2], 0.0],
            C,
            C * C,
        ]
    )
    rhs = np.array([0.0, 0.0, 0.0, 2.0])
    return np.linalg.solve(rows, rhs)


class TestDirectionSet:
    def test_half_turn_coverage(self):
        ds = DirectionSet(0.3)
        assert ds.m == 10
        v = ds.vectors
        assert np.allclose(np.linalg.norm(v, axis=1), 1.0)
        gaps = np.diff(np.concatenate([[0.0], ds.angles]))
        assert np.all(gaps <= 0.3 + 1e-12)
        assert ds.angles[-1] <= np.pi + 1e-12

    def test_full_circle_doubles(self):
        ds = DirectionSet(0.3)
        assert len(ds.full_vectors) == 2 * ds.m


class TestQuadrantSelection:
    def test_prefers_axis_points(self):
        mesh = lattice_mesh(5, r=1.6)
        center = int(np.flatnonzero((mesh.points == 0).all(axis=1))[0])
        sel = select_quadrant_neighbors(mesh, center, (1.0, 0.0), 1.5)
        pts = mesh.points[sel]
        # Aligned points win quadrants 1/4 and 2/3.
        assert np.allclose(pts[0], [1.0, 0.0])
        assert np.allclose(pts[3], [1.0, 0.0])
        assert np.allclose(pts[1], [-1.0, 0.0])
        assert np.allclose(pts[2], [-1.0, 0.0])

    def test_diagonal_only(self):
        pts = np.array([[0.0, 0.0], [1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
        tags = np.array([INTERIOR] + [BOUNDARY] * 4, dtype=np.int8)
        mesh = QuadMesh.from_points(pts, tags, MeshParams(h=1.0, r=2.0))
        sel = select_quadrant_neighbors(mesh, 0, (1.0, 0.0), 2.0)
        assert sorted(sel) == [1, 2, 3, 4]

    def test_empty_quadrant(self):
        pts = np.array([[0.0, 0.0], [1.0, 1.0], [-1.0, 1.0]])  # lower half empty
        tags = np.array([INTERIOR, BOUNDARY, BOUNDARY], dtype=np.int8)
        mesh = QuadMesh.from_points(pts, tags, MeshParams(h=1.0, r=2.0))
        with pytest.raises(EmptyQuadrant):
            select_quadrant_neighbors(mesh, 0, (1.0, 0.0), 2.0)

    def test_tie_break_smaller_rho(self):
        # (1, 1) and (2, 2) share the same angle; the closer one wins.
        pts = np.array(
            [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]]
        )
        tags = np.array([INTERIOR] + [BOUNDARY] * 5, dtype=np.int8)
        mesh = QuadMesh.from_points(pts, tags, MeshParams(h=1.0, r=4.0))
        sel = select_quadrant_neighbors(mesh, 0, (1.0, 0.0), 4.0)
        assert np.allclose(mesh.points[sel[0]], [1.0, 1.0])


class TestSecondDerivCoefficients:
    def test_aligned_pair_classical(self):
        h = 0.1
        a = second_deriv_coefficients(
            (0, 0), (1, 0), [(h, 0), (-h, 0), (-h, 0), (h, 0)]
        )
        assert a[0] == pytest.approx(100.0)
        assert a[1] == pytest.approx(100.0)
        assert a[2] == a[3] == 0.0

    @pytest.mark.parametrize("t", [0.1, 0.35, 0.9])
    def test_symmetric_box_half(self, t):
        pts = [(1, t), (-1, t), (-1, -t), (1, -t)]
        a = second_deriv_coefficients((0, 0), (1, 0), pts)
        assert np.allclose(a, 0.5, atol=1e-13)
        assert np.allclose(a, pairing_system_solve((0, 0), (1, 0), pts), atol=1e-12)

    def test_matches_defining_system_on_random_configs(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            ang = rng.uniform(0, np.pi)
            nu = np.array([np.cos(ang), np.sin(ang)])
            nup = np.array([-nu[1], nu[0]])
            pts = []
            for qc, qs in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
                c = qc * rng.uniform(0.2, 1.0)
                s = qs * rng.uniform(0.05, 0.6)
                pts.append(c * nu + s * nup)
            a = second_deriv_coefficients((0, 0), nu, pts)
            oracle = pairing_system_solve((0, 0), nu, pts)
            assert np.allclose(a, oracle, rtol=1e-9, atol=1e-12)
            assert np.all(a >= 0)
            # Held moment identities.
            d = np.asarray(pts) - 0.0
            C = d @ nu
            S = d @ nup
            assert abs(a @ C) < 1e-12
            assert abs(a @ S) < 1e-12
            assert abs(a @ (C * C) - 2.0) < 1e-12

    def test_exact_on_directional_quadratic(self):
        # Moment conditions force D_nn (x.nu)^2 = 2 exactly.
        rng = np.random.default_rng(11)
        nu = np.array([np.cos(0.7), np.sin(0.7)])
        pts = []
        for qc, qs in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
            nup = np.array([-nu[1], nu[0]])
            pts.append(qc * rng.uniform(0.3, 1) * nu + qs * rng.uniform(0.1, 0.5) * nup)
        a = second_deriv_coefficients((0, 0), nu, pts)
        phi = lambda p: (p @ nu) ** 2
        val = sum(ai * (phi(p) - phi(np.zeros(2))) for ai, p in zip(a, pts))
        assert val == pytest.approx(2.0, abs=1e-12)

    def test_one_sided_aligned_mixed(self):
        # Aligned forward point (duplicated by selection), generic backward
        # points: weights collapse onto the aligned point and stay exact.
        pts = [(0.5, 0.0), (-0.6, 0.3), (-0.4, -0.2), (0.5, 0.0)]
        a = second_deriv_coefficients((0, 0), (1, 0), pts)
        assert np.all(a >= 0)
        assert a[3] == 0.0
        val = sum(ai * (p[0] ** 2) for ai, p in zip(a, np.array(pts)))
        assert val == pytest.approx(2.0, abs=1e-12)


class TestFirstDerivCoefficients:
    def test_on_axis_forward(self):
        ba, bb = first_deriv_coefficients((0, 0), (1, 0), (0.1, 0.0), (0.3, -0.2))
        assert ba == pytest.approx(10.0)
        assert bb == 0.0

    def test_straddling_pair_half(self):
        ba, bb = first_deriv_coefficients((0, 0), (1, 0), (1.0, 1.0), (1.0, -1.0))
        assert ba == pytest.approx(0.5)
        assert bb == pytest.approx(0.5)

    def test_exact_on_affine(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            e = rng.normal(size=2)
            e /= np.linalg.norm(e)
            ep = np.array([-e[1], e[0]])
            xa = rng.uniform(0.2, 1) * e + rng.uniform(0.05, 0.5) * ep
            xb = rng.uniform(0.2, 1) * e - rng.uniform(0.05, 0.5) * ep
            ba, bb = first_deriv_coefficients((0, 0), e, xa, xb)
            p = rng.normal(size=2)
            approx = ba * (xa @ p) + bb * (xb @ p)
            assert approx == pytest.approx(e @ p, rel=1e-10, abs=1e-12)

    def test_annihilates_constants(self):
        ba, bb = first_deriv_coefficients((0, 0), (1, 0), (0.7, 0.4), (0.9, -0.1))
        # Weights act on differences, so constants drop out by construction.
        assert ba * 0.0 + bb * 0.0 == 0.0


class TestBoundaryDirectionCoefficients:
    def test_backward_difference(self):
        h = 0.1
        c1, c2 = boundary_direction_coefficients((0, 0), (0, 1), (0, -h), (0.05, -h))
        assert c1 == pytest.approx(-10.0)
        assert c2 == 0.0

    def test_symmetric_pair(self):
        c1, c2 = boundary_direction_coefficients((0, 0), (1, 0), (-1, 0.5), (-1, -0.5))
        assert c1 == pytest.approx(-0.5)
        assert c2 == pytest.approx(-0.5)
        # Exact on u = x . n.
        val = c1 * (-1.0) + c2 * (-1.0)
        assert val == pytest.approx(1.0)

    def test_nonpositive_weights(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            ang = rng.uniform(0, 2 * np.pi)
            n = np.array([np.cos(ang), np.sin(ang)])
            npp = np.array([-n[1], n[0]])
            x1 = -rng.uniform(0.2, 1) * n + rng.uniform(0.01, 0.5) * npp
            x2 = -rng.uniform(0.2, 1) * n - rng.uniform(0.01, 0.5) * npp
            c1, c2 = boundary_direction_coefficients((0, 0), n, x1, x2)
            assert c1 <= 1e-12 and c2 <= 1e-12

    def test_hull_violation(self):
        from minlag.stencils import ConvexHullViolation

        with pytest.raises(ConvexHullViolation):
            boundary_direction_coefficients((0, 0), (1, 0), (1.0, 0.5), (1.0, -0.5))
        with pytest.raises(ConvexHullViolation):
            # Both on the same side of the inward ray.
            boundary_direction_coefficients((0, 0), (1, 0), (-1.0, 0.5), (-1.0, 0.3))


class TestFindBoundaryTriangle:
    def test_disk_mesh_valid_pairs(self):
        domain = Disk()
        mesh = build_mesh(domain, MeshParams(h=0.3))
        node = int(mesh.boundary_ids[0])
        n = domain.outward_normal(mesh.points[node])
        i, j = find_boundary_triangle(mesh, domain, node, n)
        # The returned pair supports a monotone difference.
        c1, c2 = boundary_direction_coefficients(
            mesh.points[node], n, mesh.points[i], mesh.points[j]
        )
        assert c1 <= 1e-12 and c2 <= 1e-12

    def test_straddles_normal_ray(self):
        domain = Disk()
        mesh = build_mesh(domain, MeshParams(h=0.3))
        node = int(mesh.boundary_ids[3])
        x0 = mesh.points[node]
        n = domain.outward_normal(x0)
        i, j = find_boundary_triangle(mesh, domain, node, n)
        perp = np.array([-n[1], n[0]])
        k1 = (mesh.points[i] - x0) @ perp
        k2 = (mesh.points[j] - x0) @ perp
        assert k1 * k2 <= 1e-12

    def test_isolated_node_raises(self):
        pts = np.vstack([Disk().boundary_points(8), [[5.0, 0.0]]])
        tags = np.array([BOUNDARY] * 8 + [INTERIOR], dtype=np.int8)
        mesh = QuadMesh.from_points(pts, tags, MeshParams(h=0.25))
        with pytest.raises(NoValidTriangle):
            find_boundary_triangle(mesh, Disk(), 0, (1.0, 0.0))


@pytest.fixture(scope="module")
def disk_cache():
    domain = Disk()
    mesh = build_mesh(domain, MeshParams(h=0.25))
    dirs = DirectionSet(mesh.params.dtheta)
    return StencilCache(mesh, domain, dirs)


class TestStencilCache:
    def test_moment_residuals_tiny(self, disk_cache):
        res = moment_residuals(disk_cache)
        r = disk_cache.mesh.params.r
        bound = np.maximum(1e-10 * disk_cache.acoef.max(axis=-1) * r**2, 1e-12)
        # Held identities sit at round-off; the cross moment (column 2) is the
        # scheme's consistency term, not an identity.
        for col in (0, 1, 3):
            assert np.all(res[..., col] <= bound)

    def test_positive_weights(self, disk_cache):
        assert np.all(disk_cache.acoef >= -1e-14)
        assert np.all(disk_cache.acoef.sum(axis=-1) > 0)

    def test_forward_weights_nonnegative(self, disk_cache):
        b = disk_cache.bcoef
        assert np.all(b[:, :, [0, 3]] >= -1e-12)
        assert np.all(b[:, :, [1, 2]] <= 1e-12)

    def test_eps_dominates(self, disk_cache):
        m = disk_cache.m
        a = disk_cache.acoef[:, m:, :]
        b = disk_cache.bcoef
        live = a > 0
        ratios = np.where(live, np.abs(b) / np.where(live, a, 1.0), 0.0)
        assert np.all(ratios <= disk_cache.eps[:, None, None] + 1e-12)

    def test_boundary_admissible_counts(self, disk_cache):
        assert np.all(disk_cache.adm.sum(axis=1) >= 2)
        # On a smooth domain nearly every requested direction succeeds.
        assert disk_cache.dropped.sum() <= 0.05 * disk_cache.adm.size

    def test_boundary_weights_nonpositive(self, disk_cache):
        adm = disk_cache.adm
        assert np.all(disk_cache.tri_co[adm] <= 1e-12)

    def test_square_corner_directions_dropped_not_fatal(self):
        domain = Square(1.1)
        mesh = build_mesh(domain, MeshParams(h=0.2))
        cache = StencilCache(mesh, domain, DirectionSet(mesh.params.dtheta))
        assert np.all(cache.adm.sum(axis=1) >= 2)

    def test_consistency_on_quadratics(self, disk_cache):
        # The surviving Taylor term is 0.5 * sum a S^2 * phi_perp; quadratics
        # whose perp-perp second derivative vanishes are reproduced exactly.
        cache = disk_cache
        mesh = cache.mesh
        dirs = np.vstack([cache.dirs.vectors, StencilCache.AXIS])
        rng = np.random.default_rng(14)
        u_all = mesh.points[:, 0] ** 2  # D2 = diag(2, 0)
        for row in rng.choice(mesh.n_interior, size=10, replace=False):
            node = mesh.interior_ids[row]
            for j in (len(dirs) - 2, len(dirs) - 1):
                nbr = cache.nbr[row, j]
                a = cache.acoef[row, j]
                val = np.sum(a * (u_all[nbr] - u_all[node]))
                nu = dirs[j]
                exact = 2.0 * nu[0] ** 2
                d = mesh.points[nbr] - mesh.points[node]
                S = d @ np.array([-nu[1], nu[0]])
                slack = 0.5 * np.sum(a * S * S) * 2.0
                assert abs(val - exact) <= slack + 1e-10

    def test_views_and_dump(self, disk_cache, tmp_path):
        node = int(disk_cache.mesh.interior_ids[0])
        st = disk_cache.second_deriv_stencil(node, 0)
        assert st.center == node
        assert np.all(st.coefficients >= 0)
        fd = disk_cache.first_deriv_stencil(node, 0, "centered")
        assert fd.variant == "centered"
        out = tmp_path / "stencils.csv"
        disk_cache.dump_csv(out)
        assert out.read_text().startswith("node_id")


class TestEmpiricalOrder:
    def test_second_deriv_error_shrinks(self):
        # Quartic test function; the max stencil error over interior nodes
        # should drop with at least the formal O(sqrt(h)) rate.
        domain = Disk()

        def quartic(p):
            x, y = p[:, 0], p[:, 1]
            return 0.3 * x**4 + 0.25 * x**2 * y**2 + 0.1 * y**4 + 0.5 * x * y

        def exact_dnn(p, nu):
            x, y = p[:, 0], p[:, 1]
            uxx = 3.6 * x**2 + 0.5 * y**2
            uyy = 0.5 * x**2 + 1.2 * y**2
            uxy = x * y + 0.5
            return (
                uxx * nu[0] ** 2 + 2 * uxy * nu[0] * nu[1] + uyy * nu[1] ** 2
            )

        errs = []
        for h in (0.4, 0.2, 0.1):
            mesh = build_mesh(domain, MeshParams(h=h))
            cache = StencilCache(mesh, domain, DirectionSet(mesh.params.dtheta))
            u = quartic(mesh.points)
            worst = 0.0
            for row, node in enumerate(mesh.interior_ids):
                for j, nu in enumerate(cache.dirs.vectors):
                    nbr = cache.nbr[row, j]
                    val = np.sum(cache.acoef[row, j] * (u[nbr] - u[node]))
                    ex = exact_dnn(mesh.points[node][None], nu)[0]
                    worst = max(worst, abs(val - ex))
            errs.append(worst)
        order = np.log2(errs[0] / errs[2]) / 2
        assert errs[0] > errs[1] > errs[2]
        assert order >= 0.4
