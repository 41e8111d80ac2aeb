import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rddpm import geometry as g
from rddpm.datasets import default_toy_reference, haar_orthogonal, uniform_sphere
from rddpm.solver import refine_to_manifold


class FixedNormal:
    """Stand-in generator returning a fixed draw."""

    def __init__(self, z):
        self.z = np.asarray(z, dtype=float)

    def standard_normal(self, shape):
        return np.broadcast_to(self.z, shape).copy()


def random_points(m, count, rng):
    if m.kind == "sphere":
        return uniform_sphere(m.n, rng, count)
    if m.kind == "so":
        k = m.params["k"]
        return haar_orthogonal(k, rng, count).reshape(count, k * k)
    ref = default_toy_reference(m.n // 3)
    pts = ref + 0.2 * rng.standard_normal((count, m.n))
    return refine_to_manifold(m, pts, target_tol=1e-10)


MANIFOLDS = {
    "circle": g.sphere(2),
    "sphere2": g.sphere(3),
    "so3": g.special_orthogonal(3),
    "so4": g.special_orthogonal(4),
    "dihedral": g.dihedral(5, (0, 1, 2, 3), math.radians(-70.0)),
}


class TestProjection:
    def test_sphere_axis(self):
        p = g.projection_matrix(g.sphere(3), np.array([1.0, 0, 0]))
        np.testing.assert_allclose(p, np.diag([0.0, 1, 1]), atol=1e-15)

    def test_circle_top(self):
        p = g.projection_matrix(g.sphere(2), np.array([0.0, 1.0]))
        np.testing.assert_allclose(p, [[1, 0], [0, 0]], atol=1e-15)

    def test_so3_identity_keeps_skew(self):
        m = g.special_orthogonal(3)
        w = np.zeros((3, 3))
        w[0, 1], w[1, 0] = 1.0, -1.0
        out = g.projection_matrix(m, np.eye(3).ravel()) @ w.ravel()
        np.testing.assert_allclose(out, w.ravel(), atol=1e-12)

    @pytest.mark.parametrize("name", sorted(MANIFOLDS))
    def test_projector_properties(self, name):
        m = MANIFOLDS[name]
        rng = np.random.default_rng(42)
        x = random_points(m, 1000, rng)
        p = g.projection_matrix(m, x)
        jac = m.jacobian(x)
        np.testing.assert_allclose(p @ p, p, atol=1e-8)
        np.testing.assert_allclose(p, np.swapaxes(p, -1, -2), atol=1e-8)
        np.testing.assert_allclose(p @ jac, 0.0, atol=1e-8)
        np.testing.assert_allclose(np.trace(p, axis1=-2, axis2=-1), m.d, atol=1e-8)

    @pytest.mark.parametrize("name", sorted(MANIFOLDS))
    def test_tangent_project_matches_matrix(self, name):
        m = MANIFOLDS[name]
        rng = np.random.default_rng(42)
        x = random_points(m, 50, rng)
        v = rng.standard_normal(x.shape)
        expected = np.einsum("bij,bj->bi", g.projection_matrix(m, x), v)
        np.testing.assert_allclose(g.tangent_project(m, x, v), expected, atol=1e-10)

    def test_rank_deficient(self):
        m = g.generic(2, 1, lambda x: x[..., :1] * 0, lambda x: np.zeros(x.shape + (1,)))
        with pytest.raises(g.RankDeficientError):
            g.projection_matrix(m, np.array([1.0, 0.0]))


class TestTangentBasis:
    def test_circle(self):
        u = g.tangent_basis(g.sphere(2), np.array([1.0, 0.0]))
        assert u.shape == (2, 1)
        np.testing.assert_allclose(np.abs(u[:, 0]), [0.0, 1.0], atol=1e-12)

    def test_sphere_pole(self):
        u = g.tangent_basis(g.sphere(3), np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(u.T @ u, np.eye(2), atol=1e-10)
        np.testing.assert_allclose(u[2], 0.0, atol=1e-12)

    @pytest.mark.parametrize("name", sorted(MANIFOLDS))
    def test_basis_reproduces_projector(self, name):
        m = MANIFOLDS[name]
        x = random_points(m, 200, np.random.default_rng(42))
        u = g.tangent_basis(m, x)
        assert u.shape == (200, m.n, m.d)
        np.testing.assert_allclose(np.swapaxes(u, -1, -2) @ u, np.broadcast_to(np.eye(m.d), (200, m.d, m.d)),
                                   atol=1e-10)
        np.testing.assert_allclose(u @ np.swapaxes(u, -1, -2), g.projection_matrix(m, x), atol=1e-8)
        np.testing.assert_allclose(np.einsum("bij,bik->bjk", m.jacobian(x), u), 0.0, atol=1e-8)


class TestTangentGaussian:
    def test_circle_example(self):
        v = g.sample_tangent_gaussian(g.sphere(2), np.array([1.0, 0.0]), FixedNormal([3.0, 2.0]))
        np.testing.assert_allclose(v, [0.0, 2.0], atol=1e-15)

    def test_zero_draw(self):
        v = g.sample_tangent_gaussian(g.sphere(3), np.array([0.0, 0, 1]), FixedNormal([0.0, 0, 0]))
        np.testing.assert_array_equal(v, 0.0)

    def test_covariance(self):
        rng = np.random.default_rng(42)
        x = np.tile([0.0, 0.0, 1.0], (100000, 1))
        v = g.sample_tangent_gaussian(g.sphere(3), x, rng)
        np.testing.assert_allclose(v.mean(axis=0), 0.0, atol=0.02)
        np.testing.assert_allclose(np.cov(v.T), np.diag([1.0, 1.0, 0.0]), atol=0.05)

    def test_tangency(self):
        m = g.special_orthogonal(3)
        rng = np.random.default_rng(42)
        x = random_points(m, 100, rng)
        v = g.sample_tangent_gaussian(m, x, rng)
        jtv = np.einsum("bij,bi->bj", m.jacobian(x), v)
        assert np.all(np.linalg.norm(jtv, axis=1) <= 1e-8 * (1 + np.linalg.norm(v, axis=1)))


class TestOverlap:
    def test_same_basis(self):
        u = g.tangent_basis(g.sphere(3), np.array([0.0, 0.6, 0.8]))
        assert g.basis_overlap_logdet(u, u) == pytest.approx(0.0, abs=1e-14)

    def test_orthogonal_circle(self):
        m = g.sphere(2)
        a = g.tangent_basis(m, np.array([1.0, 0.0]))
        b = g.tangent_basis(m, np.array([0.0, 1.0]))
        assert g.basis_overlap_logdet(a, b) == -np.inf

    def test_circle_angle(self):
        m = g.sphere(2)
        a = g.tangent_basis(m, np.array([1.0, 0.0]))
        b = g.tangent_basis(m, np.array([math.cos(0.3), math.sin(0.3)]))
        assert g.basis_overlap_logdet(a, b) == pytest.approx(math.log(math.cos(0.3)), abs=1e-12)
        assert g.basis_overlap_logdet(a, b) == pytest.approx(-0.0456917, abs=1e-6)

    @pytest.mark.parametrize("name", ["sphere2", "so3", "dihedral"])
    def test_symmetric_and_fast_path(self, name):
        m = MANIFOLDS[name]
        rng = np.random.default_rng(42)
        x = random_points(m, 20, rng)
        y = random_points(m, 20, rng)
        ux, uy = g.tangent_basis(m, x), g.tangent_basis(m, y)
        ab = g.basis_overlap_logdet(ux, uy)
        ba = g.basis_overlap_logdet(uy, ux)
        np.testing.assert_allclose(ab, ba, rtol=0, atol=1e-13)
        np.testing.assert_allclose(g.tangent_overlap_logdet(m, x, y), ab, atol=1e-9)

    def test_basis_choice_invariance(self):
        m = g.special_orthogonal(3)
        rng = np.random.default_rng(42)
        x, y = random_points(m, 2, rng)
        ux, uy = g.tangent_basis(m, x), g.tangent_basis(m, y)
        q = haar_orthogonal(3, rng)
        assert g.basis_overlap_logdet(ux @ q, uy) == pytest.approx(g.basis_overlap_logdet(ux, uy), abs=1e-12)


class TestExpm:
    def test_zero(self):
        np.testing.assert_array_equal(g.expm_skew(np.zeros((4, 4))), np.eye(4))

    def test_planar_rotation(self):
        th = math.pi / 3
        w = np.array([[0.0, -th], [th, 0.0]])
        np.testing.assert_allclose(g.expm_skew(w), [[0.5, -math.sqrt(3) / 2], [math.sqrt(3) / 2, 0.5]],
                                   atol=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 6))
    def test_inverse_and_orthogonality(self, seed, k):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((k, k))
        w = a - a.T
        w *= rng.uniform(0, 1) / max(np.linalg.norm(w), 1e-300)
        r = g.expm_skew(w)
        np.testing.assert_allclose(r @ g.expm_skew(-w), np.eye(k), atol=1e-10)
        np.testing.assert_allclose(r.T @ r, np.eye(k), atol=1e-10)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-10)

    def test_large_norm_still_orthogonal(self):
        rng = np.random.default_rng(42)
        a = rng.standard_normal((5, 5))
        w = 9.0 * (a - a.T) / np.linalg.norm(a - a.T)
        r = g.expm_skew(w)
        np.testing.assert_allclose(r.T @ r, np.eye(5), atol=1e-10)

    def test_not_skew(self):
        with pytest.raises(g.NotSkewError):
            g.expm_skew(np.eye(3))

    def test_norm_cap(self):
        w = np.array([[0.0, -11.0], [11.0, 0.0]])
        with pytest.raises(ValueError):
            g.expm_skew(w)

    def test_so_points_from_expm(self):
        rng = np.random.default_rng(42)
        m = g.special_orthogonal(4)
        for _ in range(20):
            a = rng.standard_normal((4, 4))
            s = g.expm_skew(a - a.T)
            assert np.max(np.abs(m.constraint(s.ravel()))) <= 1e-10


class TestBuiltins:
    def test_dimensions(self):
        assert (g.sphere(3).n, g.sphere(3).d) == (3, 2)
        so = g.special_orthogonal(10)
        assert (so.n, so.d, so.codim) == (100, 45, 55)
        dh = g.dihedral(22, (4, 6, 8, 14), -1.2)
        assert (dh.n, dh.d) == (66, 65)

    @pytest.mark.parametrize("name", sorted(MANIFOLDS))
    def test_jacobian_finite_differences(self, name):
        m = MANIFOLDS[name]
        pts = random_points(m, 10, np.random.default_rng(42))
        assert g.check_jacobian(m, pts, rtol=1e-5) <= 1e-5

    @pytest.mark.parametrize("name", sorted(MANIFOLDS))
    def test_full_rank_on_manifold(self, name):
        m = MANIFOLDS[name]
        pts = random_points(m, 100, np.random.default_rng(42))
        sv = np.linalg.svd(m.jacobian(pts), compute_uv=False)
        assert np.all(sv[:, -1] > 1e-10)

    def test_generic_validates_jacobian(self):
        def con(x):
            return (np.sum(x * x, axis=-1) - 1.0)[..., None]

        good = g.generic(3, 2, con, lambda x: 2 * x[..., None], probe_points=np.eye(3))
        assert good.kind == "generic"
        with pytest.raises(ValueError):
            g.generic(3, 2, con, lambda x: x[..., None], probe_points=np.eye(3))

    def test_bad_dimensions(self):
        with pytest.raises(ValueError):
            g.LevelSetManifold(3, 3, lambda x: x, lambda x: x)
        with pytest.raises(ValueError):
            g.dihedral(4, (0, 1, 1, 2), 0.0)


class TestDihedral:
    @staticmethod
    def reference_angle(p):
        b1, b2, b3 = p[1] - p[0], p[2] - p[1], p[3] - p[2]
        n1, n2 = np.cross(b1, b2), np.cross(b2, b3)
        return math.atan2(np.linalg.norm(b2) * np.dot(b1, n2), np.dot(n1, n2))

    def test_matches_standard_formula(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            p = rng.standard_normal((4, 3))
            assert g.dihedral_angle(p.ravel(), (0, 1, 2, 3)) == pytest.approx(self.reference_angle(p), abs=1e-12)

    def test_right_angle(self):
        p = np.array([[1.0, 0, 0], [0, 0, 0], [0, 0, 1], [0, 1, 1]])
        assert abs(g.dihedral_angle(p.ravel(), (0, 1, 2, 3))) == pytest.approx(math.pi / 2, abs=1e-12)
        assert g.dihedral_angle(p.ravel(), (0, 1, 2, 3)) == pytest.approx(self.reference_angle(p), abs=1e-12)

    def test_wrap(self):
        np.testing.assert_allclose(g.wrap_angle([math.pi, -math.pi, 3 * math.pi, 0.5]),
                                   [math.pi, math.pi, math.pi, 0.5], atol=1e-12)

    def test_constraint_across_branch_cut(self):
        m = g.dihedral(4, (0, 1, 2, 3), math.pi - 0.01)
        p = np.array([[1.0, 0, 0], [0, 0, 0], [0, 0, 1], [math.cos(-math.pi + 0.01), math.sin(-math.pi + 0.01), 1]])
        assert abs(m.constraint(p.ravel())[0]) == pytest.approx(0.02, abs=1e-9)
