"""Fixed-point solvers, PF eigenvalue estimation, and the weight projection."""

import numpy as np
import pytest

from cfgexec.solver import (
    DivergenceError,
    SolverConfig,
    anderson,
    naive_iterate,
    pf_eigenvalue,
    project_l1_ball,
    project_wellposed,
)

from oracles import dense_spectral_radius, l1_projection_bisection

COS_FIXED_POINT = 0.7390851332151607


class TestNaive:
    def test_affine_map(self):
        res = naive_iterate(lambda x: 0.5 * x + 1.0, np.array([0.0]), 60, 1e-8)
        assert res.converged
        assert res.x_star[0] == pytest.approx(2.0, abs=1e-6)
        assert res.iterations <= 30

    def test_identity_converges_immediately(self):
        x0 = np.array([1.0, -2.0])
        res = naive_iterate(lambda x: x, x0, 10, 1e-8)
        assert res.converged
        assert res.iterations == 1
        np.testing.assert_array_equal(res.x_star, x0)

    def test_cosine(self):
        res = naive_iterate(np.cos, np.array([0.0]), 200, 1e-10)
        assert res.converged
        assert res.x_star[0] == pytest.approx(COS_FIXED_POINT, abs=1e-8)

    def test_divergence_guard(self):
        with pytest.raises(DivergenceError):
            naive_iterate(lambda x: 10.0 * x + 1.0, np.array([1.0]), 50, 1e-8)


class TestAnderson:
    def test_m1_reduces_to_naive_exactly(self):
        f = lambda x: np.cos(x) * 0.9 + 0.1 * x
        x0 = np.array([0.3])
        a = anderson(f, x0, SolverConfig(m=1, max_iter=40), tol=1e-9)
        n = naive_iterate(f, x0, 40, 1e-9)
        assert a.residuals == n.residuals
        np.testing.assert_array_equal(a.x_star, n.x_star)

    def test_cosine_at_least_twice_as_fast(self):
        x0 = np.array([0.0])
        a = anderson(np.cos, x0, SolverConfig(max_iter=200), tol=1e-10)
        n = naive_iterate(np.cos, x0, 200, 1e-10)
        assert a.converged and n.converged
        assert a.x_star[0] == pytest.approx(COS_FIXED_POINT, abs=1e-8)
        assert a.iterations * 2 <= n.iterations

    def test_contractive_affine_map_in_r8(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(8, 8))
        m *= 0.6 / np.abs(np.linalg.eigvals(m)).max()
        b = rng.normal(size=8)
        f = lambda x: m @ x + b
        x0 = np.zeros(8)
        a = anderson(f, x0, SolverConfig(max_iter=100), tol=1e-10)
        n = naive_iterate(f, x0, 500, 1e-10)
        assert a.converged and n.converged
        assert np.abs(a.x_star - n.x_star).max() < 1e-6

    def test_shape_preserved(self):
        f = lambda x: 0.5 * x
        res = anderson(f, np.ones((3, 4)), SolverConfig(max_iter=80), tol=1e-9)
        assert res.x_star.shape == (3, 4)
        assert res.converged

    def test_matches_naive_fixed_point_on_2d_maps(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            m = rng.normal(size=(5, 5))
            m *= rng.uniform(0.3, 0.8) / np.abs(np.linalg.eigvals(m)).max()
            b = rng.normal(size=5)
            f = lambda x, m=m, b=b: np.tanh(m @ x + b)
            a = anderson(f, np.zeros(5), SolverConfig(max_iter=200), tol=1e-11)
            n = naive_iterate(f, np.zeros(5), 2000, 1e-11)
            assert a.converged and n.converged
            assert np.abs(a.x_star - n.x_star).max() < 1e-5


class TestPfEigenvalue:
    def test_permutation_matrix(self):
        assert pf_eigenvalue(np.array([[0.0, 1.0], [1.0, 0.0]])) == pytest.approx(1.0, abs=1e-10)

    def test_diagonal(self):
        assert pf_eigenvalue(np.diag([0.3, 2.5, 1.1])) == pytest.approx(2.5, abs=1e-10)

    def test_zero_matrix(self):
        assert pf_eigenvalue(np.zeros((4, 4))) == 0.0

    def test_random_5x5_matches_dense(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            m = rng.random((5, 5))
            assert pf_eigenvalue(m) == pytest.approx(dense_spectral_radius(m), abs=1e-8)

    def test_negative_entries_folded(self):
        m = np.array([[0.0, -2.0], [1.0, 0.0]])
        assert pf_eigenvalue(m) == pytest.approx(dense_spectral_radius(np.abs(m)), abs=1e-10)


class TestL1Projection:
    def test_interior_point_unchanged(self):
        v = np.array([0.2, -0.3, 0.1])
        np.testing.assert_array_equal(project_l1_ball(v, 1.0), v)

    def test_single_active_coordinate(self):
        np.testing.assert_allclose(project_l1_ball(np.array([3.0, 0.0]), 1.0),
                                   [1.0, 0.0], atol=1e-12)

    def test_symmetric_threshold(self):
        np.testing.assert_allclose(project_l1_ball(np.array([2.0, 2.0]), 2.0),
                                   [1.0, 1.0], atol=1e-12)

    def test_matches_bisection_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            dim = int(rng.integers(2, 7))
            v = rng.normal(size=dim) * 3.0
            r = float(rng.uniform(0.1, 3.0))
            np.testing.assert_allclose(project_l1_ball(v, r),
                                       l1_projection_bisection(v, r), atol=1e-7)

    def test_is_euclidean_nearest_feasible_point(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            v = rng.normal(size=3) * 2.0
            r = 1.0
            out = project_l1_ball(v, r)
            assert np.abs(out).sum() <= r + 1e-9
            d_out = np.linalg.norm(out - v)
            for _ in range(200):
                q = rng.normal(size=3)
                q = q / np.abs(q).sum() * r * rng.uniform(0.0, 1.0)
                assert d_out <= np.linalg.norm(q - v) + 1e-9


class TestProjectWellposed:
    def test_feasible_w_unchanged(self):
        w = np.array([[0.1, 0.2], [0.0, 0.3]])
        np.testing.assert_array_equal(project_wellposed(w, 1.0, 0.9), w)

    def test_inf_norm_bound_holds(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            w = rng.normal(size=(6, 6)) * 3.0
            lam = float(rng.uniform(0.2, 2.0))
            out = project_wellposed(w, lam, 0.9)
            assert np.abs(out).sum(axis=1).max() <= 0.9 / lam + 1e-9

    def test_zero_lambda_means_no_constraint(self):
        w = np.full((3, 3), 100.0)
        np.testing.assert_array_equal(project_wellposed(w, 0.0, 0.9), w)

    def test_gated_pf_never_exceeds_ungated(self):
        rng = np.random.default_rng(9)
        m = rng.random((5, 5))
        lam_full = pf_eigenvalue(m)
        for _ in range(100):
            a = rng.uniform(0.0, 1.0, size=5)
            assert pf_eigenvalue(m * a[None, :]) <= lam_full + 1e-9
