"""ADMM NNLS against hand-derived cases and the enumeration oracle."""

import numpy as np
import pytest

from craftkit.errors import DataError
from craftkit.nnls import AdmmParams, NnlsSolution, kkt_residual, nnls_objective, solve_nnls

from oracles import nnls_dual, nnls_enumerate

TIGHT = AdmmParams(tol_primal=1e-10, tol_dual=1e-10)


class TestHandCases:
    def test_identity_fit_is_exact_interior(self):
        sol = solve_nnls(np.eye(2), np.eye(2), TIGHT)
        np.testing.assert_allclose(sol.U, np.eye(2), atol=1e-9)
        np.testing.assert_allclose(sol.dual_U, 0.0, atol=1e-9)
        assert sol.kkt_residual < 1e-8
        assert sol.converged

    def test_scalar_least_squares(self):
        # (1 - u)^2 + u^2 is minimized at u = 0.5 with objective 0.25
        A = np.array([[1.0, 0.0]])
        W = np.array([[1.0], [1.0]])
        sol = solve_nnls(A, W, TIGHT)
        np.testing.assert_allclose(sol.U, [[0.5]], atol=1e-9)
        assert nnls_objective(A, W, sol.U) == pytest.approx(0.25, abs=1e-9)

    def test_active_constraint_case(self):
        # unconstrained optimum (-1, 1) violates u1 >= 0; clamping u1 gives
        # u = (0, 0.5) with multiplier 0.5 on the clamped coordinate
        A = np.array([[0.0, 1.0]])
        W = np.array([[1.0, 1.0], [0.0, 1.0]])
        sol = solve_nnls(A, W, TIGHT)
        np.testing.assert_allclose(sol.U, [[0.0, 0.5]], atol=1e-8)
        np.testing.assert_allclose(sol.dual_U, [[0.5, 0.0]], atol=1e-8)
        assert sol.kkt_residual < 1e-8


class TestKktResidual:
    def test_exact_solution_scores_zero(self):
        assert kkt_residual(np.eye(2), np.eye(2), np.eye(2), np.zeros((2, 2))) < 1e-12

    def test_negative_entry_is_flagged(self):
        U = np.array([[-0.3, 1.0]])
        res = kkt_residual(np.zeros((1, 2)), np.eye(2), U, np.zeros((1, 2)))
        assert res >= 0.3

    def test_hand_case_after_convergence(self):
        A = np.array([[0.0, 1.0]])
        W = np.array([[1.0, 1.0], [0.0, 1.0]])
        sol = solve_nnls(A, W, TIGHT)
        assert kkt_residual(A, W, sol.U, sol.dual_U) < 1e-8


class TestAgainstEnumeration:
    def test_random_instances_match_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(60):
            n, p, r = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 4)
            A = rng.normal(size=(n, p))
            W = rng.normal(size=(p, r))
            sol = solve_nnls(A, W, TIGHT)
            _, obj_ref = nnls_enumerate(A, W)
            assert nnls_objective(A, W, sol.U) <= obj_ref + 1e-6
            assert sol.kkt_residual < 1e-8

    def test_duals_match_stationarity_form(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            A = rng.normal(size=(3, 4))
            W = rng.normal(size=(4, 2))
            sol = solve_nnls(A, W, TIGHT)
            np.testing.assert_allclose(sol.dual_U, nnls_dual(A, W, sol.U), atol=1e-7)


class TestProperties:
    def test_interior_solution_equals_unconstrained(self):
        rng = np.random.default_rng(3)
        hits = 0
        for _ in range(40):
            W, _ = np.linalg.qr(rng.normal(size=(4, 2)))  # well-conditioned columns
            U_true = rng.uniform(0.5, 2.0, size=(3, 2))
            A = U_true @ W.T
            sol = solve_nnls(A, W, TIGHT)
            if sol.U.min() > 1e-3:
                hits += 1
                U_ls = A @ W @ np.linalg.inv(W.T @ W)
                np.testing.assert_allclose(sol.U, U_ls, rtol=1e-8, atol=1e-10)
        assert hits >= 30  # construction makes interior the common case

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(5)
        A = rng.uniform(size=(5, 3))
        W = rng.uniform(size=(3, 2))
        perm = np.array([3, 0, 4, 1, 2])
        sol = solve_nnls(A, W, TIGHT)
        sol_p = solve_nnls(A[perm], W, TIGHT)
        np.testing.assert_allclose(sol_p.U, sol.U[perm], atol=1e-10)

    def test_batch_rows_match_individual_solves(self):
        # row separability: batched solves must agree with per-row solves
        rng = np.random.default_rng(23)
        A = rng.uniform(size=(50, 4))
        W = rng.uniform(size=(4, 3))
        batch = solve_nnls(A, W, TIGHT)
        for i in (0, 17, 49):
            single = solve_nnls(A[i:i + 1], W, TIGHT)
            np.testing.assert_allclose(batch.U[i], single.U[0], atol=1e-8)

    def test_extreme_data_scales(self):
        rng = np.random.default_rng(17)
        A = rng.uniform(size=(4, 3))
        W = rng.uniform(size=(3, 2))
        base = solve_nnls(A, W, TIGHT)
        for scale in (1e-8, 1e8):
            sol = solve_nnls(scale * A, scale * W, TIGHT)
            assert sol.converged
            # coefficients of the doubly-scaled problem are unchanged
            np.testing.assert_allclose(sol.U, base.U, rtol=1e-6, atol=1e-9)

    def test_rank_deficient_dictionary(self):
        W = np.array([[1.0, 1.0], [1.0, 1.0]])  # identical columns
        A = np.array([[1.0, 1.0]])
        sol = solve_nnls(A, W, TIGHT)
        # reconstruction is what matters; the split between columns is not unique
        np.testing.assert_allclose(sol.U @ W.T, A, atol=1e-7)

    def test_warm_start_converges_fast(self):
        rng = np.random.default_rng(9)
        A = rng.uniform(size=(6, 4))
        W = rng.uniform(size=(4, 3))
        cold = solve_nnls(A, W, TIGHT)
        warm = solve_nnls(A, W, TIGHT, warm=cold)
        assert warm.iterations <= cold.iterations / 5
        np.testing.assert_allclose(warm.U, cold.U, atol=1e-8)

    def test_objective_nonincreasing_along_iterations(self):
        # objective at growing iteration caps, cold-started each time so the
        # sequence tracks the solver trajectory
        rng = np.random.default_rng(13)
        for _ in range(5):
            A = rng.normal(size=(3, 4))
            W = rng.normal(size=(4, 2))
            objs = []
            for cap in (1, 2, 4, 8, 16, 32, 64, 128):
                sol = solve_nnls(A, W, AdmmParams(max_iters=cap,
                                                  tol_primal=1e-14,
                                                  tol_dual=1e-14))
                objs.append(nnls_objective(A, W, sol.U))
            diffs = np.diff(objs)
            assert np.all(diffs <= AdmmParams().tol_primal + 1e-12)

    def test_nonconvergence_is_flagged_not_raised(self):
        params = AdmmParams(max_iters=2, tol_primal=1e-14, tol_dual=1e-14)
        rng = np.random.default_rng(1)
        sol = solve_nnls(rng.uniform(size=(3, 3)), rng.uniform(size=(3, 2)), params)
        assert isinstance(sol, NnlsSolution)
        assert not sol.converged


class TestValidation:
    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            solve_nnls(np.ones((2, 3)), np.ones((4, 2)))

    def test_non_finite_input(self):
        with pytest.raises(DataError):
            solve_nnls(np.array([[np.nan, 1.0]]), np.ones((2, 1)))

    def test_bad_params(self):
        with pytest.raises(ValueError):
            AdmmParams(rho=0.0)
        with pytest.raises(ValueError):
            AdmmParams(tol_primal=-1.0)
