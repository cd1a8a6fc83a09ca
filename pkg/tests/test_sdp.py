"""The SDP layer: canonical form, solver, independent verification, and the
SDPA sparse interchange format."""

import numpy as np
import pytest
import scipy.sparse as sp

from roskit import sdp


def dense(M):
    return sp.coo_matrix(np.asarray(M, dtype=float))


def make_problem(block_dims, cons, obj_blocks=None, obj_free=None,
                 free_vars=0):
    constraints = [
        sdp.SdpConstraint({j: dense(A) for j, A in coeffs.items()},
                          np.asarray(fv, dtype=float), rhs)
        for coeffs, fv, rhs in cons]
    return sdp.SdpProblem(block_dims, free_vars, constraints,
                          {j: dense(C) for j, C in (obj_blocks or {}).items()},
                          np.zeros(free_vars) if obj_free is None
                          else np.asarray(obj_free, dtype=float))


class TestSolve:
    def test_min_trace_with_fixed_diagonal(self):
        # min tr(X) s.t. X_11 = 1, X_22 = 2, X PSD -> X = diag(1, 2)
        prob = make_problem(
            [2],
            [({0: [[1, 0], [0, 0]]}, [], 1.0),
             ({0: [[0, 0], [0, 1]]}, [], 2.0)],
            obj_blocks={0: np.eye(2)})
        sol = sdp.solve(prob)
        assert sol.status == "optimal"
        assert np.allclose(sol.blocks[0], np.diag([1.0, 2.0]), atol=1e-6)
        assert sol.primal_objective == pytest.approx(3.0, abs=1e-6)

    def test_off_diagonal_constraint(self):
        # X_11 = X_22 = 1, X_12 = 0.9 feasible; X_12 = 1.1 infeasible.
        def prob(rho):
            return make_problem(
                [2],
                [({0: [[1, 0], [0, 0]]}, [], 1.0),
                 ({0: [[0, 0], [0, 1]]}, [], 1.0),
                 ({0: [[0, 0.5], [0.5, 0]]}, [], rho)],
                obj_blocks={0: np.eye(2)})
        ok = sdp.solve(prob(0.9))
        assert ok.status == "optimal"
        assert ok.blocks[0][0, 1] == pytest.approx(0.9, abs=1e-6)
        bad = sdp.solve(prob(1.1))
        assert bad.status == "infeasible"

    def test_free_variable(self):
        # X - u I = 0 entrywise with X_11 = 2: minimize u subject to u >= 0
        # via PSD of 1x1 block. Checks the free-variable path end to end.
        prob = make_problem(
            [1],
            [({0: [[1.0]]}, [-1.0], 0.0),      # X_11 - u = 0
             ({}, [1.0], 2.0)],                # u = 2
            obj_free=[1.0], free_vars=1)
        sol = sdp.solve(prob)
        assert sol.status == "optimal"
        assert sol.free[0] == pytest.approx(2.0, abs=1e-7)
        assert sol.blocks[0][0, 0] == pytest.approx(2.0, abs=1e-6)

    def test_two_blocks(self):
        prob = make_problem(
            [1, 2],
            [({0: [[1.0]], 1: [[1, 0], [0, 1]]}, [], 3.0),
             ({1: [[1, 0], [0, -1]]}, [], 0.0)],
            obj_blocks={0: [[1.0]], 1: np.eye(2)})
        sol = sdp.solve(prob)
        assert sol.status == "optimal"
        # optimum puts nothing beyond the equality demands
        total = sol.blocks[0][0, 0] + np.trace(sol.blocks[1])
        assert total == pytest.approx(3.0, abs=1e-6)

    def test_tolerance_range_checked(self):
        prob = make_problem([1], [({0: [[1.0]]}, [], 1.0)],
                            obj_blocks={0: [[1.0]]})
        with pytest.raises(ValueError):
            sdp.solve(prob, tol=1e-2)
        with pytest.raises(ValueError):
            sdp.solve(prob, tol=1e-12)


class TestValidation:
    def test_asymmetric_coefficient_rejected(self):
        prob = make_problem([2], [({0: [[0, 1], [0, 0]]}, [], 1.0)],
                            obj_blocks={0: np.eye(2)})
        with pytest.raises(ValueError):
            prob.validate()

    def test_verify_solution_kkt(self):
        prob = make_problem(
            [2],
            [({0: [[1, 0], [0, 0]]}, [], 1.0),
             ({0: [[0, 0], [0, 1]]}, [], 2.0)],
            obj_blocks={0: np.eye(2)})
        sol = sdp.solve(prob)
        rep = sdp.verify_solution(prob, sol)
        assert rep["primal_residual"] < 1e-6
        assert rep["dual_residual"] < 1e-6
        assert rep["duality_gap"] < 1e-6
        assert rep["primal_psd"] and rep["dual_psd"]


class TestPsd:
    def test_is_psd_examples(self):
        assert sdp.is_psd(np.eye(3))
        assert sdp.is_psd(np.zeros((2, 2)))
        assert not sdp.is_psd(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_is_psd_boundary(self):
        # rank-deficient PSD passes with the relative shift
        v = np.array([[1.0], [1.0]])
        assert sdp.is_psd(v @ v.T)


class TestSdpa:
    def test_round_trip(self, tmp_path):
        prob = make_problem(
            [2, 1],
            [({0: [[1, 0], [0, 0]], 1: [[2.0]]}, [0.5], 1.0),
             ({0: [[0, 0.5], [0.5, 0]]}, [-1.0], 0.25)],
            obj_blocks={0: np.eye(2)}, obj_free=[1.5], free_vars=1)
        path = tmp_path / "prob.dat-s"
        sdp.export_sdpa(prob, path)
        m, dims, rhs, entries = sdp.parse_sdpa(path)
        assert m == 2
        # free variables are exported as a split diagonal block
        assert dims[-1] == -2
        assert dims[:2] == [2, 1]
        assert np.allclose(rhs, [1.0, 0.25])
        # every exported entry sits in the upper triangle
        assert all(i <= j for (_, _, i, j, _) in entries)

    def test_comments_skipped(self, tmp_path):
        path = tmp_path / "c.dat-s"
        path.write_text('"comment\n*another\n1\n1\n2\n1.0\n'
                        "0 1 1 1 1.0\n1 1 1 2 0.5\n")
        m, dims, rhs, entries = sdp.parse_sdpa(path)
        assert m == 1 and dims == [2] and rhs == [1.0]
        assert len(entries) == 2
