"""Normal equations, linear backends, Gauss-Newton and Levenberg-Marquardt."""

import numpy as np
import pytest

from smoothlearn import lie, solvers
from smoothlearn.errors import IndefiniteMatrixError, SolverError
from smoothlearn.graph import (
    BlockSparseJacobian,
    FactorGraph,
    VariableAssignment,
    linearize,
    map_cost,
    whitened_residuals,
)

from chains import chain_to_graph, prior_factor
from oracles import rel_err, rts_smoother, sample_chain


def _graph_of_dims(dims):
    graph = FactorGraph()
    for d in dims:
        graph.add_variable(lie.ManifoldKind.euclidean(d))
    return graph


class TestNormalEquations:
    def test_identity_jacobian(self):
        graph = _graph_of_dims([3])
        b = np.array([1.0, -2.0, 0.5])
        jac = BlockSparseJacobian(graph, [{0: np.eye(3)}], [b])
        ne = solvers.normal_equations(jac)
        np.testing.assert_allclose(ne.to_dense(), np.eye(3), atol=1e-14)
        np.testing.assert_allclose(ne.g, -b, atol=1e-14)

    def test_chain_is_block_tridiagonal(self):
        rng = np.random.default_rng(0)
        chain = sample_chain(rng, d=3, m=2, horizon=8)
        graph, x0 = chain_to_graph(chain)
        ne = solvers.normal_equations(linearize(graph, x0, {}))
        offsets = graph.tangent_offsets()
        h = ne.to_dense()
        for i in range(8):
            for j in range(8):
                blk = h[offsets[i] : offsets[i + 1], offsets[j] : offsets[j + 1]]
                if abs(i - j) > 1:
                    assert np.all(blk == 0.0)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        graph = _graph_of_dims([2, 3])
        j_blocks = {0: rng.normal(size=(4, 2)), 1: rng.normal(size=(4, 3))}
        r = rng.normal(size=4)
        jac = BlockSparseJacobian(graph, [j_blocks], [r])
        ne = solvers.normal_equations(jac)
        j_dense = np.hstack([j_blocks[0], j_blocks[1]])
        np.testing.assert_allclose(ne.to_dense(), j_dense.T @ j_dense, atol=1e-12)
        np.testing.assert_allclose(ne.g, -j_dense.T @ r, atol=1e-12)


def _random_chain_spd(rng, n_blocks, block_dim):
    """A random SPD block-tridiagonal system as NormalEquations."""
    dims = [block_dim] * n_blocks
    offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
    entries = {}
    mats = []
    for i in range(n_blocks):
        a = rng.normal(size=(block_dim, block_dim))
        entries[(i, i)] = a @ a.T + block_dim * 2.0 * np.eye(block_dim)
        if i + 1 < n_blocks:
            entries[(i, i + 1)] = rng.normal(size=(block_dim, block_dim)) * 0.3
    g = rng.normal(size=offsets[-1])
    return solvers.NormalEquations(int(offsets[-1]), offsets, entries, g)


class TestLinearBackends:
    def test_cg_identity_one_iteration(self):
        g = np.array([1.0, 2.0, 3.0])
        info = solvers.CGInfo()
        x = solvers.cg_solve(np.eye(3), g, info=info)
        np.testing.assert_allclose(x, g, atol=1e-14)
        assert info.iterations == 1

    def test_cg_diagonal_one_preconditioned_iteration(self):
        rng = np.random.default_rng(2)
        d = rng.uniform(0.5, 4.0, 10)
        g = rng.normal(size=10)
        info = solvers.CGInfo()
        x = solvers.cg_solve(np.diag(d), g, info=info)
        np.testing.assert_allclose(x, g / d, atol=1e-12)
        assert info.iterations == 1

    def test_cg_matches_cholesky_dense_spd(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(50, 50))
        h = a @ a.T + 50 * np.eye(50)
        g = rng.normal(size=50)
        x_cg = solvers.cg_solve(h, g)
        x_ch = solvers.cholesky_solve(h, g)
        assert np.linalg.norm(x_cg - x_ch) / np.linalg.norm(x_ch) < 1e-8

    def test_cg_nonconvergence_raises(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(20, 20))
        h = a @ a.T + 1e-3 * np.eye(20)
        g = rng.normal(size=20)
        with pytest.raises(SolverError):
            solvers.cg_solve(h, g, solvers.SolverConfig(backend="cg", cg_max_iters=2))

    def test_cholesky_scalar(self):
        np.testing.assert_allclose(
            solvers.cholesky_solve(np.array([[4.0]]), np.array([8.0])), [2.0]
        )

    def test_cholesky_block_tridiagonal_matches_dense(self):
        rng = np.random.default_rng(5)
        ne = _random_chain_spd(rng, 10, 4)
        x = solvers.solve_normal(ne, solvers.SolverConfig(backend="cholesky"))
        expected = np.linalg.solve(ne.to_dense(), ne.g)
        assert np.linalg.norm(x - expected) / np.linalg.norm(expected) < 1e-10

    def test_cholesky_zero_pivot_raises(self):
        h = np.diag([1.0, 0.0])
        with pytest.raises(IndefiniteMatrixError):
            solvers.cholesky_solve(h, np.ones(2))

    def test_cg_cholesky_agree_on_random_chains(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n_blocks = int(rng.integers(2, 40))
            dim = int(rng.integers(1, 6))
            ne = _random_chain_spd(rng, n_blocks, dim)
            x_cg = solvers.solve_normal(ne, solvers.SolverConfig(backend="cg"))
            x_ch = solvers.solve_normal(ne, solvers.SolverConfig(backend="cholesky"))
            assert np.linalg.norm(x_cg - x_ch) / np.linalg.norm(x_ch) < 1e-6


class TestGaussNewton:
    def test_linear_graph_one_step_convergence(self):
        rng = np.random.default_rng(7)
        chain = sample_chain(rng, d=3, m=2, horizon=6)
        graph, x0 = chain_to_graph(chain)
        delta1, x1 = solvers.gn_step(graph, x0, {})
        delta2, _ = solvers.gn_step(graph, x1, {})
        assert np.linalg.norm(delta2) < 1e-10

    def test_matches_rts_oracle(self):
        rng = np.random.default_rng(8)
        chain = sample_chain(rng, d=4, m=2, horizon=12)
        graph, x0 = chain_to_graph(chain)
        _, x1 = solvers.gn_step(graph, x0, {})
        smoothed, _ = rts_smoother(chain)
        got = np.stack(x1.values)
        assert np.max(np.abs(got - smoothed)) < 1e-8

    def test_zero_step_at_optimum(self):
        rng = np.random.default_rng(9)
        chain = sample_chain(rng, d=2, m=2, horizon=5)
        graph, x0 = chain_to_graph(chain)
        _, x_opt = solvers.gn_step(graph, x0, {})
        delta, _ = solvers.gn_step(graph, x_opt, {})
        assert np.linalg.norm(delta) < 1e-10


class TestLevenbergMarquardt:
    def test_linear_graph_matches_gn(self):
        rng = np.random.default_rng(10)
        chain = sample_chain(rng, d=3, m=2, horizon=6)
        graph, x0 = chain_to_graph(chain)
        _, x_gn = solvers.gn_step(graph, x0, {})
        res = solvers.lm_solve(graph, x0, {})
        diff = res.assignment.ominus(x_gn)
        assert np.max(np.abs(diff)) < 1e-6

    def test_costs_non_increasing(self):
        rng = np.random.default_rng(11)
        chain = sample_chain(rng, d=3, m=1, horizon=8)
        graph, x0 = chain_to_graph(chain)
        far = VariableAssignment(
            graph, [rng.normal(size=3) * 50 for _ in range(8)]
        )
        res = solvers.lm_solve(graph, far, {})
        costs = np.array(res.costs)
        assert np.all(np.diff(costs) <= 0)
        assert res.final_cost <= costs[0]

    def test_gradient_norm_small_at_convergence(self):
        rng = np.random.default_rng(12)
        chain = sample_chain(rng, d=3, m=2, horizon=6)
        graph, x0 = chain_to_graph(chain)
        res = solvers.lm_solve(graph, x0, {})
        jac = linearize(graph, res.assignment, {})
        ne = solvers.normal_equations(jac)
        assert np.linalg.norm(ne.g) < 1e-6

    def test_map_inference_dispatch(self):
        rng = np.random.default_rng(13)
        chain = sample_chain(rng, d=2, m=1, horizon=4)
        graph, x0 = chain_to_graph(chain)
        res_lm = solvers.map_inference(graph, x0, {}, solvers.SolverConfig())
        res_gn = solvers.map_inference(
            graph, x0, {}, solvers.SolverConfig(nonlinear="gn", max_steps=3)
        )
        diff = res_lm.assignment.ominus(res_gn.assignment)
        assert np.max(np.abs(diff)) < 1e-8


class TestSolverConfig:
    def test_bad_tolerances_rejected(self):
        from smoothlearn.errors import ContractError

        with pytest.raises(ContractError):
            solvers.SolverConfig(cg_tol=0.0)
        with pytest.raises(ContractError):
            solvers.SolverConfig(backend="qr")
