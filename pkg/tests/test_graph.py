"""Residual evaluation, whitening, linearization, and parameter storage."""

import numpy as np
import pytest

from smoothlearn import autodiff as ad
from smoothlearn import factors, lie, solvers
from smoothlearn.errors import ContractError, FormatError
from smoothlearn.graph import (
    ConstantDiagonal,
    Factor,
    FactorGraph,
    FixedDiagonal,
    ParameterStore,
    VariableAssignment,
    linearize,
    map_cost,
    whitened_residuals,
)

from chains import chain_to_graph, linear_measurement_factor, prior_factor
from oracles import central_diff, chain_joint_nll, rel_err, sample_chain


def _single_prior_graph(mu, p_diag, x):
    graph = FactorGraph()
    graph.add_variable(lie.ManifoldKind.euclidean(len(mu)))
    graph.add_factor(prior_factor(0, mu, p_diag))
    return graph, VariableAssignment(graph, [np.asarray(x, dtype=np.float64)])


class TestWhitenedResiduals:
    def test_zero_at_measured_value(self):
        graph, x = _single_prior_graph([1.0, 2.0], [1.0, 1.0], [1.0, 2.0])
        np.testing.assert_array_equal(whitened_residuals(graph, x, {}), np.zeros(2))

    def test_identity_whitening(self):
        graph, x = _single_prior_graph([1.0, 0.0], [1.0, 1.0], [0.0, 0.0])
        wr = whitened_residuals(graph, x, {})
        np.testing.assert_allclose(wr, [1.0, 0.0])
        assert map_cost(graph, x, {}) == pytest.approx(0.5)

    def test_sqrt_precision_scales_residual(self):
        # r = 2 with sqrt precision 3 whitens to 6; Mahalanobis norm 36.
        graph, x = _single_prior_graph([2.0], [1.0 / 9.0], [0.0])
        wr = whitened_residuals(graph, x, {})
        np.testing.assert_allclose(wr, [6.0])
        assert np.dot(wr, wr) == pytest.approx(36.0)

    def test_map_cost_half_squared_norm(self):
        rng = np.random.default_rng(0)
        chain = sample_chain(rng, d=3, m=2, horizon=5)
        graph, _ = chain_to_graph(chain)
        x = VariableAssignment(
            graph, [rng.normal(size=3) for _ in range(chain.horizon)]
        )
        wr = whitened_residuals(graph, x, {})
        assert map_cost(graph, x, {}) == pytest.approx(0.5 * wr @ wr, abs=1e-12)

    def test_two_scalar_factors_cost(self):
        graph = FactorGraph()
        graph.add_variable(lie.ManifoldKind.euclidean(1))
        graph.add_factor(prior_factor(0, [1.0], [1.0]))
        graph.add_factor(prior_factor(0, [2.0], [1.0]))
        x = VariableAssignment(graph, [np.array([0.0])])
        assert map_cost(graph, x, {}) == pytest.approx(2.5)

    def test_matches_dense_gaussian_nll_up_to_constant(self):
        rng = np.random.default_rng(1)
        chain = sample_chain(rng, d=2, m=1, horizon=4)
        graph, _ = chain_to_graph(chain)
        xa = [rng.normal(size=2) for _ in range(4)]
        xb = [rng.normal(size=2) for _ in range(4)]
        cost_a = map_cost(graph, VariableAssignment(graph, xa), {})
        cost_b = map_cost(graph, VariableAssignment(graph, xb), {})
        nll_a = chain_joint_nll(chain, np.array(xa))
        nll_b = chain_joint_nll(chain, np.array(xb))
        assert cost_a - cost_b == pytest.approx(nll_a - nll_b, rel=1e-9)


class TestLinearize:
    def test_euclidean_prior_block(self):
        graph, x = _single_prior_graph([0.5, -1.0], [4.0, 0.25], [0.1, 0.2])
        jac = linearize(graph, x, {})
        np.testing.assert_allclose(
            jac.blocks[0][0], -np.diag([0.5, 2.0]), atol=1e-12
        )

    def test_se2_prior_block_at_zero_residual(self):
        anchor = lie.Se2State(lie.SE2.from_xytheta(1.0, 2.0, 0.3), 1.5, -0.2)
        graph = FactorGraph()
        graph.add_variable(lie.ManifoldKind.se2_vel())
        graph.add_factor(factors.make_se2_prior(anchor))
        x = VariableAssignment(graph, [anchor])
        jac = linearize(graph, x, {})
        w = np.array([1.0, 1.0, 1.0, 1e7, 1e7])
        np.testing.assert_allclose(jac.blocks[0][0], -np.diag(w), rtol=1e-9)

    def test_disk_transition_blocks_match_fd(self):
        rng = np.random.default_rng(2)
        graph = FactorGraph()
        graph.add_variable(lie.ManifoldKind.euclidean(4))
        graph.add_variable(lie.ManifoldKind.euclidean(4))
        factor = factors.make_disk_transition(0, [0.1, 0.1, 2.0, 2.0])
        graph.add_factor(factor)
        for _ in range(20):
            vals = [rng.normal(size=4) * 5, rng.normal(size=4) * 5]
            x = VariableAssignment(graph, vals)
            jac = linearize(graph, x, {})
            w = factor.noise.sqrt_precisions
            for which in (0, 1):

                def f(v, i):
                    pert = list(vals)
                    pert[which] = v
                    r = factors.disk_dynamics_step(pert[0]) - pert[1]
                    return (w * r)[i]

                fd = np.stack(
                    [
                        central_diff(lambda v, i=i: f(v, i), vals[which])
                        for i in range(4)
                    ]
                )
                assert rel_err(jac.blocks[0][which], fd) < 1e-5

    def test_sparsity_pattern_is_bipartite_adjacency(self):
        rng = np.random.default_rng(3)
        chain = sample_chain(rng, d=2, m=1, horizon=6)
        graph, _ = chain_to_graph(chain)
        x = VariableAssignment(graph, [rng.normal(size=2) for _ in range(6)])
        jac = linearize(graph, x, {})
        for factor, blocks in zip(graph.factors, jac.blocks):
            assert set(blocks) == set(factor.var_ids)
        ne = solvers.normal_equations(jac)
        for i, j in ne.entries:
            assert abs(i - j) <= 1  # chain: block tridiagonal Hessian

    def test_permutation_equivariance(self):
        # Relabeling the variables of a 3-variable graph permutes the solution.
        rng = np.random.default_rng(4)
        mu = [rng.normal(size=2) for _ in range(3)]
        diags = [rng.uniform(0.5, 2.0, 2) for _ in range(3)]

        def solve_with_order(order):
            graph = FactorGraph()
            for _ in range(3):
                graph.add_variable(lie.ManifoldKind.euclidean(2))
            for slot, var in enumerate(order):
                graph.add_factor(prior_factor(var, mu[slot], diags[slot]))
            x0 = VariableAssignment(graph, [np.zeros(2)] * 3)
            res = solvers.map_inference(graph, x0, {})
            return res.assignment


        direct = solve_with_order([0, 1, 2])
        permuted = solve_with_order([2, 0, 1])
        np.testing.assert_allclose(direct[0], permuted[2], atol=1e-10)
        np.testing.assert_allclose(direct[1], permuted[0], atol=1e-10)
        np.testing.assert_allclose(direct[2], permuted[1], atol=1e-10)


class TestGraphStructure:
    def test_unknown_variable_rejected(self):
        graph = FactorGraph()
        graph.add_variable(lie.ManifoldKind.euclidean(2))
        with pytest.raises(ContractError):
            graph.add_factor(prior_factor(3, [0.0, 0.0], [1.0, 1.0]))

    def test_unconstrained_variable_rejected(self):
        graph = FactorGraph()
        graph.add_variable(lie.ManifoldKind.euclidean(2))
        graph.add_variable(lie.ManifoldKind.euclidean(2))
        graph.add_factor(prior_factor(0, [0.0, 0.0], [1.0, 1.0]))
        with pytest.raises(ContractError):
            graph.validate()

    def test_noise_dim_mismatch_rejected(self):
        with pytest.raises(ContractError):
            Factor(
                kind="bad",
                var_ids=(0,),
                dim=2,
                residual=lambda v, p, e: v[0],
                noise=FixedDiagonal(np.ones(3)),
            )

    def test_debug_dump(self):
        rng = np.random.default_rng(5)
        chain = sample_chain(rng, d=2, m=1, horizon=3)
        graph, _ = chain_to_graph(chain)
        dump = graph.debug_dump().splitlines()
        assert len(dump) == len(graph.factors)
        assert dump[0] == "euclidean_prior vars=[0] dim=2"
        assert "linear_transition vars=[0,1] dim=2" in dump


class TestParameterStore:
    def test_register_get_set(self):
        ps = ParameterStore()
        ps.register("a.w", (2, 2), np.eye(2))
        ps.register("a.b", (2,))
        np.testing.assert_array_equal(ps.get("a.w"), np.eye(2))
        ps.set("a.b", [1.0, -1.0])
        np.testing.assert_array_equal(ps.values[4:], [1.0, -1.0])

    def test_duplicate_slice_rejected(self):
        ps = ParameterStore()
        ps.register("x", (1,))
        with pytest.raises(ContractError):
            ps.register("x", (2,))

    def test_nonfinite_init_rejected(self):
        ps = ParameterStore()
        with pytest.raises(ContractError):
            ps.register("x", (1,), [np.nan])

    def test_checkpoint_round_trip(self, tmp_path):
        ps = ParameterStore()
        rng = np.random.default_rng(6)
        ps.register("m.w1", (3, 2), rng.normal(size=(3, 2)))
        ps.register("m.b1", (3,), rng.normal(size=3))
        path = tmp_path / "ckpt.bin"
        ps.save(path)
        back = ParameterStore.load(path)
        assert back.names() == ps.names()
        np.testing.assert_array_equal(back.values, ps.values)
        np.testing.assert_array_equal(back.get("m.w1"), ps.get("m.w1"))

    def test_checkpoint_bad_file_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"not a checkpoint\n\x00\x01")
        with pytest.raises(FormatError):
            ParameterStore.load(path)

    def test_env_tracks_requested_slices(self):
        ps = ParameterStore()
        ps.register("a", (2,), [1.0, 2.0])
        ps.register("b", (1,), [3.0])
        tape = ad.Tape()
        env = ps.env(tape, tracked={"a"})
        assert env["a"].tracked and not env["b"].tracked


class TestConstantDiagonal:
    def test_tied_slice_broadcasts(self):
        ps = ParameterStore()
        ps.register("noise", (1,), [np.log(3.0)])
        nm = ConstantDiagonal("noise", 2)
        w = nm.sqrt_prec(ps.env(), None)
        np.testing.assert_allclose(w, [3.0, 3.0])

    def test_full_slice(self):
        ps = ParameterStore()
        ps.register("noise", (2,), [0.0, np.log(2.0)])
        nm = ConstantDiagonal("noise", 2)
        np.testing.assert_allclose(nm.sqrt_prec(ps.env(), None), [1.0, 2.0])
