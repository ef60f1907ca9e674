"""EKF baseline against dense Kalman oracles, plus end-to-end filter gradients."""

import numpy as np
import pytest

from smoothlearn import autodiff as ad
from smoothlearn import factors, filters, lie, solvers
from smoothlearn.graph import (
    FactorGraph,
    MeasurementPayload,
    ParameterStore,
    VariableAssignment,
)

from chains import chain_to_graph
from oracles import kalman_filter, rel_err, rts_smoother, sample_chain
from test_learning import _disk_graph


class TestPredict:
    def test_identity_dynamics_zero_process_noise(self):
        from smoothlearn.graph import Factor, FixedDiagonal

        def residual(values, payload, penv):
            return ad.sub(values[0], values[1])

        f = Factor(
            kind="identity_transition",
            var_ids=(0, 1),
            dim=3,
            residual=residual,
            noise=FixedDiagonal(np.full(3, 1e200)),  # covariance underflows to 0
            transition=lambda x, penv: x,
        )
        kind = lie.ManifoldKind.euclidean(3)
        p0 = np.diag([1.0, 2.0, 3.0])
        belief = filters.Belief(np.array([1.0, -1.0, 0.5]), p0)
        out = filters.ekf_predict(belief, f, {}, kind)
        np.testing.assert_allclose(ad.value_of(out.mean), belief.mean, atol=1e-14)
        np.testing.assert_allclose(ad.value_of(out.cov), p0, atol=1e-14)

    def test_linear_disk_predict_matches_oracle(self):
        rng = np.random.default_rng(0)
        q = np.array([0.1, 0.1, 2.0, 2.0])
        f = factors.make_disk_transition(0, q, drag=0.0)
        kind = lie.ManifoldKind.euclidean(4)
        a = np.block(
            [[np.eye(2), np.eye(2)], [-factors.DISK_SPRING * np.eye(2), np.eye(2)]]
        )
        for _ in range(10):
            mean = rng.normal(size=4) * 5
            c = rng.normal(size=(4, 4))
            p = c @ c.T + np.eye(4)
            out = filters.ekf_predict(filters.Belief(mean, p), f, {}, kind)
            np.testing.assert_allclose(ad.value_of(out.mean), a @ mean, atol=1e-10)
            np.testing.assert_allclose(
                ad.value_of(out.cov), a @ p @ a.T + np.diag(q), atol=1e-10
            )

    def test_covariance_stays_symmetric(self):
        rng = np.random.default_rng(1)
        f = factors.make_disk_transition(0, np.ones(4))
        kind = lie.ManifoldKind.euclidean(4)
        belief = filters.Belief(rng.normal(size=4), np.eye(4))
        for _ in range(50):
            belief = filters.ekf_predict(belief, f, {}, kind)
            cov = ad.value_of(belief.cov)
            assert np.max(np.abs(cov - cov.T)) < 1e-12


class TestUpdate:
    def _vision_setup(self, sqrt_prec):
        sensor = factors.make_disk_sensor("constant")
        ps = ParameterStore()
        sensor.register(ps, np.random.default_rng(2))
        ps.set("disk.vision.log_sqrt_prec", [np.log(sqrt_prec)])
        return sensor, ps

    def test_near_zero_precision_leaves_belief(self):
        sensor, ps = self._vision_setup(1e-8)
        payload = MeasurementPayload(np.array([10.0, 10.0]), 0.0)
        f = factors.make_disk_vision(0, sensor, payload)
        kind = lie.ManifoldKind.euclidean(4)
        mean = np.array([0.0, 0.0, 1.0, 1.0])
        belief = filters.Belief(mean, np.eye(4))
        out = filters.ekf_update(belief, f, ps.env(), kind)
        innovation_scale = np.linalg.norm([10.0, 10.0])
        shift = np.linalg.norm(ad.value_of(out.mean) - mean)
        assert shift < 1e-6 * innovation_scale

    def test_zero_innovation_keeps_mean(self):
        sensor, ps = self._vision_setup(1.0)
        payload = MeasurementPayload(np.array([3.0, -2.0]), 0.0)
        f = factors.make_disk_vision(0, sensor, payload)
        kind = lie.ManifoldKind.euclidean(4)
        belief = filters.Belief(np.array([3.0, -2.0, 0.4, 0.1]), np.eye(4))
        out = filters.ekf_update(belief, f, ps.env(), kind)
        np.testing.assert_allclose(ad.value_of(out.mean), belief.mean, atol=1e-12)


class TestAgainstDenseOracle:
    def test_filtered_means_match_kalman_filter(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            chain = sample_chain(rng, d=4, m=2, horizon=15)
            graph, _ = chain_to_graph(chain)
            beliefs = filters.ekf_run(graph, chain.mu0, {}, init_cov=chain.P0)
            means = np.stack([ad.value_of(b.mean) for b in beliefs])
            oracle_means, oracle_covs = kalman_filter(chain)
            assert np.max(np.abs(means - oracle_means)) < 1e-10
            covs = np.stack([ad.value_of(b.cov) for b in beliefs])
            assert np.max(np.abs(covs - oracle_covs)) < 1e-9

    def test_smoother_differs_from_filter_mid_trajectory(self):
        rng = np.random.default_rng(4)
        chain = sample_chain(rng, d=3, m=1, horizon=10)
        graph, x0 = chain_to_graph(chain)
        beliefs = filters.ekf_run(graph, chain.mu0, {}, init_cov=chain.P0)
        filtered = np.stack([ad.value_of(b.mean) for b in beliefs])
        res = solvers.map_inference(graph, x0, {})
        smoothed = np.stack(res.assignment.values)
        assert np.max(np.abs(filtered[4] - smoothed[4])) > 1e-6

    def test_smoother_beats_filter_in_expectation(self):
        rng = np.random.default_rng(5)
        filt_err = 0.0
        smooth_err = 0.0
        for _ in range(100):
            d, horizon = 3, 9
            chain = sample_chain(rng, d=d, m=1, horizon=horizon)
            # Re-simulate to keep the sampled true states.
            a, q, c, r = chain.A, chain.Q, chain.C, chain.R
            x = chain.mu0 + np.linalg.cholesky(chain.P0) @ rng.normal(0, 1, d)
            xs, zs = [], []
            for _ in range(horizon):
                xs.append(x.copy())
                zs.append(c @ x + np.linalg.cholesky(r) @ rng.normal(0, 1, 1))
                x = a @ x + np.linalg.cholesky(q) @ rng.normal(0, 1, d)
            chain.zs = np.array(zs)
            xs = np.array(xs)
            graph, x0 = chain_to_graph(chain)
            beliefs = filters.ekf_run(graph, chain.mu0, {}, init_cov=chain.P0)
            filtered = np.stack([ad.value_of(b.mean) for b in beliefs])
            smoothed = np.stack(
                solvers.map_inference(graph, x0, {}).assignment.values
            )
            mid = horizon // 2
            filt_err += np.sum((filtered[mid] - xs[mid]) ** 2)
            smooth_err += np.sum((smoothed[mid] - xs[mid]) ** 2)
        assert smooth_err <= filt_err


class TestEkfRun:
    def test_noiseless_true_parameters_tracks_exactly(self):
        graph, x_gt, ps, _ = _disk_graph(8, "constant", seed=6, obs_noise=0.0)
        est = filters.ekf_estimate(graph, x_gt[0], ps)
        diff = est.ominus(x_gt)
        assert np.max(np.abs(diff)) < 1e-8

    def test_gradients_match_fd(self):
        graph, x_gt, ps, _ = _disk_graph(5, "heteroscedastic", seed=7, obs_noise=1.5)
        loss, grads = filters.ekf_mse_loss(graph, x_gt, ps)
        assert loss > 0
        rng = np.random.default_rng(8)
        for name in ps.names():
            flat = ps.get(name).ravel()
            idxs = rng.choice(flat.size, size=min(3, flat.size), replace=False)
            for i in idxs:
                eps = 1e-6

                def f(v):
                    p2 = ps.copy()
                    vec = p2.get(name).copy().ravel()
                    vec[i] = v
                    p2.set(name, vec.reshape(p2.get(name).shape))
                    l, _ = filters.ekf_mse_loss(graph, x_gt, p2, trainable=set())
                    return l

                fd = (f(flat[i] + eps) - f(flat[i] - eps)) / (2 * eps)
                got = np.asarray(grads[name]).ravel()[i]
                assert abs(got - fd) / max(abs(fd), abs(got), 1e-6) < 1e-4, (name, i)

    def test_se2_manifold_filter_runs(self):
        rng = np.random.default_rng(9)
        sensor = factors.make_odom_sensor("constant")
        ps = ParameterStore()
        sensor.register(ps, rng)
        ps.register("odom.transition.log_sqrt_prec", (5,))
        horizon = 6
        state = lie.Se2State(lie.SE2.identity(), 1.0, 0.1)
        states = [state]
        for _ in range(horizon - 1):
            nxt = factors.se2_integrate(states[-1])
            states.append(lie.Se2State(nxt.pose, nxt.vel, nxt.omega))
        graph = FactorGraph()
        for _ in range(horizon):
            graph.add_variable(lie.ManifoldKind.se2_vel())
        for t in range(horizon - 1):
            graph.add_factor(factors.make_se2_transition(t))
        for t in range(horizon):
            payload = MeasurementPayload(
                np.array([states[t].vel, states[t].omega]), 1.0
            )
            graph.add_factor(factors.make_se2_velocity(t, sensor, payload))
        graph.add_factor(factors.make_se2_prior(states[0]))
        x_gt = VariableAssignment(graph, states)
        est = filters.ekf_estimate(graph, states[0], ps)
        diff = est.ominus(x_gt)
        assert np.max(np.abs(diff)) < 1e-6
