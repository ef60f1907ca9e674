"""Extended Kalman filter baseline sharing the factor-graph models.

The filter consumes the same graphs that the smoother optimizes: transition
factors supply the forward model and process covariance, unary measurement
factors supply residuals and measurement covariances.  Covariances live on
the tangent space of the state manifold (right-perturbation charts), and all
Jacobians come from reverse-mode passes of the autodiff engine, so the
recursion can be recorded on a tape and trained end-to-end with an MSE loss
on the posterior means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import graph as fg
from . import lie
from .errors import ContractError

DEFAULT_INIT_COV = 1e-6


@dataclass
class Belief:
    """Gaussian belief: manifold mean plus tangent-space covariance."""

    mean: object
    cov: object  # (d, d), symmetric positive definite


def _symmetrize(p):
    return ad.mul(0.5, ad.add(p, ad.transpose(p)))


def _noise_cov_diag(factor, penv):
    s = factor.noise.log_sqrt_prec(penv, factor.payload)
    return ad.exp(ad.mul(-2.0, s))


def _tangent_jacobian_of_map(tape, kind, x, fn, out_kind=None):
    """d/d(delta) of (fn(x (+) delta) (-) fn(x)) at delta = 0.

    Returns (fn(x), jacobian).  Works numerically on a scratch tape and in
    recording mode on a shared tape.
    """
    out_kind = out_kind or kind
    y_base = fn(x)
    start = len(tape)
    delta = tape.input(np.zeros(kind.tangent_dim))
    y_pert = fn(lie.oplus(kind, x, delta))
    diff = lie.ominus(out_kind, y_pert, y_base)
    jac = ad.jacobian_blocks(diff, [delta], lift=True, sweep_start=start)[0]
    return y_base, jac


def _maybe_freeze(belief: Belief, kind, scratch: bool) -> Belief:
    if not scratch:
        return belief
    return Belief(lie.freeze(kind, belief.mean), np.asarray(ad.value_of(belief.cov)))


def ekf_predict(belief: Belief, factor, penv, kind, tape=None) -> Belief:
    """Push the belief through the transition model: F P F^T + Q."""
    if factor.transition is None:
        raise ContractError("predict requires a factor with a transition model")
    scratch = tape is None
    tape = tape if tape is not None else ad.Tape()
    fn = lambda x: factor.transition(x, penv)
    mean, f_jac = _tangent_jacobian_of_map(tape, kind, belief.mean, fn)
    q = ad.diagmat(_noise_cov_diag(factor, penv))
    cov = ad.add(ad.matmul(ad.matmul(f_jac, belief.cov), ad.transpose(f_jac)), q)
    return _maybe_freeze(Belief(mean, _symmetrize(cov)), kind, scratch)


def ekf_update(belief: Belief, factor, penv, kind, tape=None) -> Belief:
    """Innovation update from a unary measurement factor.

    With residual r and J = dr/d(delta), the correction is
    delta = -P J^T (J P J^T + R)^-1 r; covariance (I - K J) P.
    """
    scratch = tape is None
    tape = tape if tape is not None else ad.Tape()
    start = len(tape)
    delta = tape.input(np.zeros(kind.tangent_dim))
    r0 = factor.residual(
        [lie.oplus(kind, belief.mean, delta)], factor.payload, penv
    )  # evaluated at delta = 0
    j = ad.jacobian_blocks(r0, [delta], lift=True, sweep_start=start)[0]
    r_cov = ad.diagmat(_noise_cov_diag(factor, penv))
    s = ad.add(ad.matmul(ad.matmul(j, belief.cov), ad.transpose(j)), r_cov)
    gain_t = ad.solve_spd(s, ad.matmul(j, belief.cov))  # S^-1 J P = K^T
    gain = ad.transpose(gain_t)
    correction = ad.neg(ad.matvec(gain, r0))
    mean = lie.oplus(kind, belief.mean, correction)
    eye = np.eye(kind.tangent_dim)
    cov = ad.matmul(ad.sub(eye, ad.matmul(gain, j)), belief.cov)
    return _maybe_freeze(Belief(mean, _symmetrize(cov)), kind, scratch)


def _chain_structure(graph):
    """Per-timestep transition/measurement factors derived from factor tags."""
    transitions = {}
    measurements = {}
    t_max = 0
    for f in graph.factors:
        if f.transition is not None and len(f.var_ids) == 2:
            transitions[f.var_ids[0]] = f
            t_max = max(t_max, f.var_ids[1])
        elif len(f.var_ids) == 1 and not f.kind.endswith("_prior"):
            measurements.setdefault(f.var_ids[0], []).append(f)
            t_max = max(t_max, f.var_ids[0])
    return transitions, measurements, t_max + 1


def ekf_run(
    graph,
    init_mean,
    penv,
    init_cov=DEFAULT_INIT_COV,
    tape=None,
):
    """Forward filtering pass over a chain graph; returns per-step beliefs.

    The initial belief is the given mean with a small diagonal covariance.
    Measurement factors at t = 0 are applied before the first prediction;
    multiple measurements at one timestep are applied in graph order.
    """
    transitions, measurements, horizon = _chain_structure(graph)
    kind = graph.kinds[0]
    d = kind.tangent_dim
    tape = tape if tape is not None else ad.Tape()
    cov0 = np.asarray(init_cov, dtype=np.float64)
    if cov0.ndim == 0:
        cov0 = np.eye(d) * float(cov0)
    belief = Belief(init_mean, cov0)
    beliefs = []
    for t in range(horizon):
        if t > 0:
            belief = ekf_predict(belief, transitions[t - 1], penv, kind, tape)
        for f in measurements.get(t, []):
            belief = ekf_update(belief, f, penv, kind, tape)
        beliefs.append(belief)
    return beliefs


def ekf_estimate(graph, init_mean, pstore, init_cov=DEFAULT_INIT_COV):
    """Numeric filtered trajectory (frozen means)."""
    penv = pstore.env()
    beliefs = ekf_run(graph, init_mean, penv, init_cov)
    kind = graph.kinds[0]
    return fg.VariableAssignment(graph, [lie.freeze(kind, b.mean) for b in beliefs])


def ekf_mse_loss(graph, x_gt, pstore, trainable=None, alpha=None, init_cov=DEFAULT_INIT_COV):
    """Taped MSE of filtered means against ground truth, with gradients."""
    tape = ad.Tape()
    penv = pstore.env(tape, trainable)
    beliefs = ekf_run(graph, x_gt[0], penv, init_cov, tape)
    kind = graph.kinds[0]
    total = None
    for t, b in enumerate(beliefs):
        e = lie.ominus(kind, x_gt[t], b.mean)
        if alpha is not None:
            e = ad.mul(e, alpha)
        term = ad.dot(e, e)
        total = term if total is None else ad.add(total, term)
    names = [n for n in pstore.names() if trainable is None or n in trainable]
    if not isinstance(total, ad.Var):
        return float(ad.value_of(total)), {
            n: np.zeros(pstore.get(n).shape) for n in names
        }
    grads = ad.backward(total, [penv[n] for n in names])
    return float(total.value), {
        n: g.reshape(pstore.get(n).shape) for n, g in zip(names, grads)
    }
