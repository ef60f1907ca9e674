"""End-to-end learning: unrolled Gauss-Newton surrogate, joint NLL, Adam.

The surrogate estimate starts a Gauss-Newton iteration at the ground-truth
trajectory and unrolls a fixed number of steps K, recording the whole
computation (linearization, normal equations, linear solves, retractions) on
one tape.  Supervising the K-th iterate with a weighted tangent-space MSE
yields a loss whose gradient with respect to every factor parameter flows
through the optimizer steps themselves.  When the parameters match the data
exactly, every update is zero and so is the loss and its gradient.

The joint NLL loss scores the factor densities directly at the ground truth;
it decomposes over factors, so optimizing it is equivalent to fitting each
factor family in isolation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import graph as fg
from . import lie
from . import solvers
from .errors import ContractError, NumericError


@dataclass
class SurrogateConfig:
    """Unrolling depth and per-tangent-dimension loss weights."""

    k_steps: int = 5
    alpha: np.ndarray | None = None  # per-variable tangent weights; None = all ones

    def __post_init__(self):
        if self.k_steps < 1:
            raise ContractError("k_steps must be >= 1")
        if self.alpha is not None:
            self.alpha = np.asarray(self.alpha, dtype=np.float64)
            if np.any(self.alpha < 0) or not np.any(self.alpha > 0):
                raise ContractError("alpha must be nonnegative and not all zero")


@dataclass
class TrainConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    loss: str = "e2e-mse"  # "e2e-mse" | "joint-nll"
    k_steps: int = 5
    supervision: str = "position"  # "position" | "velocity" | "all"
    estimator: str = "smoother"  # "smoother" | "ekf"
    pretrain_epochs: int = 40
    pretrain_lr: float = 0.05
    pretrain_fraction: float = 0.5
    train_folds: tuple | None = None
    val_fold: int | None = None
    val_records: int = 8
    window: int | None = None  # train on fixed-length record slices
    windows_per_record: int | None = None
    train_slices: tuple | None = None  # override the model's trainable set

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ContractError("invalid training configuration")
        if self.loss not in ("e2e-mse", "joint-nll"):
            raise ContractError(f"unknown loss '{self.loss}'")
        if self.estimator not in ("smoother", "ekf"):
            raise ContractError(f"unknown training estimator '{self.estimator}'")
        if not 0.0 <= self.pretrain_fraction < 1.0:
            raise ContractError("pretrain_fraction must be in [0, 1)")


@dataclass
class GradientReport:
    loss: float
    slice_norms: dict
    epoch: int = -1
    batch: int = -1

    @property
    def grad_norm(self) -> float:
        return math.sqrt(sum(v * v for v in self.slice_norms.values()))


# ---------------------------------------------------------------------------
# Differentiable unrolled MAP surrogate
# ---------------------------------------------------------------------------


class TapedProblem:
    """One record's graph lifted onto a tape for end-to-end differentiation.

    Square-root precisions are evaluated once per tape (they depend only on
    parameters and payloads) and reused by every unrolled step.
    """

    def __init__(self, graph, pstore, trainable=None, solver_cfg=None):
        self.graph = graph
        self.tape = ad.Tape()
        self.penv = pstore.env(self.tape, trainable)
        self.solver_cfg = solver_cfg or solvers.SolverConfig(backend="cg")
        self.sqrt_precs = [
            f.noise.sqrt_prec(self.penv, f.payload) for f in graph.factors
        ]

    def unroll(self, start_values, k_steps: int):
        """K differentiable Gauss-Newton steps from the given values."""
        graph = self.graph
        tape = self.tape
        offsets = graph.tangent_offsets()
        values = list(start_values)
        for k in range(k_steps):
            first = len(tape)
            deltas = [
                tape.input(np.zeros(kind.tangent_dim)) for kind in graph.kinds
            ]
            perturbed = [
                lie.oplus(kind, values[i], deltas[i])
                for i, kind in enumerate(graph.kinds)
            ]
            base_active = ad.forward_active(
                tape, {d.idx for d in deltas}, first, len(tape)
            )
            ctx = fg.LiftContext(tape, deltas, perturbed, base_active, self.sqrt_precs)
            assignment = fg.VariableAssignment(graph, values)
            try:
                jac = fg.linearize(graph, assignment, self.penv, lift_ctx=ctx)
                ne = solvers.normal_equations(jac)
                delta_full = solvers.solve_normal(ne, self.solver_cfg)
            except (NumericError, solvers.SolverError) as e:
                raise type(e)(f"unrolled step {k}: {e}") from e
            values = [
                lie.oplus(
                    kind,
                    values[i],
                    ad.getitem(delta_full, slice(int(offsets[i]), int(offsets[i + 1]))),
                )
                for i, kind in enumerate(graph.kinds)
            ]
        return values

    def mse_loss(self, estimates, gt_values, alpha=None):
        """Sum over variables of || diag(alpha) (gt (-) estimate) ||^2."""
        total = None
        for i, kind in enumerate(self.graph.kinds):
            e = lie.ominus(kind, gt_values[i], estimates[i])
            if alpha is not None:
                e = ad.mul(e, alpha)
            term = ad.dot(e, e)
            total = term if total is None else ad.add(total, term)
        return total


def surrogate_map(graph, x_gt, pstore, k_steps=5, solver_cfg=None, trainable=None):
    """The unrolled-K estimate as a numeric assignment (starts at ground truth)."""
    problem = TapedProblem(graph, pstore, trainable, solver_cfg)
    values = problem.unroll(list(x_gt.values), k_steps)
    return fg.VariableAssignment(
        graph, [lie.freeze(k, v) for k, v in zip(graph.kinds, values)]
    )


def surrogate_mse_loss(
    graph,
    x_gt,
    pstore,
    config: SurrogateConfig | None = None,
    solver_cfg=None,
    trainable=None,
    want_grads=False,
):
    """Weighted tangent MSE of the unrolled estimate against ground truth."""
    config = config or SurrogateConfig()
    problem = TapedProblem(graph, pstore, trainable, solver_cfg)
    estimates = problem.unroll(list(x_gt.values), config.k_steps)
    loss = problem.mse_loss(estimates, list(x_gt.values), config.alpha)
    if not want_grads:
        return float(ad.value_of(loss))
    return float(ad.value_of(loss)), _grads_by_name(loss, problem.penv, pstore, trainable)


def joint_nll_loss(graph, x_gt, pstore, trainable=None, want_grads=False):
    """Negative log joint density at the ground truth, constants dropped.

    Per factor: 0.5 ||r||^2_Sigma + 0.5 log|Sigma|, which with diagonal
    sqrt precisions w = exp(s) is 0.5 ||w r||^2 - sum(s).
    """
    tape = ad.Tape()
    penv = pstore.env(tape, trainable)
    total = None
    for factor in graph.factors:
        values = [x_gt[v] for v in factor.var_ids]
        r = factor.residual(values, factor.payload, penv)
        s = factor.noise.log_sqrt_prec(penv, factor.payload)
        wr = ad.mul(ad.exp(s), r)
        term = ad.sub(ad.mul(0.5, ad.dot(wr, wr)), ad.vsum(s))
        total = term if total is None else ad.add(total, term)
    if not want_grads:
        return float(ad.value_of(total))
    return float(ad.value_of(total)), _grads_by_name(total, penv, pstore, trainable)


def _grads_by_name(loss, penv, pstore, trainable):
    names = [n for n in pstore.names() if trainable is None or n in trainable]
    if not isinstance(loss, ad.Var):
        return {n: np.zeros(pstore.get(n).shape) for n in names}
    grads = ad.backward(loss, [penv[n] for n in names])
    return {n: g.reshape(pstore.get(n).shape) for n, g in zip(names, grads)}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def init(n: int) -> "AdamState":
        return AdamState(np.zeros(n), np.zeros(n), 0)


def adam_step(theta, grad, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (new theta, new state)."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient in Adam update")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    theta_new = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta_new, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _flat_grad(pstore, grads: dict) -> np.ndarray:
    flat = np.zeros_like(pstore.values)
    for name, g in grads.items():
        flat[pstore.slice_index(name)] = np.asarray(g).ravel()
    return flat


def _slice_norms(grads: dict) -> dict:
    return {n: float(np.linalg.norm(g)) for n, g in grads.items()}


def train(
    dataset,
    model,
    cfg: TrainConfig,
    solver_cfg=None,
    metrics_path=None,
    checkpoint_path=None,
    pstore=None,
):
    """Pretrain sensor means, bias-init noise heads, then fit the main loss.

    Returns (parameters, per-epoch metric dicts).  Deterministic for a fixed
    config and seed.
    """
    rng = np.random.default_rng(cfg.seed)
    if pstore is None:
        pstore = model.init_params(rng)

    records = [
        r
        for i, r in enumerate(dataset.records)
        if cfg.train_folds is None or dataset.folds[i] in cfg.train_folds
    ]
    if not records:
        raise ContractError("no training records in the selected folds")
    n_pre = int(len(records) * cfg.pretrain_fraction)
    pre_records, main_records = records[:n_pre], records[n_pre:]
    if not main_records:
        raise ContractError("pretrain fraction leaves no records for the main phase")

    if cfg.pretrain_epochs > 0 and pre_records and model.mean_slices():
        model.pretrain_sensor(pstore, pre_records, cfg, rng)
        if model.noise_slices():
            rmse = model.sensor_rmse(pstore, pre_records)
            model.bias_init_noise(pstore, rmse)

    if cfg.window is not None:
        main_records = [
            w
            for r in main_records
            for w in model.slice_record(r, cfg.window)[: cfg.windows_per_record]
        ]

    if cfg.train_slices is not None:
        trainable = set(cfg.train_slices)
    else:
        trainable = set(model.noise_slices())
        if not trainable:
            trainable = set(model.mean_slices())
    alpha = model.alpha(cfg.supervision, records)
    sur_cfg = SurrogateConfig(k_steps=cfg.k_steps, alpha=alpha)
    train_solver = solvers.SolverConfig(
        backend="cg",
        cg_tol=(solver_cfg.cg_tol if solver_cfg else 1e-10),
    )

    built = [model.build(r) for r in main_records]
    metrics = []
    adam = AdamState.init(pstore.values.shape[0])
    order = np.arange(len(built))
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        epoch_losses = []
        last_report = None
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0 : b0 + cfg.batch_size]
            acc = {n: np.zeros(pstore.get(n).size) for n in trainable}
            batch_loss = 0.0
            for ri in batch:
                g, x_gt = built[ri]
                norm = 1.0 / (len(batch) * g.num_variables)
                if cfg.loss == "joint-nll":
                    loss, grads = joint_nll_loss(
                        g, x_gt, pstore, trainable=trainable, want_grads=True
                    )
                elif cfg.estimator == "ekf":
                    loss, grads = model.ekf_loss_and_grads(
                        g, x_gt, pstore, trainable, alpha
                    )
                else:
                    loss, grads = surrogate_mse_loss(
                        g,
                        x_gt,
                        pstore,
                        sur_cfg,
                        train_solver,
                        trainable=trainable,
                        want_grads=True,
                    )
                if not np.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, record {int(ri)}"
                    )
                batch_loss += loss * norm
                for n in trainable:
                    acc[n] += np.asarray(grads[n]).ravel() * norm
            flat = _flat_grad(pstore, acc)
            pstore.values, adam = adam_step(
                pstore.values, flat, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps
            )
            epoch_losses.append(batch_loss)
            last_report = GradientReport(batch_loss, _slice_norms(acc), epoch, b0)
        val = model.quick_val_metric(
            pstore, dataset, cfg.val_fold, cfg.val_records, cfg.estimator, solver_cfg
        )
        metrics.append(
            {
                "epoch": epoch,
                "loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
                "grad_norm": last_report.grad_norm if last_report else 0.0,
                "val_metric": val,
            }
        )

    if metrics_path is not None:
        write_metrics_csv(metrics_path, metrics)
    if checkpoint_path is not None:
        pstore.save(checkpoint_path)
    return pstore, metrics


def write_metrics_csv(path, metrics):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "grad_norm", "val_metric"])
        for row in metrics:
            writer.writerow(
                [row["epoch"], repr(row["loss"]), repr(row["grad_norm"]), repr(row["val_metric"])]
            )
