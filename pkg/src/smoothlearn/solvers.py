"""Nonlinear optimization steps and sparse linear solvers.

Normal equations are assembled block-wise from a :class:`BlockSparseJacobian`
(H = J^T J, g = -J^T r).  Two linear backends solve H d = g:

* ``cg`` - Jacobi-preconditioned conjugate gradient (training default).
* ``cholesky`` - banded Cholesky on the chain band (evaluation default);
  falls back to a dense factorization for non-banded patterns.

Gauss-Newton steps are a single solve plus retraction; Levenberg-Marquardt
damps the diagonal multiplicatively (H + lambda diag(H)), accepting steps
only on cost decrease, so the accepted-cost sequence is non-increasing by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg

from . import autodiff as ad
from . import graph as fg
from .errors import ContractError, IndefiniteMatrixError, SolverError

EVAL_BACKEND = "cholesky"
TRAIN_BACKEND = "cg"


@dataclass
class SolverConfig:
    backend: str = "cholesky"  # "cholesky" | "cg"
    cg_tol: float = 1e-10
    cg_max_iters: int | None = None  # default: 10x dimension
    nonlinear: str = "lm"  # "lm" | "gn"
    max_steps: int = 50
    lm_lambda0: float = 1e-4
    lm_up: float = 10.0
    lm_down: float = 0.1
    lm_lambda_max: float = 1e10
    step_tol: float = 1e-10
    cost_tol: float = 1e-12

    def __post_init__(self):
        if self.cg_tol <= 0 or self.step_tol <= 0 or self.cost_tol <= 0:
            raise ContractError("solver tolerances must be positive")
        if self.lm_lambda0 <= 0 or self.lm_up <= 1 or not (0 < self.lm_down < 1):
            raise ContractError("invalid Levenberg-Marquardt damping schedule")
        if self.backend not in ("cholesky", "cg"):
            raise ContractError(f"unknown linear backend '{self.backend}'")
        if self.nonlinear not in ("lm", "gn"):
            raise ContractError(f"unknown nonlinear method '{self.nonlinear}'")


@dataclass
class NormalEquations:
    """Symmetric block system H d = g with H stored as upper-triangle blocks."""

    dim: int
    offsets: np.ndarray
    entries: dict  # (i, j) with i <= j -> block
    g: object  # stacked vector (ndarray or Var)

    def placements_and_blocks(self):
        """Expand to explicit single placements (both triangles)."""
        placements = []
        blocks = []
        for (i, j), b in self.entries.items():
            placements.append((int(self.offsets[i]), int(self.offsets[j])))
            blocks.append(b)
            if i != j:
                placements.append((int(self.offsets[j]), int(self.offsets[i])))
                blocks.append(ad.transpose(b))
        return placements, blocks

    def to_dense(self) -> np.ndarray:
        placements, blocks = self.placements_and_blocks()
        return ad._assemble_dense(self.dim, placements, [ad.value_of(b) for b in blocks])


def normal_equations(jac: fg.BlockSparseJacobian) -> NormalEquations:
    """H = J^T J and g = -J^T r from whitened blocks and residuals.

    The block pattern of H is exactly the variable adjacency: (i, j) is
    present iff variables i and j share a factor.
    """
    g_parts = {}
    entries = {}
    for fi, blk in enumerate(jac.blocks):
        r = jac.residuals[fi]
        ids = sorted(blk)
        for a in ids:
            ja_t = ad.transpose(blk[a])
            ga = ad.neg(ad.matvec(ja_t, r))
            g_parts[a] = ad.add(g_parts[a], ga) if a in g_parts else ga
            for b in ids:
                if b < a:
                    continue
                h_ab = ad.matmul(ja_t, blk[b])
                key = (a, b)
                entries[key] = ad.add(entries[key], h_ab) if key in entries else h_ab
    offsets = jac.graph.tangent_offsets()
    g_list = []
    for i, kind in enumerate(jac.graph.kinds):
        g_list.append(g_parts.get(i, np.zeros(kind.tangent_dim)))
    g = ad.concat(g_list)
    return NormalEquations(int(offsets[-1]), offsets, entries, g)


# ---------------------------------------------------------------------------
# Linear backends
# ---------------------------------------------------------------------------


def _bandwidth(dim, placements, blocks) -> int:
    u = 0
    for (r0, c0), b in zip(placements, blocks):
        m, n = ad.value_of(b).shape
        u = max(u, abs(r0 - c0) + max(m, n) - 1)
    return min(u, dim - 1)


def _cholesky_resolver(dim: int, placements, banded_hint: int | None = None):
    """resolver_factory for chain_solve using a (banded) Cholesky factorization."""

    def factory(h: np.ndarray):
        n = h.shape[0]
        u = banded_hint if banded_hint is not None else n - 1
        if u < n // 2:
            ab = np.zeros((u + 1, n))
            for k in range(u + 1):
                ab[u - k, k:] = np.diagonal(h, k)
            try:
                cb = scipy.linalg.cholesky_banded(ab, lower=False)
            except scipy.linalg.LinAlgError as e:
                raise IndefiniteMatrixError(
                    f"banded Cholesky failed (matrix not positive definite): {e}"
                ) from e

            def resolve(rhs):
                return scipy.linalg.cho_solve_banded((cb, False), rhs)

        else:
            try:
                factor = scipy.linalg.cho_factor(h, lower=True)
            except scipy.linalg.LinAlgError as e:
                raise IndefiniteMatrixError(
                    f"Cholesky failed (matrix not positive definite): {e}"
                ) from e

            def resolve(rhs):
                return scipy.linalg.cho_solve(factor, rhs)

        return resolve

    return factory


@dataclass
class CGInfo:
    iterations: int = 0
    rel_residual: float = 0.0


def _pcg(h: np.ndarray, b: np.ndarray, tol: float, max_iters: int, info: CGInfo | None):
    """Jacobi-preconditioned conjugate gradient on an assembled matrix."""
    n = b.shape[0]
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        if info is not None:
            info.iterations = 0
            info.rel_residual = 0.0
        return np.zeros(n)
    d = np.diagonal(h)
    if np.any(d <= 0):
        raise IndefiniteMatrixError("Jacobi preconditioner needs positive diagonal")
    minv = 1.0 / d
    x = np.zeros(n)
    r = b.copy()
    z = minv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iters + 1):
        hp = h @ p
        alpha = rz / (p @ hp)
        x += alpha * p
        r -= alpha * hp
        rel = np.linalg.norm(r) / norm_b
        if rel <= tol:
            if info is not None:
                info.iterations = it
                info.rel_residual = float(rel)
            return x
        z = minv * r
        rz_new = r @ z
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    achieved = np.linalg.norm(h @ x - b) / norm_b
    raise SolverError(
        f"CG did not converge in {max_iters} iterations (rel residual {achieved:.3e})"
    )


def _cg_resolver(tol: float, max_iters: int | None, info: CGInfo | None = None):
    def factory(h: np.ndarray):
        iters = max_iters if max_iters is not None else 10 * h.shape[0]

        def resolve(rhs):
            return _pcg(h, rhs, tol, iters, info)

        return resolve

    return factory


def _as_normal_equations(h) -> NormalEquations:
    if isinstance(h, NormalEquations):
        return h
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ContractError("expected a square matrix or NormalEquations")
    n = h.shape[0]
    return NormalEquations(n, np.array([0, n]), {(0, 0): h}, None)


def cg_solve(h, g, config: SolverConfig | None = None, info: CGInfo | None = None):
    """Jacobi-preconditioned CG solve of H d = g (numeric)."""
    config = config or SolverConfig(backend="cg")
    ne = _as_normal_equations(h)
    placements, blocks = ne.placements_and_blocks()
    return ad.chain_solve(
        g, blocks, placements, _cg_resolver(config.cg_tol, config.cg_max_iters, info), ne.dim
    )


def cholesky_solve(h, g):
    """Sparse (banded) Cholesky solve of H d = g (numeric)."""
    ne = _as_normal_equations(h)
    placements, blocks = ne.placements_and_blocks()
    band = _bandwidth(ne.dim, placements, blocks)
    return ad.chain_solve(g, blocks, placements, _cholesky_resolver(ne.dim, placements, band), ne.dim)


def solve_normal(ne: NormalEquations, config: SolverConfig):
    """Solve assembled normal equations with the configured backend.

    Works for numeric blocks and for Var blocks (in which case the solve is
    recorded with its adjoint rule).
    """
    placements, blocks = ne.placements_and_blocks()
    if config.backend == "cg":
        factory = _cg_resolver(config.cg_tol, config.cg_max_iters)
    else:
        band = _bandwidth(ne.dim, placements, blocks)
        factory = _cholesky_resolver(ne.dim, placements, band)
    return ad.chain_solve(ne.g, blocks, placements, factory, ne.dim)


# ---------------------------------------------------------------------------
# Nonlinear optimization
# ---------------------------------------------------------------------------


def gn_step(graph, assignment, penv, config: SolverConfig | None = None):
    """One Gauss-Newton step: returns (stacked update, retracted assignment)."""
    config = config or SolverConfig(backend=TRAIN_BACKEND)
    jac = fg.linearize(graph, assignment, penv)
    ne = normal_equations(jac)
    delta = solve_normal(ne, config)
    return delta, assignment.oplus(delta)


@dataclass
class SolveResult:
    assignment: object
    costs: list
    status: str  # "converged" | "max_steps" | "stalled"
    accepted_steps: int

    @property
    def final_cost(self) -> float:
        return self.costs[-1]


def _damped(ne: NormalEquations, lam: float) -> NormalEquations:
    entries = dict(ne.entries)
    for i in range(len(ne.offsets) - 1):
        key = (i, i)
        b = np.asarray(ad.value_of(entries[key]))
        entries[key] = b + lam * np.diag(np.diagonal(b))
    return replace(ne, entries=entries)


def lm_solve(graph, assignment, penv, config: SolverConfig | None = None) -> SolveResult:
    """Levenberg-Marquardt: damped steps accepted only on cost decrease."""
    config = config or SolverConfig()
    lam = config.lm_lambda0
    current = assignment
    cost = float(fg.map_cost(graph, current, penv))
    costs = [cost]
    accepted = 0
    for _ in range(config.max_steps):
        jac = fg.linearize(graph, current, penv)
        ne = normal_equations(jac)
        stepped = False
        while True:
            if lam > config.lm_lambda_max:
                return SolveResult(current, costs, "stalled", accepted)
            try:
                delta = solve_normal(_damped(ne, lam), config)
                candidate = current.oplus(delta)
                new_cost = float(fg.map_cost(graph, candidate, penv))
            except (IndefiniteMatrixError, SolverError):
                lam *= config.lm_up
                continue
            if new_cost <= cost:
                current = candidate
                prev_cost = cost
                cost = new_cost
                costs.append(cost)
                accepted += 1
                lam = max(lam * config.lm_down, 1e-12)
                stepped = True
                break
            lam *= config.lm_up
        if stepped:
            if np.linalg.norm(delta) < config.step_tol:
                return SolveResult(current, costs, "converged", accepted)
            if prev_cost - cost < config.cost_tol * max(1.0, prev_cost):
                return SolveResult(current, costs, "converged", accepted)
    return SolveResult(current, costs, "max_steps", accepted)


def gn_solve(graph, assignment, penv, config: SolverConfig) -> SolveResult:
    """Plain Gauss-Newton iteration (no damping, no acceptance test)."""
    current = assignment
    costs = [float(fg.map_cost(graph, current, penv))]
    for _ in range(config.max_steps):
        delta, current = gn_step(graph, current, penv, config)
        costs.append(float(fg.map_cost(graph, current, penv)))
        if np.linalg.norm(delta) < config.step_tol:
            return SolveResult(current, costs, "converged", len(costs) - 1)
    return SolveResult(current, costs, "max_steps", len(costs) - 1)


def map_inference(graph, assignment, penv, config: SolverConfig | None = None) -> SolveResult:
    """MAP estimate from an initial assignment (evaluation default: LM + Cholesky)."""
    config = config or SolverConfig()
    if config.nonlinear == "gn":
        return gn_solve(graph, assignment, penv, config)
    return lm_solve(graph, assignment, penv, config)
