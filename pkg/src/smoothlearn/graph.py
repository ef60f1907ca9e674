"""Factor-graph data model: variables, Gaussian factors, parameters.

A :class:`FactorGraph` is a bipartite container of manifold-valued variables
and factors.  Each factor supplies a residual function; its noise model turns
residuals into whitened residuals by multiplying with the square-root
precision (all covariances are diagonal, parameterized as log square-root
precision so they stay positive definite under unconstrained updates).

:func:`linearize` produces a :class:`BlockSparseJacobian`: one dense block per
(factor, connected variable) pair, holding the derivative of the whitened
residual with respect to that variable's tangent perturbation at zero.
Blocks come from reverse-mode passes of the autodiff engine; in training mode
(``lift_ctx`` given) the reverse passes are recorded on the shared tape so the
blocks remain differentiable with respect to the factor parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import lie
from .errors import ContractError, FormatError, NumericError

CHECKPOINT_MAGIC = "smoothlearn-checkpoint-v1"


# ---------------------------------------------------------------------------
# Noise models
# ---------------------------------------------------------------------------


class NoiseModel:
    """Diagonal Gaussian noise; subclasses define the log square-root precision."""

    dim: int

    def log_sqrt_prec(self, penv, payload):
        raise NotImplementedError

    def sqrt_prec(self, penv, payload):
        return ad.exp(self.log_sqrt_prec(penv, payload))


@dataclass
class FixedDiagonal(NoiseModel):
    """Non-learnable diagonal noise given by square-root precisions."""

    sqrt_precisions: np.ndarray

    def __post_init__(self):
        self.sqrt_precisions = np.asarray(self.sqrt_precisions, dtype=np.float64)
        if np.any(self.sqrt_precisions <= 0):
            raise ContractError("square-root precisions must be positive")
        self.dim = self.sqrt_precisions.shape[0]

    def log_sqrt_prec(self, penv, payload):
        return np.log(self.sqrt_precisions)

    def sqrt_prec(self, penv, payload):
        return self.sqrt_precisions


@dataclass
class ConstantDiagonal(NoiseModel):
    """Learnable diagonal noise: a named parameter slice of log sqrt precisions.

    A slice of length 1 with dim > 1 denotes tied entries (one learnable
    value broadcast across all residual dimensions).
    """

    slice_name: str
    dim: int

    def log_sqrt_prec(self, penv, payload):
        s = penv[self.slice_name]
        size = s.value.shape[0] if isinstance(s, ad.Var) else np.shape(s)[0]
        if size == self.dim:
            return s
        if size == 1:
            return ad.bcast(ad.getitem(s, 0), (self.dim,))
        raise ContractError(
            f"noise slice '{self.slice_name}' has size {size}, expected 1 or {self.dim}"
        )


@dataclass
class Heteroscedastic(NoiseModel):
    """Per-instance noise produced by a virtual-sensor head from the payload."""

    head: Callable
    dim: int

    def log_sqrt_prec(self, penv, payload):
        return self.head(penv, payload)


# ---------------------------------------------------------------------------
# Graph containers
# ---------------------------------------------------------------------------


@dataclass
class MeasurementPayload:
    """Per-factor observation: measurement vector plus a conditioning scalar."""

    z: np.ndarray
    feature: float = 0.0


@dataclass
class Factor:
    """Residual term over a tuple of connected variables.

    ``residual(values, payload, penv)`` returns the unwhitened residual as a
    length ``dim`` vector.  ``transition`` optionally exposes the underlying
    forward model (used by recursive filters sharing the graph's models).
    """

    kind: str
    var_ids: tuple
    dim: int
    residual: Callable
    noise: NoiseModel
    payload: MeasurementPayload | None = None
    transition: Callable | None = None
    t: int = -1

    def __post_init__(self):
        if self.noise.dim != self.dim:
            raise ContractError(
                f"factor '{self.kind}': residual dim {self.dim} != noise dim {self.noise.dim}"
            )


class FactorGraph:
    """Bipartite container of variables and factors."""

    def __init__(self):
        self.kinds: list[lie.ManifoldKind] = []
        self.factors: list[Factor] = []

    @property
    def num_variables(self) -> int:
        return len(self.kinds)

    def add_variable(self, kind: lie.ManifoldKind) -> int:
        self.kinds.append(kind)
        return len(self.kinds) - 1

    def add_factor(self, factor: Factor) -> int:
        for vid in factor.var_ids:
            if not (0 <= vid < len(self.kinds)):
                raise ContractError(f"factor references unknown variable {vid}")
        self.factors.append(factor)
        return len(self.factors) - 1

    def validate(self):
        touched = set()
        for f in self.factors:
            touched.update(f.var_ids)
        missing = set(range(len(self.kinds))) - touched
        if missing:
            raise ContractError(f"variables not constrained by any factor: {sorted(missing)}")

    def tangent_offsets(self) -> np.ndarray:
        dims = [k.tangent_dim for k in self.kinds]
        return np.concatenate([[0], np.cumsum(dims)]).astype(int)

    @property
    def total_tangent_dim(self) -> int:
        return sum(k.tangent_dim for k in self.kinds)

    def debug_dump(self) -> str:
        lines = []
        for f in self.factors:
            ids = ",".join(str(v) for v in f.var_ids)
            lines.append(f"{f.kind} vars=[{ids}] dim={f.dim}")
        return "\n".join(lines)


class VariableAssignment:
    """Ordered manifold values for all variables of a graph."""

    def __init__(self, graph: FactorGraph, values: Sequence):
        if len(values) != graph.num_variables:
            raise ContractError("assignment size does not match graph")
        self.graph = graph
        self.values = list(values)

    def __getitem__(self, i):
        return self.values[i]

    def __len__(self):
        return len(self.values)

    def copy(self) -> "VariableAssignment":
        return VariableAssignment(self.graph, list(self.values))

    def oplus(self, delta: np.ndarray) -> "VariableAssignment":
        """Apply a stacked tangent update, one slice per variable."""
        offsets = self.graph.tangent_offsets()
        if delta.shape != (offsets[-1],):
            raise ContractError("stacked tangent has wrong dimension")
        new_values = []
        for i, kind in enumerate(self.graph.kinds):
            d = delta[offsets[i] : offsets[i + 1]]
            new_values.append(lie.oplus(kind, self.values[i], d))
        return VariableAssignment(self.graph, new_values)

    def ominus(self, other: "VariableAssignment") -> np.ndarray:
        """Stacked tangent-space difference self (-) other."""
        out = []
        for kind, a, b in zip(self.graph.kinds, self.values, other.values):
            out.append(np.atleast_1d(lie.ominus(kind, a, b)))
        return np.concatenate(out)

    def to_arrays(self) -> np.ndarray:
        return np.stack(
            [lie.value_to_array(k, v) for k, v in zip(self.graph.kinds, self.values)]
        )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class ParameterStore:
    """Flat parameter vector with named, shaped slices."""

    def __init__(self):
        self.values = np.zeros(0)
        self._slices: dict[str, tuple[int, tuple]] = {}

    def register(self, name: str, shape, init=None) -> None:
        if name in self._slices:
            raise ContractError(f"slice '{name}' already registered")
        shape = tuple(shape)
        size = int(np.prod(shape)) if shape else 1
        offset = self.values.shape[0]
        self._slices[name] = (offset, shape)
        chunk = np.zeros(size) if init is None else np.asarray(init, dtype=np.float64).reshape(size)
        if not np.all(np.isfinite(chunk)):
            raise ContractError(f"non-finite initial values for slice '{name}'")
        self.values = np.concatenate([self.values, chunk])

    def names(self) -> list[str]:
        return list(self._slices)

    def slice_index(self, name: str) -> np.ndarray:
        offset, shape = self._slices[name]
        size = int(np.prod(shape)) if shape else 1
        return np.arange(offset, offset + size)

    def get(self, name: str) -> np.ndarray:
        offset, shape = self._slices[name]
        size = int(np.prod(shape)) if shape else 1
        return self.values[offset : offset + size].reshape(shape)

    def set(self, name: str, value) -> None:
        offset, shape = self._slices[name]
        size = int(np.prod(shape)) if shape else 1
        self.values[offset : offset + size] = np.asarray(value, dtype=np.float64).reshape(size)

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        out.values = self.values.copy()
        out._slices = dict(self._slices)
        return out

    def env(self, tape: ad.Tape | None = None, tracked: set | None = None) -> dict:
        """Name -> value map; with a tape, slices become (tracked) inputs."""
        out = {}
        for name in self._slices:
            v = self.get(name)
            if tape is None:
                out[name] = v
            elif tracked is None or name in tracked:
                out[name] = tape.input(v)
            else:
                out[name] = tape.constant(v)
        return out

    # Checkpoint format: one JSON header line describing the slices, then the
    # flat parameter vector as little-endian float64.
    def save(self, path) -> None:
        header = {
            "format": CHECKPOINT_MAGIC,
            "total": int(self.values.shape[0]),
            "slices": [
                {"name": n, "offset": off, "shape": list(shape)}
                for n, (off, shape) in self._slices.items()
            ],
        }
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
            fh.write(self.values.astype("<f8").tobytes())

    @staticmethod
    def load(path) -> "ParameterStore":
        with open(path, "rb") as fh:
            header_line = fh.readline()
            try:
                header = json.loads(header_line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise FormatError(f"bad checkpoint header: {e}") from e
            if header.get("format") != CHECKPOINT_MAGIC:
                raise FormatError("not a checkpoint file")
            raw = fh.read()
        values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if values.shape[0] != header["total"]:
            raise FormatError("checkpoint payload size mismatch")
        out = ParameterStore()
        out.values = values.copy()
        for s in header["slices"]:
            out._slices[s["name"]] = (int(s["offset"]), tuple(s["shape"]))
        return out


# ---------------------------------------------------------------------------
# Residual evaluation and linearization
# ---------------------------------------------------------------------------


@dataclass
class LiftContext:
    """Shared-tape linearization state for one optimizer step.

    ``deltas`` holds one zero tangent input per variable, ``perturbed`` the
    corresponding retracted values, and ``base_active`` the tape indices of
    the retraction prologue that depend on the deltas.
    """

    tape: ad.Tape
    deltas: list
    perturbed: list
    base_active: set
    sqrt_precs: list


@dataclass
class BlockSparseJacobian:
    """Whitened residual Jacobian as dense blocks on the bipartite pattern."""

    graph: FactorGraph
    blocks: list  # per factor: dict var_id -> (dim, tangent_dim) block
    residuals: list  # per factor: whitened residual vector

    def row_offsets(self) -> np.ndarray:
        dims = [f.dim for f in self.graph.factors]
        return np.concatenate([[0], np.cumsum(dims)]).astype(int)

    def stacked_residual(self):
        return ad.concat(self.residuals)

    def to_dense(self) -> np.ndarray:
        """Dense (total residual dim) x (total tangent dim) matrix; test aid."""
        roff = self.row_offsets()
        coff = self.graph.tangent_offsets()
        out = np.zeros((roff[-1], coff[-1]))
        for fi, blk in enumerate(self.blocks):
            for vid, b in blk.items():
                b = ad.value_of(b)
                out[roff[fi] : roff[fi + 1], coff[vid] : coff[vid + 1]] = b
        return out


def _factor_whitened(factor: Factor, values, penv, w=None):
    try:
        r = factor.residual(values, factor.payload, penv)
    except NumericError as e:
        raise NumericError(f"factor '{factor.kind}' (t={factor.t}): {e}") from e
    rdim = r.value.shape if isinstance(r, ad.Var) else np.shape(r)
    if rdim != (factor.dim,):
        raise ContractError(
            f"factor '{factor.kind}' returned residual shape {rdim}, expected ({factor.dim},)"
        )
    if w is None:
        w = factor.noise.sqrt_prec(penv, factor.payload)
    return ad.mul(w, r)


def whitened_residuals(graph: FactorGraph, assignment: VariableAssignment, penv):
    """Stacked whitened residuals over all factors, in factor order."""
    parts = []
    for factor in graph.factors:
        values = [assignment[v] for v in factor.var_ids]
        parts.append(_factor_whitened(factor, values, penv))
    return ad.concat(parts)


def map_cost(graph: FactorGraph, assignment: VariableAssignment, penv):
    """Half squared norm of the whitened residuals (the MAP objective)."""
    wr = whitened_residuals(graph, assignment, penv)
    return ad.mul(0.5, ad.dot(wr, wr))


def linearize(
    graph: FactorGraph,
    assignment: VariableAssignment,
    penv,
    lift_ctx: LiftContext | None = None,
) -> BlockSparseJacobian:
    """Whitened residuals and their Jacobian blocks at the given assignment.

    Without ``lift_ctx`` each factor is differentiated on a scratch tape and
    the blocks are numpy arrays.  With ``lift_ctx`` residuals are recorded on
    the shared tape against the context's perturbed values and the blocks are
    Vars.
    """
    blocks = []
    residuals = []
    if lift_ctx is None:
        for factor in graph.factors:
            tape = ad.Tape()
            deltas = []
            values = []
            for vid in factor.var_ids:
                kind = graph.kinds[vid]
                d = tape.input(np.zeros(kind.tangent_dim))
                deltas.append(d)
                values.append(lie.oplus(kind, assignment[vid], d))
            wr = _factor_whitened(factor, values, penv)
            jac = ad.jacobian_blocks(wr, deltas)
            blocks.append({vid: jac[i] for i, vid in enumerate(factor.var_ids)})
            residuals.append(wr.value)
    else:
        tape = lift_ctx.tape
        for fi, factor in enumerate(graph.factors):
            start = len(tape)
            values = [lift_ctx.perturbed[v] for v in factor.var_ids]
            wr = _factor_whitened(factor, values, penv, w=lift_ctx.sqrt_precs[fi])
            deltas = [lift_ctx.deltas[v] for v in factor.var_ids]
            jac = ad.jacobian_blocks(
                wr,
                deltas,
                lift=True,
                active_extra=lift_ctx.base_active,
                sweep_start=start,
            )
            blocks.append({vid: jac[i] for i, vid in enumerate(factor.var_ids)})
            residuals.append(wr)
    return BlockSparseJacobian(graph, blocks, residuals)
