"""SO(2)/SE(2) group types and the generalized oplus/ominus operators.

Group elements store their rotation as a (cos, sin) pair, which avoids angle
wrap-around in composition and differentiates cleanly.  All component fields
are duck-typed: they may be plain floats/numpy scalars or autodiff Vars, so
the same code path serves numeric evaluation and tape recording.

Conventions:

* twists are ordered translation-first: (vx, vy, omega)
* retraction is the right perturbation, x (+) d = x * exp(d)
* log returns omega in (-pi, pi]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError

SMALL_ANGLE = 1e-7


def _fval(x) -> float:
    return float(x.value) if isinstance(x, ad.Var) else float(x)


def _comp(v, i):
    """i-th component of a vector that may be a Var or an array."""
    if isinstance(v, ad.Var):
        return ad.getitem(v, i)
    return v[i]


def _is_var(*xs) -> bool:
    return any(isinstance(x, ad.Var) for x in xs)


@dataclass(frozen=True)
class SO2:
    """Planar rotation stored as a unit complex number (cos, sin)."""

    cs: object
    sn: object

    @staticmethod
    def identity() -> "SO2":
        return SO2(1.0, 0.0)

    @staticmethod
    def from_angle(theta) -> "SO2":
        return SO2(ad.cos(theta), ad.sin(theta))

    def normalized(self) -> "SO2":
        n = ad.sqrt(ad.add(ad.mul(self.cs, self.cs), ad.mul(self.sn, self.sn)))
        return SO2(ad.div(self.cs, n), ad.div(self.sn, n))

    def compose(self, other: "SO2") -> "SO2":
        cs = ad.sub(ad.mul(self.cs, other.cs), ad.mul(self.sn, other.sn))
        sn = ad.add(ad.mul(self.sn, other.cs), ad.mul(self.cs, other.sn))
        return SO2(cs, sn).normalized()

    def inverse(self) -> "SO2":
        return SO2(self.cs, ad.neg(self.sn))

    def angle(self):
        return ad.atan2(self.sn, self.cs)

    def apply(self, x, y):
        """Rotate the point (x, y)."""
        px = ad.sub(ad.mul(self.cs, x), ad.mul(self.sn, y))
        py = ad.add(ad.mul(self.sn, x), ad.mul(self.cs, y))
        return px, py


@dataclass(frozen=True)
class SE2:
    """Planar rigid transform: rotation plus translation (tx, ty)."""

    rot: SO2
    tx: object
    ty: object

    @staticmethod
    def identity() -> "SE2":
        return SE2(SO2.identity(), 0.0, 0.0)

    @staticmethod
    def from_xytheta(x: float, y: float, theta: float) -> "SE2":
        return SE2(SO2(np.cos(theta), np.sin(theta)), x, y)

    def compose(self, other: "SE2") -> "SE2":
        px, py = self.rot.apply(other.tx, other.ty)
        return SE2(
            self.rot.compose(other.rot),
            ad.add(px, self.tx),
            ad.add(py, self.ty),
        )

    def inverse(self) -> "SE2":
        rinv = self.rot.inverse()
        px, py = rinv.apply(self.tx, self.ty)
        return SE2(rinv, ad.neg(px), ad.neg(py))

    def params(self) -> np.ndarray:
        """Numeric [cos, sin, tx, ty] (also the serialized layout)."""
        return np.array(
            [_fval(self.rot.cs), _fval(self.rot.sn), _fval(self.tx), _fval(self.ty)]
        )

    @staticmethod
    def from_params(p) -> "SE2":
        return SE2(SO2(float(p[0]), float(p[1])).normalized(), float(p[2]), float(p[3]))


def _vmat_coeffs(omega):
    """Coefficients a = sin(w)/w, b = (1-cos(w))/w with a small-angle branch."""
    w = _fval(omega)
    if abs(w) < SMALL_ANGLE:
        w2 = ad.mul(omega, omega)
        a = ad.sub(1.0, ad.div(w2, 6.0))
        b = ad.mul(omega, 0.5)
    else:
        a = ad.div(ad.sin(omega), omega)
        b = ad.div(ad.sub(1.0, ad.cos(omega)), omega)
    return a, b


def se2_exp(vx, vy, omega) -> SE2:
    """Closed-form exponential map from a twist to a transform."""
    a, b = _vmat_coeffs(omega)
    tx = ad.sub(ad.mul(a, vx), ad.mul(b, vy))
    ty = ad.add(ad.mul(b, vx), ad.mul(a, vy))
    rot = SO2(ad.cos(omega), ad.sin(omega))
    return SE2(rot, tx, ty)


def se2_log(g: SE2):
    """Logarithm map; returns the twist components (vx, vy, omega).

    omega is taken on the principal branch (-pi, pi].
    """
    theta = ad.atan2(g.rot.sn, g.rot.cs)
    if _fval(theta) == -np.pi:
        theta = ad.neg(theta)
    a, b = _vmat_coeffs(theta)
    det = ad.add(ad.mul(a, a), ad.mul(b, b))
    vx = ad.div(ad.add(ad.mul(a, g.tx), ad.mul(b, g.ty)), det)
    vy = ad.div(ad.sub(ad.mul(a, g.ty), ad.mul(b, g.tx)), det)
    return vx, vy, theta


def se2_exp_vec(t) -> SE2:
    return se2_exp(_comp(t, 0), _comp(t, 1), _comp(t, 2))


def se2_log_vec(g: SE2):
    vx, vy, omega = se2_log(g)
    if _is_var(vx, vy, omega):
        return ad.stack([vx, vy, omega])
    return np.array([float(vx), float(vy), float(omega)])


@dataclass(frozen=True)
class Se2State:
    """Pose with scalar forward and angular velocity (tangent dim 5)."""

    pose: SE2
    vel: object
    omega: object

    def params(self) -> np.ndarray:
        return np.concatenate([self.pose.params(), [_fval(self.vel), _fval(self.omega)]])

    @staticmethod
    def from_params(p) -> "Se2State":
        return Se2State(SE2.from_params(p[:4]), float(p[4]), float(p[5]))


@dataclass(frozen=True)
class ManifoldKind:
    """Kind tag for variable domains: Euclidean(n), SE(2), or SE(2)+velocities."""

    name: str
    n: int

    @staticmethod
    def euclidean(n: int) -> "ManifoldKind":
        if n < 1:
            raise ContractError("Euclidean manifold needs dimension >= 1")
        return ManifoldKind("euclidean", n)

    @staticmethod
    def se2() -> "ManifoldKind":
        return ManifoldKind("se2", 3)

    @staticmethod
    def se2_vel() -> "ManifoldKind":
        return ManifoldKind("se2_vel", 5)

    @property
    def tangent_dim(self) -> int:
        return self.n

    @property
    def param_dim(self) -> int:
        if self.name == "euclidean":
            return self.n
        if self.name == "se2":
            return 4
        return 6


def identity_value(kind: ManifoldKind):
    if kind.name == "euclidean":
        return np.zeros(kind.n)
    if kind.name == "se2":
        return SE2.identity()
    return Se2State(SE2.identity(), 0.0, 0.0)


def _delta_len(delta) -> int:
    if isinstance(delta, ad.Var):
        return delta.value.shape[0]
    return np.shape(delta)[0]


def oplus(kind: ManifoldKind, x, delta):
    """Generalized addition: retract a tangent vector onto the manifold."""
    if _delta_len(delta) != kind.tangent_dim:
        raise ContractError(
            f"oplus: tangent dim {_delta_len(delta)} != {kind.tangent_dim}"
        )
    if kind.name == "euclidean":
        return ad.add(x, delta)
    if kind.name == "se2":
        return x.compose(se2_exp_vec(delta))
    pose = x.pose.compose(
        se2_exp(_comp(delta, 0), _comp(delta, 1), _comp(delta, 2))
    )
    return Se2State(
        pose,
        ad.add(x.vel, _comp(delta, 3)),
        ad.add(x.omega, _comp(delta, 4)),
    )


def ominus(kind: ManifoldKind, y, x):
    """Generalized subtraction: local coordinates of y in the chart at x."""
    if kind.name == "euclidean":
        return ad.sub(y, x)
    if kind.name == "se2":
        return se2_log_vec(x.inverse().compose(y))
    vx, vy, om = se2_log(x.pose.inverse().compose(y.pose))
    dv = ad.sub(y.vel, x.vel)
    dw = ad.sub(y.omega, x.omega)
    if _is_var(vx, vy, om, dv, dw):
        return ad.stack([vx, vy, om, dv, dw])
    return np.array([float(vx), float(vy), float(om), float(dv), float(dw)])


def freeze(kind: ManifoldKind, x):
    """Numeric copy of a manifold value whose components may be Vars."""
    if kind.name == "euclidean":
        return np.array(ad.value_of(x), dtype=np.float64)
    if kind.name == "se2":
        return SE2.from_params(x.params())
    return Se2State(SE2.from_params(x.pose.params()), _fval(x.vel), _fval(x.omega))


def value_to_array(kind: ManifoldKind, x) -> np.ndarray:
    """Serialized layout: Euclidean values verbatim, SE(2) as [cos, sin, tx, ty]."""
    if kind.name == "euclidean":
        return np.asarray([_fval(c) for c in x]) if isinstance(x, (list, tuple)) else np.asarray(x, dtype=np.float64)
    return x.params()


def value_from_array(kind: ManifoldKind, arr) -> object:
    arr = np.asarray(arr, dtype=np.float64)
    if kind.name == "euclidean":
        if arr.shape != (kind.n,):
            raise ContractError(f"expected length-{kind.n} value")
        return arr.copy()
    if kind.name == "se2":
        return SE2.from_params(arr)
    return Se2State.from_params(arr)
