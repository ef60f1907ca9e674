"""Factor residuals and virtual-sensor models for both estimation tasks.

Disk tracking: Euclidean(4) states (px, py, vx, vy) under spring/drag
dynamics, observed through a centroid-based virtual sensor with a learnable
affine correction and a constant or feature-conditioned noise head.

Planar odometry: SE(2) pose plus scalar forward/angular velocity, a velocity
integrator transition with a shared learnable covariance, a velocity virtual
sensor, and a first-timestep prior that pins the velocities with square-root
precision 1e7 (a soft hard-constraint).

Residual functions are written against the autodiff primitives, so the same
code evaluates numerically and records on a tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import lie
from .graph import (
    ConstantDiagonal,
    Factor,
    FixedDiagonal,
    Heteroscedastic,
    MeasurementPayload,
)

DiskState = np.ndarray  # (px, py, vx, vy), Euclidean(4)
Se2State = lie.Se2State

DISK_SPRING = 0.05
DISK_DRAG = 0.0075


# ---------------------------------------------------------------------------
# Disk dynamics
# ---------------------------------------------------------------------------


def disk_dynamics_step(x, spring=DISK_SPRING, drag=DISK_DRAG):
    """p' = p + v;  v' = v - spring * p - drag * v^2 * sign(v) (elementwise).

    Shared by the simulator and the transition factor so that noiseless
    rollouts produce exactly zero residuals.
    """
    p = x[0:2] if not isinstance(x, ad.Var) else ad.getitem(x, slice(0, 2))
    v = x[2:4] if not isinstance(x, ad.Var) else ad.getitem(x, slice(2, 4))
    p_next = ad.add(p, v)
    drag_term = ad.mul(drag, ad.mul(v, ad.absval(v)))
    v_next = ad.sub(ad.sub(v, ad.mul(spring, p)), drag_term)
    return ad.concat([p_next, v_next])


def make_disk_transition(t, q_cov, spring=DISK_SPRING, drag=DISK_DRAG) -> Factor:
    """Transition factor r = f(X_t) - X_{t+1} with fixed process noise."""

    def residual(values, payload, penv):
        return ad.sub(disk_dynamics_step(values[0], spring, drag), values[1])

    noise = FixedDiagonal(1.0 / np.sqrt(np.asarray(q_cov, dtype=np.float64)))

    def transition(x, penv):
        return disk_dynamics_step(x, spring, drag)

    return Factor(
        kind="disk_transition",
        var_ids=(t, t + 1),
        dim=4,
        residual=residual,
        noise=noise,
        transition=transition,
        t=t,
    )


def make_disk_vision(t, sensor, payload: MeasurementPayload) -> Factor:
    """Vision factor r = z(theta) - p with noise from the sensor head."""

    def residual(values, payload, penv):
        p = (
            ad.getitem(values[0], slice(0, 2))
            if isinstance(values[0], ad.Var)
            else values[0][0:2]
        )
        return ad.sub(sensor.mean(penv, payload), p)

    return Factor(
        kind="disk_vision",
        var_ids=(t,),
        dim=2,
        residual=residual,
        noise=sensor.noise_model(2),
        payload=payload,
        t=t,
    )


# ---------------------------------------------------------------------------
# Planar odometry factors
# ---------------------------------------------------------------------------


def se2_integrate(state: Se2State, dt=1.0) -> Se2State:
    """Velocity integrator: pose' = pose * exp((v dt, 0, omega dt))."""
    step = lie.se2_exp(ad.mul(state.vel, dt), 0.0, ad.mul(state.omega, dt))
    return Se2State(state.pose.compose(step), state.vel, state.omega)


def make_se2_transition(t, noise_slice="odom.transition.log_sqrt_prec", dt=1.0) -> Factor:
    """Pose residual log(f(X_t)^-1 T_{t+1}) plus velocity differences.

    All transition factors share one learnable 5-dim diagonal covariance.
    """

    def residual(values, payload, penv):
        a, b = values
        predicted = se2_integrate(a, dt)
        pose_err = lie.se2_log(predicted.pose.inverse().compose(b.pose))
        dv = ad.sub(b.vel, a.vel)
        dw = ad.sub(b.omega, a.omega)
        return ad.stack([pose_err[0], pose_err[1], pose_err[2], dv, dw])

    def transition(x, penv):
        return se2_integrate(x, dt)

    return Factor(
        kind="se2_transition",
        var_ids=(t, t + 1),
        dim=5,
        residual=residual,
        noise=ConstantDiagonal(noise_slice, 5),
        transition=transition,
        t=t,
    )


def make_se2_velocity(t, sensor, payload: MeasurementPayload) -> Factor:
    """Velocity factor r = [z_v - v, z_omega - omega]."""

    def residual(values, payload, penv):
        z = sensor.mean(penv, payload)
        zv = ad.getitem(z, 0)
        zw = ad.getitem(z, 1)
        return ad.stack([ad.sub(zv, values[0].vel), ad.sub(zw, values[0].omega)])

    return Factor(
        kind="se2_velocity",
        var_ids=(t,),
        dim=2,
        residual=residual,
        noise=sensor.noise_model(2),
        payload=payload,
        t=t,
    )


SE2_PRIOR_VEL_SQRT_PREC = 1e7
SE2_PRIOR_POSE_SQRT_PREC = 1.0


def make_se2_prior(anchor: Se2State, t=0) -> Factor:
    """Anchor the first state: pose softly, velocities near-rigidly.

    Written as anchor-minus-state so the linearized block at zero residual is
    uniformly minus the square-root precision, like the Euclidean prior.
    """

    def residual(values, payload, penv):
        x = values[0]
        pose_err = lie.se2_log(x.pose.inverse().compose(anchor.pose))
        dv = ad.sub(anchor.vel, x.vel)
        dw = ad.sub(anchor.omega, x.omega)
        return ad.stack([pose_err[0], pose_err[1], pose_err[2], dv, dw])

    noise = FixedDiagonal(
        np.array(
            [
                SE2_PRIOR_POSE_SQRT_PREC,
                SE2_PRIOR_POSE_SQRT_PREC,
                SE2_PRIOR_POSE_SQRT_PREC,
                SE2_PRIOR_VEL_SQRT_PREC,
                SE2_PRIOR_VEL_SQRT_PREC,
            ]
        )
    )
    return Factor(
        kind="se2_prior", var_ids=(t,), dim=5, residual=residual, noise=noise, t=t
    )


def make_euclidean_prior(t, z, noise) -> Factor:
    """Direct prior r = z - x on a Euclidean variable."""
    z = np.asarray(z, dtype=np.float64)

    def residual(values, payload, penv):
        return ad.sub(z, values[0])

    return Factor(
        kind="euclidean_prior",
        var_ids=(t,),
        dim=z.shape[0],
        residual=residual,
        noise=noise,
        t=t,
    )


# ---------------------------------------------------------------------------
# Virtual sensors
# ---------------------------------------------------------------------------


@dataclass
class MlpHead:
    """Feature -> log square-root precision network: 4x dense(64, relu) + dense(out).

    The scalar conditioning feature is scaled to O(1) before the first layer.
    With out_dim smaller than the residual dimension the output is tied
    (broadcast) across residual entries.
    """

    prefix: str
    out_dim: int
    feature_scale: float
    hidden: int = 64
    layers: int = 4

    def slice_names(self):
        names = []
        for i in range(self.layers + 1):
            names += [f"{self.prefix}.w{i + 1}", f"{self.prefix}.b{i + 1}"]
        return names

    def register(self, pstore, rng):
        in_dim = 1
        for i in range(self.layers):
            scale = np.sqrt(2.0 / in_dim)
            pstore.register(
                f"{self.prefix}.w{i + 1}",
                (self.hidden, in_dim),
                rng.normal(0.0, scale, (self.hidden, in_dim)),
            )
            pstore.register(f"{self.prefix}.b{i + 1}", (self.hidden,))
            in_dim = self.hidden
        pstore.register(
            f"{self.prefix}.w{self.layers + 1}",
            (self.out_dim, in_dim),
            rng.normal(0.0, 0.01, (self.out_dim, in_dim)),
        )
        pstore.register(f"{self.prefix}.b{self.layers + 1}", (self.out_dim,))

    def set_output_bias(self, pstore, values):
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.shape[0] != self.out_dim:
            v = np.full(self.out_dim, float(np.mean(v)))
        pstore.set(f"{self.prefix}.b{self.layers + 1}", v)

    def log_sqrt_prec(self, penv, payload, dim):
        h = ad.stack([payload.feature / self.feature_scale])
        for i in range(self.layers):
            w = penv[f"{self.prefix}.w{i + 1}"]
            b = penv[f"{self.prefix}.b{i + 1}"]
            h = ad.relu(ad.add(ad.matvec(w, h), b))
        w = penv[f"{self.prefix}.w{self.layers + 1}"]
        b = penv[f"{self.prefix}.b{self.layers + 1}"]
        out = ad.add(ad.matvec(w, h), b)
        if self.out_dim == dim:
            return out
        return ad.bcast(ad.getitem(out, 0), (dim,))


@dataclass
class ConstHead:
    """A single learnable log square-root precision slice (possibly tied)."""

    slice_name: str
    size: int

    def slice_names(self):
        return [self.slice_name]

    def register(self, pstore):
        pstore.register(self.slice_name, (self.size,))

    def set_output_bias(self, pstore, values):
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.shape[0] != self.size:
            v = np.full(self.size, float(np.mean(v)))
        pstore.set(self.slice_name, v)


@dataclass
class VirtualSensor:
    """Affine mean correction on a raw measurement plus a noise head.

    ``payload.z`` holds the raw analytic measurement (centroid or measured
    velocities); the learnable affine map corrects it.  The noise head emits
    log square-root precisions, either constant or conditioned on
    ``payload.feature``.
    """

    prefix: str
    in_dim: int
    out_dim: int
    head: object  # ConstHead | MlpHead

    def mean_slices(self):
        return [f"{self.prefix}.affine_w", f"{self.prefix}.affine_b"]

    def noise_slices(self):
        return self.head.slice_names()

    def register(self, pstore, rng):
        pstore.register(
            f"{self.prefix}.affine_w", (self.out_dim, self.in_dim), np.eye(self.out_dim, self.in_dim)
        )
        pstore.register(f"{self.prefix}.affine_b", (self.out_dim,))
        if isinstance(self.head, MlpHead):
            self.head.register(pstore, rng)
        else:
            self.head.register(pstore)

    def mean(self, penv, payload):
        w = penv[f"{self.prefix}.affine_w"]
        b = penv[f"{self.prefix}.affine_b"]
        return ad.add(ad.matvec(w, payload.z), b)

    def noise_model(self, dim):
        if isinstance(self.head, ConstHead):
            return ConstantDiagonal(self.head.slice_name, dim)

        def head_fn(penv, payload):
            return self.head.log_sqrt_prec(penv, payload, dim)

        return Heteroscedastic(head_fn, dim)

    def emitted_variance(self, pstore, feature, dim=None):
        """Diagonal measurement variance the head assigns to a feature value."""
        dim = dim or self.out_dim
        penv = pstore.env()
        payload = MeasurementPayload(np.zeros(self.in_dim), float(feature))
        s = self.noise_model(dim).log_sqrt_prec(penv, payload)
        return np.exp(-2.0 * np.asarray(ad.value_of(s)))


def make_disk_sensor(noise_kind: str, rng=None, feature_scale=200.0) -> VirtualSensor:
    if noise_kind == "heteroscedastic":
        head = MlpHead("disk.vision.mlp", out_dim=1, feature_scale=feature_scale)
    else:
        head = ConstHead("disk.vision.log_sqrt_prec", 1)  # tied across x/y
    return VirtualSensor("disk.vision", in_dim=2, out_dim=2, head=head)


def make_odom_sensor(noise_kind: str, rng=None) -> VirtualSensor:
    if noise_kind == "heteroscedastic":
        head = MlpHead("odom.vision.mlp", out_dim=2, feature_scale=1.0)
    else:
        head = ConstHead("odom.vision.log_sqrt_prec", 2)
    return VirtualSensor("odom.vision", in_dim=2, out_dim=2, head=head)
