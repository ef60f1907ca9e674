"""Task definitions: data generation, datasets, graph construction, metrics.

Two synthetic tasks exercise the full pipeline:

* ``disk``  - 2D tracking of a red disk under spring/drag dynamics, observed
  through rendered frames with distractor occlusions.  Datasets store the
  extracted centroid measurement and visible-pixel count per frame rather
  than raw images (an optional PNG dump reproduces the frames).
* ``odom2d`` - planar odometry with smooth random velocity profiles, exact
  SE(2) integration for ground truth, and velocity observations whose noise
  scale is a known function of a per-step quality feature (plus an outlier
  mixture), giving a recoverable heteroscedastic structure.

Datasets serialize as newline-delimited JSON: a header line with format
version, config echo and hash, and fold assignments, then one trajectory per
line.  Floats round-trip exactly through repr, so write -> read -> write is
byte-identical.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import factors, filters, learning, lie, solvers
from .errors import ContractError, FormatError, NumericError, SolverError
from .graph import (
    FactorGraph,
    MeasurementPayload,
    ParameterStore,
    VariableAssignment,
)

DATASET_VERSION = 1


# ---------------------------------------------------------------------------
# Disk task: simulation and rendering
# ---------------------------------------------------------------------------


@dataclass
class DiskSimConfig:
    spring: float = factors.DISK_SPRING
    drag: float = factors.DISK_DRAG
    pos_noise_cov: float = 0.1
    vel_noise_cov: float = 2.0
    image_size: int = 120
    disk_radius: float = 8.0
    n_distractors: int = 25
    distractor_radius_min: float = 5.0
    distractor_radius_max: float = 15.0
    length: int = 20
    init_vel_max: float = 5.0

    def to_dict(self):
        return asdict(self)


def simulate_disk_states(cfg: DiskSimConfig, rng, init=None):
    """Roll the spring/drag dynamics with Gaussian process noise.

    States live in frame-centered coordinates (origin at the image center, so
    the spring term attracts toward the middle of the frame); the renderer
    shifts by half the image size to get pixel positions.
    """
    if init is None:
        half = cfg.image_size / 2.0
        init = np.concatenate(
            [
                rng.uniform(-half, half, 2),
                rng.uniform(-cfg.init_vel_max, cfg.init_vel_max, 2),
            ]
        )
    states = [np.asarray(init, dtype=np.float64)]
    pos_std = np.sqrt(cfg.pos_noise_cov)
    vel_std = np.sqrt(cfg.vel_noise_cov)
    for _ in range(cfg.length - 1):
        nxt = np.asarray(
            factors.disk_dynamics_step(states[-1], cfg.spring, cfg.drag)
        ).copy()
        if pos_std > 0:
            nxt[0:2] += rng.normal(0.0, pos_std, 2)
        if vel_std > 0:
            nxt[2:4] += rng.normal(0.0, vel_std, 2)
        states.append(nxt)
    return np.stack(states)


@dataclass
class DiskScene:
    """Distractor geometry for one trajectory (fixed radii/colors/order)."""

    positions: np.ndarray  # (n_distractors, T, 2)
    radii: np.ndarray
    colors: np.ndarray  # (n, 3) uint8, never pure red
    in_front: np.ndarray  # (n,) bool, drawn over the tracked disk


def make_disk_scene(cfg: DiskSimConfig, rng) -> DiskScene:
    n = cfg.n_distractors
    positions = np.zeros((n, cfg.length, 2))
    for i in range(n):
        traj = simulate_disk_states(cfg, rng)
        positions[i] = traj[:, 0:2]
    radii = rng.uniform(cfg.distractor_radius_min, cfg.distractor_radius_max, n)
    colors = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        hue = rng.uniform(0.15, 0.85)  # keeps clear of red
        r, g, b = colorsys.hsv_to_rgb(hue, rng.uniform(0.5, 1.0), rng.uniform(0.6, 1.0))
        colors[i] = (int(r * 255), int(g * 255), int(b * 255))
    in_front = rng.random(n) < 0.5
    return DiskScene(positions, radii, colors, in_front)


_GRID_CACHE: dict = {}


def _pixel_grid(size):
    if size not in _GRID_CACHE:
        centers = np.arange(size) + 0.5
        # xs: column coordinate, ys: row coordinate
        _GRID_CACHE[size] = np.meshgrid(centers, centers)
    return _GRID_CACHE[size]


def _circle_mask(xs, ys, cx, cy, r):
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def visible_red_mask(cfg: DiskSimConfig, pos, scene: DiskScene, t):
    """Pixels showing the tracked disk at step t: its circle minus whatever
    front distractors paint over it (back distractors cannot occlude).

    Positions are frame-centered; pixels are offset by half the image size.
    """
    half = cfg.image_size / 2.0
    xs, ys = _pixel_grid(cfg.image_size)
    mask = _circle_mask(xs, ys, pos[0] + half, pos[1] + half, cfg.disk_radius)
    for i in range(cfg.n_distractors):
        if not scene.in_front[i]:
            continue
        if not mask.any():
            break
        mask &= ~_circle_mask(
            xs,
            ys,
            scene.positions[i, t, 0] + half,
            scene.positions[i, t, 1] + half,
            scene.radii[i],
        )
    return mask, xs, ys


def extract_payload(cfg: DiskSimConfig, pos, scene: DiskScene, t) -> MeasurementPayload:
    """Centroid of visible red pixels and their count; frame center if none."""
    mask, xs, ys = visible_red_mask(cfg, pos, scene, t)
    count = int(mask.sum())
    if count == 0:
        center = cfg.image_size / 2.0
        return MeasurementPayload(np.array([center, center]), 0.0)
    z = np.array([xs[mask].mean(), ys[mask].mean()])
    return MeasurementPayload(z, float(count))


def render_frame(cfg: DiskSimConfig, pos, scene: DiskScene, t) -> np.ndarray:
    """Full RGB rasterization (painter's order) for inspection dumps."""
    half = cfg.image_size / 2.0
    xs, ys = _pixel_grid(cfg.image_size)
    img = np.zeros((cfg.image_size, cfg.image_size, 3), dtype=np.uint8)

    def draw(cx, cy, r, color):
        m = _circle_mask(xs, ys, cx + half, cy + half, r)
        img[m] = color

    for i in range(cfg.n_distractors):
        if not scene.in_front[i]:
            draw(*scene.positions[i, t], scene.radii[i], scene.colors[i])
    draw(pos[0], pos[1], cfg.disk_radius, (255, 0, 0))
    for i in range(cfg.n_distractors):
        if scene.in_front[i]:
            draw(*scene.positions[i, t], scene.radii[i], scene.colors[i])
    return img


def render_and_extract(cfg: DiskSimConfig, states, scene: DiskScene, dump_dir=None):
    """Payload sequence for a trajectory; optionally dump frames as PNGs."""
    payloads = []
    for t in range(states.shape[0]):
        payloads.append(extract_payload(cfg, states[t, 0:2], scene, t))
        if dump_dir is not None:
            from PIL import Image

            img = render_frame(cfg, states[t, 0:2], scene, t)
            Image.fromarray(img).save(f"{dump_dir}/{t}.png")
    return payloads


def disk_full_visibility_count(cfg: DiskSimConfig) -> float:
    """Visible-pixel count of an unoccluded disk at the frame center."""
    xs, ys = _pixel_grid(cfg.image_size)
    c = cfg.image_size / 2.0
    return float(_circle_mask(xs, ys, c, c, cfg.disk_radius).sum())


# ---------------------------------------------------------------------------
# Planar odometry task
# ---------------------------------------------------------------------------


@dataclass
class OdomSimConfig:
    length: int = 100
    dt: float = 1.0
    v_mean: float = 5.0
    v_kappa: float = 0.15
    v_sigma: float = 0.4
    w_kappa: float = 0.25
    w_sigma: float = 0.12
    quality_mean: float = 0.7
    quality_kappa: float = 0.15
    quality_sigma: float = 0.3
    sigma_v_min: float = 0.05
    sigma_v_max: float = 1.5
    sigma_w_min: float = 0.004
    sigma_w_max: float = 0.06
    outlier_rate: float = 0.35
    outlier_scale: float = 8.0

    def to_dict(self):
        return asdict(self)

    def noise_std(self, quality):
        """Observation noise stds as a function of the quality feature."""
        sv = self.sigma_v_min + (self.sigma_v_max - self.sigma_v_min) * (1.0 - quality)
        sw = self.sigma_w_min + (self.sigma_w_max - self.sigma_w_min) * (1.0 - quality)
        return sv, sw


def simulate_odom2d(cfg: OdomSimConfig, rng):
    """Ground-truth states plus velocity observations with quality feature."""
    v = cfg.v_mean
    w = 0.0
    q = cfg.quality_mean
    state = lie.Se2State(lie.SE2.identity(), v, w)
    states = [state]
    zs = []
    qualities = []
    for t in range(cfg.length):
        qualities.append(q)
        sv, sw = cfg.noise_std(q)
        scale = 1.0
        if cfg.outlier_rate > 0 and rng.random() < cfg.outlier_rate * (1.0 - q):
            scale = cfg.outlier_scale
        zs.append(
            np.array(
                [
                    states[t].vel + scale * sv * rng.normal(),
                    states[t].omega + scale * sw * rng.normal(),
                ]
            )
        )
        if t == cfg.length - 1:
            break
        nxt_pose = factors.se2_integrate(states[t], cfg.dt).pose
        v = v + cfg.v_kappa * (cfg.v_mean - v) + cfg.v_sigma * rng.normal()
        w = w + cfg.w_kappa * (0.0 - w) + cfg.w_sigma * rng.normal()
        q = float(
            np.clip(
                q + cfg.quality_kappa * (cfg.quality_mean - q)
                + cfg.quality_sigma * rng.normal(),
                0.0,
                1.0,
            )
        )
        states.append(lie.Se2State(nxt_pose, v, w))
    payloads = [
        MeasurementPayload(zs[t], float(qualities[t])) for t in range(cfg.length)
    ]
    return states, payloads


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryRecord:
    states: np.ndarray  # (T, state param dim)
    z: np.ndarray  # (T, measurement dim)
    feature: np.ndarray  # (T,)

    @property
    def length(self):
        return self.states.shape[0]


@dataclass
class TrajectoryDataset:
    task: str
    records: list
    folds: np.ndarray
    config: dict
    version: int = DATASET_VERSION

    def fold_records(self, fold):
        return [r for r, f in zip(self.records, self.folds) if f == fold]


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]


def generate_dataset(task, n_records, seed, n_folds=10, task_cfg=None, dump_dir=None):
    """Deterministic dataset generation; records get independent child seeds."""
    if task == "disk":
        cfg = task_cfg or DiskSimConfig()
    elif task == "odom2d":
        cfg = task_cfg or OdomSimConfig()
    else:
        raise ContractError(f"unknown task '{task}'")
    seeds = np.random.SeedSequence(seed).spawn(n_records)
    records = []
    for i in range(n_records):
        rng = np.random.default_rng(seeds[i])
        if task == "disk":
            states = simulate_disk_states(cfg, rng)
            scene = make_disk_scene(cfg, rng)
            rec_dump = None
            if dump_dir is not None:
                import os

                rec_dump = f"{dump_dir}/{i}"
                os.makedirs(rec_dump, exist_ok=True)
            payloads = render_and_extract(cfg, states, scene, rec_dump)
            records.append(
                TrajectoryRecord(
                    states,
                    np.stack([p.z for p in payloads]),
                    np.array([p.feature for p in payloads]),
                )
            )
        else:
            states, payloads = simulate_odom2d(cfg, rng)
            kind = lie.ManifoldKind.se2_vel()
            records.append(
                TrajectoryRecord(
                    np.stack([lie.value_to_array(kind, s) for s in states]),
                    np.stack([p.z for p in payloads]),
                    np.array([p.feature for p in payloads]),
                )
            )
    folds = np.arange(n_records) % n_folds
    return TrajectoryDataset(task, records, folds, {"task": task, **cfg.to_dict(), "seed": seed, "n_folds": n_folds})


def write_dataset(path, ds: TrajectoryDataset):
    header = {
        "format": "smoothlearn-dataset",
        "version": ds.version,
        "task": ds.task,
        "n_records": len(ds.records),
        "folds": [int(f) for f in ds.folds],
        "config": ds.config,
        "config_hash": config_hash(ds.config),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in ds.records:
            fh.write(
                json.dumps(
                    {
                        "states": rec.states.tolist(),
                        "z": rec.z.tolist(),
                        "feature": rec.feature.tolist(),
                    }
                )
                + "\n"
            )


def read_dataset(path) -> TrajectoryDataset:
    with open(path) as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as e:
            raise FormatError(f"bad dataset header: {e}") from e
        if header.get("format") != "smoothlearn-dataset":
            raise FormatError("not a dataset file")
        if header.get("version") != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {header.get('version')}")
        records = []
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            records.append(
                TrajectoryRecord(
                    np.asarray(obj["states"], dtype=np.float64),
                    np.asarray(obj["z"], dtype=np.float64),
                    np.asarray(obj["feature"], dtype=np.float64),
                )
            )
    if len(records) != header["n_records"]:
        raise FormatError("dataset record count mismatch")
    return TrajectoryDataset(
        header["task"],
        records,
        np.asarray(header["folds"], dtype=int),
        header["config"],
        header["version"],
    )


# ---------------------------------------------------------------------------
# Task models: graph construction, training glue, metrics
# ---------------------------------------------------------------------------


class TaskModel:
    """Shared training/evaluation glue; subclasses define the factors."""

    task = ""

    def __init__(self, noise_kind="constant", sim_cfg=None):
        if noise_kind not in ("constant", "heteroscedastic"):
            raise ContractError(f"unknown noise kind '{noise_kind}'")
        self.noise_kind = noise_kind
        self.sim_cfg = sim_cfg
        self.sensor = None

    # -- parameters ---------------------------------------------------------

    def mean_slices(self):
        return self.sensor.mean_slices()

    def noise_slices(self):
        return list(self.sensor.noise_slices())

    # -- pretraining --------------------------------------------------------

    def _sensor_pairs(self, records):
        raise NotImplementedError

    def pretrain_sensor(self, pstore, records, cfg, rng):
        """MSE fit of the sensor's affine mean map on raw/target pairs."""
        xs, ys = self._sensor_pairs(records)
        n = xs.shape[0]
        w_name, b_name = self.sensor.mean_slices()
        state = learning.AdamState.init(pstore.values.shape[0])
        batch = min(256, n)
        for _ in range(cfg.pretrain_epochs):
            perm = rng.permutation(n)
            for b0 in range(0, n, batch):
                idx = perm[b0 : b0 + batch]
                tape = ad.Tape()
                penv = pstore.env(tape, tracked={w_name, b_name})
                pred = ad.matmul(penv[w_name], xs[idx].T)
                pred = ad.add(pred, ad.bcast_col(penv[b_name], len(idx)))
                err = ad.sub(pred, ys[idx].T)
                loss = ad.div(ad.vsum(ad.mul(err, err)), float(len(idx)))
                gw, gb = ad.backward(loss, [penv[w_name], penv[b_name]])
                flat = learning._flat_grad(pstore, {w_name: gw, b_name: gb})
                pstore.values, state = learning.adam_step(
                    pstore.values, flat, state, cfg.pretrain_lr
                )

    def sensor_rmse(self, pstore, records):
        xs, ys = self._sensor_pairs(records)
        penv = pstore.env()
        w = penv[self.sensor.mean_slices()[0]]
        b = penv[self.sensor.mean_slices()[1]]
        pred = xs @ w.T + b
        return np.sqrt(np.mean((pred - ys) ** 2, axis=0))

    def bias_init_noise(self, pstore, rmse):
        """Start noise heads at the pretrained error scale: s = -log(rmse)."""
        rmse = np.maximum(np.asarray(rmse, dtype=np.float64), 1e-6)
        self.sensor.head.set_output_bias(pstore, -np.log(rmse))

    # -- training glue ------------------------------------------------------

    def slice_record(self, record, window):
        """Non-overlapping fixed-length windows of a record."""
        if window is None or window >= record.length:
            return [record]
        out = []
        for s in range(0, record.length - window + 1, window):
            out.append(
                TrajectoryRecord(
                    record.states[s : s + window],
                    record.z[s : s + window],
                    record.feature[s : s + window],
                )
            )
        return out

    def ekf_loss_and_grads(self, graph, x_gt, pstore, trainable, alpha):
        return filters.ekf_mse_loss(graph, x_gt, pstore, trainable, alpha)

    def quick_val_metric(self, pstore, dataset, val_fold, n_records, estimator, solver_cfg):
        if val_fold is None:
            return float("nan")
        report = evaluate(
            pstore,
            dataset,
            val_fold,
            estimator,
            self,
            solver_cfg,
            max_records=n_records,
        )
        return float(report.mean()[0])

    # -- evaluation ---------------------------------------------------------

    def metric_names(self):
        raise NotImplementedError

    def record_metrics(self, record, estimate: VariableAssignment):
        raise NotImplementedError


class DiskModel(TaskModel):
    task = "disk"

    def __init__(self, noise_kind="constant", sim_cfg=None, learn_transition=False):
        super().__init__(noise_kind, sim_cfg or DiskSimConfig())
        self.learn_transition = learn_transition
        self.sensor = factors.make_disk_sensor(
            noise_kind, feature_scale=disk_full_visibility_count(self.sim_cfg)
        )

    def init_params(self, rng) -> ParameterStore:
        ps = ParameterStore()
        self.sensor.register(ps, rng)
        # Calibrated start: the raw centroid is in pixel coordinates, states
        # are frame-centered, so the affine bias begins at minus the center.
        half = self.sim_cfg.image_size / 2.0
        ps.set("disk.vision.affine_b", [-half, -half])
        if self.learn_transition:
            ps.register("disk.transition.log_sqrt_prec", (4,))
        return ps

    def noise_slices(self):
        out = list(self.sensor.noise_slices())
        if self.learn_transition:
            out.append("disk.transition.log_sqrt_prec")
        return out

    def _transition_noise(self):
        cfg = self.sim_cfg
        return np.array(
            [cfg.pos_noise_cov, cfg.pos_noise_cov, cfg.vel_noise_cov, cfg.vel_noise_cov]
        )

    def build(self, record: TrajectoryRecord):
        cfg = self.sim_cfg
        graph = FactorGraph()
        horizon = record.length
        for _ in range(horizon):
            graph.add_variable(lie.ManifoldKind.euclidean(4))
        for t in range(horizon - 1):
            f = factors.make_disk_transition(
                t, self._transition_noise(), cfg.spring, cfg.drag
            )
            if self.learn_transition:
                from .graph import ConstantDiagonal

                f.noise = ConstantDiagonal("disk.transition.log_sqrt_prec", 4)
            graph.add_factor(f)
        for t in range(horizon):
            payload = MeasurementPayload(record.z[t].copy(), float(record.feature[t]))
            graph.add_factor(factors.make_disk_vision(t, self.sensor, payload))
        graph.validate()
        x_gt = VariableAssignment(graph, [record.states[t].copy() for t in range(horizon)])
        return graph, x_gt

    def _sensor_pairs(self, records):
        xs = np.concatenate([r.z for r in records])
        ys = np.concatenate([r.states[:, 0:2] for r in records])
        return xs, ys

    def alpha(self, supervision, records):
        if supervision == "position":
            return np.array([1.0, 1.0, 0.0, 0.0])
        if supervision == "velocity":
            v = np.concatenate([r.states[:, 2:4] for r in records])
            stds = np.maximum(v.std(axis=0), 1e-6)
            return np.array([0.0, 0.0, 1.0 / stds[0], 1.0 / stds[1]])
        return np.ones(4)

    def initial_guess(self, pstore, record) -> VariableAssignment:
        zs = self.raw_positions(pstore, record)
        vels = np.diff(zs, axis=0)
        vels = np.vstack([vels, vels[-1:]]) if len(zs) > 1 else np.zeros_like(zs)
        values = [np.concatenate([zs[t], vels[t]]) for t in range(record.length)]
        graph, _ = self.build(record)
        return VariableAssignment(graph, values)

    def raw_positions(self, pstore, record):
        penv = pstore.env()
        w = penv["disk.vision.affine_w"]
        b = penv["disk.vision.affine_b"]
        return record.z @ w.T + b

    def raw_estimate(self, pstore, record) -> VariableAssignment:
        graph, _ = self.build(record)
        zs = self.raw_positions(pstore, record)
        values = [
            np.concatenate([zs[t], np.zeros(2)]) for t in range(record.length)
        ]
        return VariableAssignment(graph, values)

    def metric_names(self):
        return ["rmse_px"]

    def record_metrics(self, record, estimate):
        err = np.stack(
            [estimate[t][0:2] - record.states[t, 0:2] for t in range(record.length)]
        )
        return np.array([float(np.sqrt(np.mean(np.sum(err**2, axis=1))))])


class OdomModel(TaskModel):
    task = "odom2d"

    def __init__(self, noise_kind="constant", sim_cfg=None):
        super().__init__(noise_kind, sim_cfg or OdomSimConfig())
        self.sensor = factors.make_odom_sensor(noise_kind)

    def init_params(self, rng) -> ParameterStore:
        ps = ParameterStore()
        self.sensor.register(ps, rng)
        ps.register("odom.transition.log_sqrt_prec", (5,))  # identity covariance
        return ps

    def noise_slices(self):
        return list(self.sensor.noise_slices()) + ["odom.transition.log_sqrt_prec"]

    def _states_of(self, record):
        kind = lie.ManifoldKind.se2_vel()
        return [lie.value_from_array(kind, record.states[t]) for t in range(record.length)]

    def build(self, record: TrajectoryRecord):
        graph = FactorGraph()
        horizon = record.length
        for _ in range(horizon):
            graph.add_variable(lie.ManifoldKind.se2_vel())
        for t in range(horizon - 1):
            graph.add_factor(factors.make_se2_transition(t, dt=self.sim_cfg.dt))
        for t in range(horizon):
            payload = MeasurementPayload(record.z[t].copy(), float(record.feature[t]))
            graph.add_factor(factors.make_se2_velocity(t, self.sensor, payload))
        states = self._states_of(record)
        graph.add_factor(factors.make_se2_prior(states[0]))
        graph.validate()
        return graph, VariableAssignment(graph, states)

    def _sensor_pairs(self, records):
        xs = np.concatenate([r.z for r in records])
        ys = np.concatenate([r.states[:, 4:6] for r in records])
        return xs, ys

    def alpha(self, supervision, records):
        if supervision == "position":
            return np.array([1.0, 1.0, 0.0, 0.0, 0.0])
        if supervision == "velocity":
            vw = np.concatenate([r.states[:, 4:6] for r in records])
            stds = np.maximum(vw.std(axis=0), 1e-6)
            return np.array([0.0, 0.0, 0.0, 1.0 / stds[0], 1.0 / stds[1]])
        return np.ones(5)

    def corrected_velocities(self, pstore, record):
        penv = pstore.env()
        w = penv["odom.vision.affine_w"]
        b = penv["odom.vision.affine_b"]
        return record.z @ w.T + b

    def _dead_reckon(self, pstore, record):
        zs = self.corrected_velocities(pstore, record)
        kind = lie.ManifoldKind.se2_vel()
        anchor = lie.value_from_array(kind, record.states[0])
        values = [lie.Se2State(anchor.pose, float(zs[0, 0]), float(zs[0, 1]))]
        for t in range(1, record.length):
            prev = values[t - 1]
            pose = factors.se2_integrate(prev, self.sim_cfg.dt).pose
            values.append(lie.Se2State(pose, float(zs[t, 0]), float(zs[t, 1])))
        return values

    def initial_guess(self, pstore, record) -> VariableAssignment:
        graph, _ = self.build(record)
        return VariableAssignment(graph, self._dead_reckon(pstore, record))

    def raw_estimate(self, pstore, record) -> VariableAssignment:
        return self.initial_guess(pstore, record)

    def metric_names(self):
        return ["m_per_m", "deg_per_m"]

    def record_metrics(self, record, estimate):
        gt_xy = record.states[:, 2:4]
        path_len = float(np.sum(np.linalg.norm(np.diff(gt_xy, axis=0), axis=1)))
        path_len = max(path_len, 1e-9)
        last = estimate[record.length - 1]
        gt_last = record.states[-1]
        pos_err = float(
            np.hypot(
                float(ad.value_of(last.pose.tx)) - gt_last[2],
                float(ad.value_of(last.pose.ty)) - gt_last[3],
            )
        )
        gt_rot = lie.SO2(gt_last[0], gt_last[1])
        est_rot = last.pose.rot
        dtheta = np.arctan2(
            gt_rot.cs * float(ad.value_of(est_rot.sn))
            - gt_rot.sn * float(ad.value_of(est_rot.cs)),
            gt_rot.cs * float(ad.value_of(est_rot.cs))
            + gt_rot.sn * float(ad.value_of(est_rot.sn)),
        )
        heading_err_deg = abs(np.degrees(dtheta))
        return np.array([pos_err / path_len, heading_err_deg / path_len])


def make_model(task, noise_kind, sim_cfg=None, **kwargs) -> TaskModel:
    if task == "disk":
        return DiskModel(noise_kind, sim_cfg, **kwargs)
    if task == "odom2d":
        return OdomModel(noise_kind, sim_cfg)
    raise ContractError(f"unknown task '{task}'")


def build_graph(record, task, model: TaskModel):
    """Chain factor graph plus ground-truth assignment for one record."""
    if model.task != task:
        raise ContractError(f"model is for task '{model.task}', not '{task}'")
    return model.build(record)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    task: str
    fold: int
    estimator: str
    names: list
    values: np.ndarray  # (n_records, n_metrics)
    failures: int = 0

    def mean(self):
        return self.values.mean(axis=0)

    def stderr(self):
        n = self.values.shape[0]
        if n < 2:
            return np.zeros(self.values.shape[1])
        return self.values.std(axis=0, ddof=1) / np.sqrt(n)


def evaluate(
    pstore,
    dataset: TrajectoryDataset,
    fold,
    estimator,
    model: TaskModel,
    solver_cfg=None,
    max_records=None,
) -> MetricReport:
    """Per-record metrics over one held-out fold for a chosen estimator."""
    solver_cfg = solver_cfg or solvers.SolverConfig()
    records = dataset.fold_records(fold)
    if not records:
        raise ContractError(f"fold {fold} has no records")
    if max_records is not None:
        records = records[:max_records]
    rows = []
    failures = 0
    for record in records:
        try:
            if estimator == "smoother":
                graph, _ = model.build(record)
                x0 = model.initial_guess(pstore, record)
                res = solvers.map_inference(graph, x0, pstore.env(), solver_cfg)
                est = res.assignment
                if np.any(np.diff(res.costs) > 0):
                    raise SolverError("accepted cost increased")
            elif estimator == "ekf":
                graph, x_gt = model.build(record)
                est = filters.ekf_estimate(graph, x_gt[0], pstore)
            elif estimator == "raw":
                est = model.raw_estimate(pstore, record)
            elif estimator == "gt-echo":
                graph, est = model.build(record)
            else:
                raise ContractError(f"unknown estimator '{estimator}'")
            rows.append(model.record_metrics(record, est))
        except (NumericError, SolverError):
            failures += 1
    if not rows:
        raise SolverError(f"all {len(records)} records failed in fold {fold}")
    return MetricReport(
        model.task, int(fold), estimator, model.metric_names(), np.stack(rows), failures
    )
