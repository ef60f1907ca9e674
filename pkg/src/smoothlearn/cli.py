"""Command-line entry point: dataset generation, training, evaluation, bundles.

Configuration is a flat file of dotted ``key = value`` lines overridable with
repeated ``--set key=value`` flags; unknown keys are rejected.  Every run
writes a resolved-config echo and a manifest with content hashes of its
inputs, so runs are self-describing and reproducible: the same seed yields
byte-identical CSV outputs.

Exit codes: 0 success, 1 configuration error, 2 runtime/numeric error,
3 partial experiment failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys

import numpy as np

from . import factors, filters, learning, solvers, tasks
from .errors import ConfigError, SmoothlearnError
from .graph import ParameterStore

DEFAULTS = {
    "run.seed": 0,
    "model.task": "disk",
    "model.noise": "constant",
    "data.records": 500,
    "data.length": 0,  # 0: task default (disk 20, odom2d 100)
    "data.folds": 10,
    "data.dump_frames": False,
    "dynamics.drag": 0.0075,
    "disk.distractors": 25,
    "solver.backend": "cholesky",
    "solver.cg_tol": 1e-10,
    "solver.lm_lambda0": 1e-4,
    "solver.max_steps": 50,
    "solver.step_tol": 1e-10,
    "solver.cost_tol": 1e-12,
    "estimator": "smoother",
    "train.loss": "e2e-mse",
    "train.k": 5,
    "train.lr": 0.02,
    "train.epochs": 6,
    "train.batch": 8,
    "train.pretrain_epochs": 40,
    "train.pretrain_lr": 0.05,
    "train.pretrain_fraction": 0.5,
    "train.supervision": "position",
    "train.window": 0,
    "train.windows_per_record": 0,
    "train.folds": "0-4",
    "eval.folds": "5-9",
    "eval.max_records": 0,  # 0: all records in the fold
    "experiment.seeds": 3,
    "experiment.records": 0,  # 0: bundle default
    "experiment.epochs": 0,  # 0: bundle default
    "experiment.nll_epochs": 40,
}


class RunConfig:
    """Resolved configuration: defaults, then file, then --set overrides."""

    def __init__(self, path=None, overrides=()):
        self.values = dict(DEFAULTS)
        if path is not None:
            with open(path) as fh:
                for ln, line in enumerate(fh, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{ln}: expected 'key = value'")
                    key, val = (s.strip() for s in line.split("=", 1))
                    self._set(key, val)
        for ov in overrides:
            if "=" not in ov:
                raise ConfigError(f"--set needs key=value, got '{ov}'")
            key, val = (s.strip() for s in ov.split("=", 1))
            self._set(key, val)
        env_seed = os.environ.get("SMOOTHLEARN_SEED")
        if env_seed is not None:
            self._set("run.seed", env_seed)

    def _set(self, key, raw):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key '{key}'")
        default = DEFAULTS[key]
        try:
            if isinstance(default, bool):
                val = raw if isinstance(raw, bool) else raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                val = int(raw)
            elif isinstance(default, float):
                val = float(raw)
            else:
                val = str(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for '{key}': {raw}") from e
        self.values[key] = val

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key, value):
        self._set(key, str(value))

    def echo(self) -> str:
        return "\n".join(f"{k} = {self.values[k]}" for k in sorted(self.values)) + "\n"

    def solver_config(self) -> solvers.SolverConfig:
        return solvers.SolverConfig(
            backend=self["solver.backend"],
            cg_tol=self["solver.cg_tol"],
            lm_lambda0=self["solver.lm_lambda0"],
            max_steps=self["solver.max_steps"],
            step_tol=self["solver.step_tol"],
            cost_tol=self["solver.cost_tol"],
        )


def parse_folds(spec) -> tuple:
    """'0-4' or '1,3,5' or '7' -> tuple of fold indices."""
    out = []
    for part in str(spec).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ConfigError(f"empty fold specification '{spec}'")
    return tuple(out)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _write_run_files(outdir, cfg: RunConfig, inputs: dict):
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "config-echo.txt"), "w") as fh:
        fh.write(cfg.echo())
    manifest = {
        "seed": cfg["run.seed"],
        "inputs": {name: file_hash(p) for name, p in inputs.items()},
        "dataset_version": tasks.DATASET_VERSION,
        "checkpoint_format": "smoothlearn-checkpoint-v1",
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _task_sim_cfg(cfg: RunConfig, task):
    length = cfg["data.length"]
    if task == "disk":
        return tasks.DiskSimConfig(
            drag=cfg["dynamics.drag"],
            n_distractors=cfg["disk.distractors"],
            length=length or 20,
        )
    return tasks.OdomSimConfig(length=length or 100)


def _make_model(cfg: RunConfig, task):
    return tasks.make_model(task, cfg["model.noise"], _task_sim_cfg(cfg, task))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig, outdir) -> int:
    task = cfg["model.task"]
    dump = None
    if cfg["data.dump_frames"]:
        dump = os.path.join(outdir, "frames")
        os.makedirs(dump, exist_ok=True)
    os.makedirs(outdir, exist_ok=True)
    ds = tasks.generate_dataset(
        task,
        cfg["data.records"],
        cfg["run.seed"],
        n_folds=cfg["data.folds"],
        task_cfg=_task_sim_cfg(cfg, task),
        dump_dir=dump,
    )
    path = os.path.join(outdir, f"dataset-{task}.jsonl")
    tasks.write_dataset(path, ds)
    _write_run_files(outdir, cfg, {"dataset": path})
    print(f"wrote {path} ({len(ds.records)} records, {cfg['data.folds']} folds)")
    return 0


def _train_config(cfg: RunConfig) -> learning.TrainConfig:
    return learning.TrainConfig(
        lr=cfg["train.lr"],
        batch_size=cfg["train.batch"],
        epochs=cfg["train.epochs"],
        seed=cfg["run.seed"],
        loss=cfg["train.loss"],
        k_steps=cfg["train.k"],
        supervision=cfg["train.supervision"],
        estimator=cfg["estimator"] if cfg["estimator"] in ("smoother", "ekf") else "smoother",
        pretrain_epochs=cfg["train.pretrain_epochs"],
        pretrain_lr=cfg["train.pretrain_lr"],
        pretrain_fraction=cfg["train.pretrain_fraction"],
        train_folds=parse_folds(cfg["train.folds"]),
        window=cfg["train.window"] or None,
        windows_per_record=cfg["train.windows_per_record"] or None,
    )


def cmd_train(cfg: RunConfig, dataset_path, outdir) -> int:
    ds = tasks.read_dataset(dataset_path)
    model = _make_model(cfg, ds.task)
    tc = _train_config(cfg)
    os.makedirs(outdir, exist_ok=True)
    ckpt = os.path.join(outdir, "checkpoint.ckpt")
    metrics_csv = os.path.join(outdir, "metrics.csv")
    pstore, metrics = learning.train(
        ds, model, tc, cfg.solver_config(), metrics_path=metrics_csv, checkpoint_path=ckpt
    )
    _write_run_files(outdir, cfg, {"dataset": dataset_path, "checkpoint": ckpt})
    if metrics:
        last = metrics[-1]
        print(
            f"trained {tc.loss}/{cfg['model.noise']} ({tc.estimator}): "
            f"final loss {last['loss']:.6g}, grad norm {last['grad_norm']:.3g}"
        )
    else:
        print("wrote initialization checkpoint (0 epochs)")
    print(f"checkpoint: {ckpt}")
    return 0


def _metric_row(report: tasks.MetricReport):
    row = {"fold": report.fold, "n_records": report.values.shape[0], "failures": report.failures}
    for i, name in enumerate(report.names):
        row[f"{name}_mean"] = float(report.mean()[i])
        row[f"{name}_stderr"] = float(report.stderr()[i])
    return row


def _write_csv(path, rows, columns):
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(c, "")) for c in columns) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cmd_eval(cfg: RunConfig, dataset_path, checkpoint_path, outdir) -> int:
    if not os.path.exists(checkpoint_path):
        raise ConfigError(f"missing checkpoint: {checkpoint_path}")
    ds = tasks.read_dataset(dataset_path)
    model = _make_model(cfg, ds.task)
    model.init_params(np.random.default_rng(cfg["run.seed"]))  # registers slices
    pstore = ParameterStore.load(checkpoint_path)
    missing = [
        n
        for n in model.mean_slices() + model.noise_slices()
        if n not in pstore.names()
    ]
    if missing:
        raise ConfigError(
            f"checkpoint lacks slices {missing}; set model.noise/model.task to match"
        )
    estimator = cfg["estimator"]
    max_records = cfg["eval.max_records"] or None
    rows = []
    for fold in parse_folds(cfg["eval.folds"]):
        report = tasks.evaluate(
            pstore, ds, fold, estimator, model, cfg.solver_config(), max_records
        )
        rows.append(_metric_row(report))
    os.makedirs(outdir, exist_ok=True)
    columns = list(rows[0])
    path = os.path.join(outdir, f"metrics-{estimator}.csv")
    _write_csv(path, rows, columns)
    _write_run_files(outdir, cfg, {"dataset": dataset_path, "checkpoint": checkpoint_path})
    names = model.metric_names()
    print(f"estimator {estimator} over folds {cfg['eval.folds']}:")
    for name in names:
        vals = np.array([r[f"{name}_mean"] for r in rows])
        se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
        print(f"  {name}: {vals.mean():.6g} +/- {se:.3g} (over {len(vals)} folds)")
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# SVG chart (bar chart with error whiskers; no plotting dependency)
# ---------------------------------------------------------------------------


def svg_bar_chart(path, labels, values, errors, title, ylabel):
    width, height = 720, 380
    margin_l, margin_b, margin_t = 70, 110, 40
    plot_w, plot_h = width - margin_l - 20, height - margin_b - margin_t
    vmax = max(v + e for v, e in zip(values, errors)) * 1.15 or 1.0
    n = len(values)
    bar_w = plot_w / max(n, 1) * 0.6
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="15" y="{margin_t + plot_h / 2:.1f}" font-size="11" '
        f'transform="rotate(-90 15 {margin_t + plot_h / 2:.1f})" text-anchor="middle">{ylabel}</text>',
        f'<line x1="{margin_l}" y1="{margin_t + plot_h}" x2="{margin_l + plot_w}" '
        f'y2="{margin_t + plot_h}" stroke="black"/>',
        f'<line x1="{margin_l}" y1="{margin_t}" x2="{margin_l}" y2="{margin_t + plot_h}" stroke="black"/>',
    ]
    for k in range(5):
        v = vmax * k / 4
        y = margin_t + plot_h * (1 - k / 4)
        parts.append(
            f'<text x="{margin_l - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{v:.4g}</text>'
        )
        parts.append(
            f'<line x1="{margin_l - 3}" y1="{y:.1f}" x2="{margin_l}" y2="{y:.1f}" stroke="black"/>'
        )
    for i, (label, v, e) in enumerate(zip(labels, values, errors)):
        cx = margin_l + plot_w * (i + 0.5) / n
        h = plot_h * v / vmax
        y0 = margin_t + plot_h - h
        parts.append(
            f'<rect x="{cx - bar_w / 2:.1f}" y="{y0:.1f}" width="{bar_w:.1f}" '
            f'height="{h:.1f}" fill="#4878a8"/>'
        )
        if e > 0:
            ye0 = margin_t + plot_h * (1 - (v + e) / vmax)
            ye1 = margin_t + plot_h * (1 - max(v - e, 0.0) / vmax)
            parts.append(
                f'<line x1="{cx:.1f}" y1="{ye0:.1f}" x2="{cx:.1f}" y2="{ye1:.1f}" stroke="black"/>'
            )
        parts.append(
            f'<text x="{cx:.1f}" y="{margin_t + plot_h + 12:.1f}" font-size="9" '
            f'text-anchor="end" transform="rotate(-40 {cx:.1f} {margin_t + plot_h + 12:.1f})">{label}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# Experiment bundles
# ---------------------------------------------------------------------------

DISK_CELLS = [
    # (name, estimator, noise, loss)
    ("smoother-heteroscedastic-e2e", "smoother", "heteroscedastic", "e2e-mse"),
    ("smoother-constant-e2e", "smoother", "constant", "e2e-mse"),
    ("smoother-heteroscedastic-nll", "smoother", "heteroscedastic", "joint-nll"),
    ("smoother-constant-nll", "smoother", "constant", "joint-nll"),
    ("ekf-heteroscedastic-e2e", "ekf", "heteroscedastic", "e2e-mse"),
    ("ekf-constant-e2e", "ekf", "constant", "e2e-mse"),
    ("ekf-heteroscedastic-nll", "ekf", "heteroscedastic", "joint-nll"),
    ("ekf-constant-nll", "ekf", "constant", "joint-nll"),
]


def _cell_train_and_eval(payload):
    """Worker for one experiment cell: train, then per-fold evaluation."""
    cfg = RunConfig(overrides=[f"{k}={v}" for k, v in payload["config"].items()])
    ds = tasks.read_dataset(payload["dataset"])
    model = tasks.make_model(ds.task, payload["noise"], _task_sim_cfg(cfg, ds.task))
    tc = _train_config(cfg)
    tc.loss = payload["loss"]
    tc.estimator = payload["train_estimator"]
    celldir = payload["celldir"]
    os.makedirs(celldir, exist_ok=True)
    pstore, _ = learning.train(
        ds,
        model,
        tc,
        cfg.solver_config(),
        metrics_path=os.path.join(celldir, "metrics.csv"),
        checkpoint_path=os.path.join(celldir, "checkpoint.ckpt"),
    )
    results = {}
    for estimator in payload["eval_estimators"]:
        fold_means = []
        for fold in parse_folds(cfg["eval.folds"]):
            report = tasks.evaluate(
                pstore,
                ds,
                fold,
                estimator,
                model,
                cfg.solver_config(),
                cfg["eval.max_records"] or None,
            )
            fold_means.append(report.mean())
        results[estimator] = np.stack(fold_means)
    return {"name": payload["name"], "results": {k: v.tolist() for k, v in results.items()}}


def _run_cells(worker, payloads, jobs):
    """Run cells serially or in a process pool; collect per-cell failures.

    Outputs keep submission order, so downstream CSVs are deterministic.
    """
    outputs, failures = [], []

    def _label(p):
        return p.get("name") or f"seed-{p.get('seed')}"

    if jobs <= 1:
        for p in payloads:
            try:
                outputs.append(worker(p))
            except SmoothlearnError as e:
                failures.append((_label(p), str(e)))
        return outputs, failures
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [(p, pool.submit(worker, p)) for p in payloads]
        for p, fut in futures:
            try:
                outputs.append(fut.result())
            except SmoothlearnError as e:
                failures.append((_label(p), str(e)))
    return outputs, failures


def _bundle_config(cfg: RunConfig, **over):
    base = dict(cfg.values)
    base.update(over)
    return {k: base[k] for k in base}


def _mean_se(fold_means):
    vals = np.asarray(fold_means)
    mean = vals.mean(axis=0)
    se = (
        vals.std(axis=0, ddof=1) / np.sqrt(vals.shape[0])
        if vals.shape[0] > 1
        else np.zeros_like(mean)
    )
    return mean, se


def run_disk_compare(cfg: RunConfig, outdir, jobs=1) -> int:
    """Loss x noise x estimator comparison on the disk task, plus raw sensor."""
    os.makedirs(outdir, exist_ok=True)
    datadir = os.path.join(outdir, "data")
    os.makedirs(datadir, exist_ok=True)
    records = cfg["experiment.records"] or 500
    epochs = cfg["experiment.epochs"] or 10
    seed = cfg["run.seed"]
    ds_path = os.path.join(datadir, "dataset-disk.jsonl")
    sim_cfg = _task_sim_cfg(cfg, "disk")
    ds = tasks.generate_dataset("disk", records, seed, cfg["data.folds"], sim_cfg)
    tasks.write_dataset(ds_path, ds)

    payloads = []
    for name, estimator, noise, loss in DISK_CELLS:
        cell_epochs = cfg["experiment.nll_epochs"] if loss == "joint-nll" else epochs
        payloads.append(
            {
                "name": name,
                "dataset": ds_path,
                "noise": noise,
                "loss": loss,
                "train_estimator": estimator,
                "eval_estimators": [estimator],
                "celldir": os.path.join(outdir, "cells", name),
                "config": _bundle_config(
                    cfg,
                    **{
                        "model.task": "disk",
                        "model.noise": noise,
                        "train.epochs": cell_epochs,
                        "train.loss": loss,
                        "run.seed": seed,
                    },
                ),
            }
        )
    outputs, failures = _run_cells(_cell_train_and_eval, payloads, jobs)
    rows = []
    for out in outputs:
        name = out["name"]
        estimator = name.split("-")[0]
        mean, se = _mean_se(out["results"][estimator])
        rows.append(
            {
                "cell": name,
                "estimator": estimator,
                "rmse_px_mean": float(mean[0]),
                "rmse_px_stderr": float(se[0]),
                "fold_values": ";".join(repr(float(v[0])) for v in out["results"][estimator]),
            }
        )

    # Raw virtual-sensor baseline shares the constant-NLL cell's pretrained mean.
    base_ckpt = os.path.join(outdir, "cells", "smoother-constant-nll", "checkpoint.ckpt")
    if os.path.exists(base_ckpt):
        model = tasks.DiskModel("constant", sim_cfg)
        model.init_params(np.random.default_rng(seed))
        pstore = ParameterStore.load(base_ckpt)
        fold_means = []
        for fold in parse_folds(cfg["eval.folds"]):
            report = tasks.evaluate(pstore, ds, fold, "raw", model, cfg.solver_config())
            fold_means.append(report.mean())
        mean, se = _mean_se(fold_means)
        rows.append(
            {
                "cell": "raw-sensor",
                "estimator": "raw",
                "rmse_px_mean": float(mean[0]),
                "rmse_px_stderr": float(se[0]),
                "fold_values": ";".join(repr(float(v[0])) for v in fold_means),
            }
        )

    columns = ["cell", "estimator", "rmse_px_mean", "rmse_px_stderr", "fold_values"]
    _write_csv(os.path.join(outdir, "results.csv"), rows, columns)
    svg_bar_chart(
        os.path.join(outdir, "results.svg"),
        [r["cell"] for r in rows],
        [r["rmse_px_mean"] for r in rows],
        [r["rmse_px_stderr"] for r in rows],
        "Disk tracking: held-out RMSE",
        "RMSE (px)",
    )
    _write_run_files(outdir, cfg, {"dataset": ds_path})
    for r in rows:
        print(f"{r['cell']:34s} rmse {r['rmse_px_mean']:8.3f} +/- {r['rmse_px_stderr']:.3f}")
    if failures:
        for name, msg in failures:
            print(f"FAILED cell {name}: {msg}", file=sys.stderr)
        return 3
    return 0


ODOM_CELLS = [
    ("smoother-heteroscedastic-e2e-pos", "smoother", "heteroscedastic", "e2e-mse", "position"),
    ("smoother-heteroscedastic-e2e-vel", "smoother", "heteroscedastic", "e2e-mse", "velocity"),
    ("smoother-heteroscedastic-nll", "smoother", "heteroscedastic", "joint-nll", "position"),
    ("smoother-constant-e2e-pos", "smoother", "constant", "e2e-mse", "position"),
    ("smoother-constant-nll", "smoother", "constant", "joint-nll", "position"),
    ("ekf-heteroscedastic-e2e", "ekf", "heteroscedastic", "e2e-mse", "position"),
    ("ekf-constant-e2e", "ekf", "constant", "e2e-mse", "position"),
]


def run_odom_compare(cfg: RunConfig, outdir, jobs=1) -> int:
    """Loss x noise comparison on the odometry task (m/m and deg/m)."""
    os.makedirs(outdir, exist_ok=True)
    datadir = os.path.join(outdir, "data")
    os.makedirs(datadir, exist_ok=True)
    records = cfg["experiment.records"] or 120
    epochs = cfg["experiment.epochs"] or 3
    seed = cfg["run.seed"]
    sim_cfg = _task_sim_cfg(cfg, "odom2d")
    ds_path = os.path.join(datadir, "dataset-odom2d.jsonl")
    ds = tasks.generate_dataset("odom2d", records, seed, cfg["data.folds"], sim_cfg)
    tasks.write_dataset(ds_path, ds)

    payloads = []
    for name, estimator, noise, loss, supervision in ODOM_CELLS:
        cell_epochs = cfg["experiment.nll_epochs"] if loss == "joint-nll" else epochs
        payloads.append(
            {
                "name": name,
                "dataset": ds_path,
                "noise": noise,
                "loss": loss,
                "train_estimator": estimator,
                "eval_estimators": [estimator],
                "celldir": os.path.join(outdir, "cells", name),
                "config": _bundle_config(
                    cfg,
                    **{
                        "model.task": "odom2d",
                        "model.noise": noise,
                        "train.epochs": cell_epochs,
                        "train.loss": loss,
                        "train.supervision": supervision,
                        "train.window": cfg["train.window"] or 20,
                        "train.windows_per_record": cfg["train.windows_per_record"] or 2,
                        "run.seed": seed,
                    },
                ),
            }
        )
    outputs, failures = _run_cells(_cell_train_and_eval, payloads, jobs)
    rows = []
    for out in outputs:
        name = out["name"]
        estimator = name.split("-")[0]
        mean, se = _mean_se(out["results"][estimator])
        rows.append(
            {
                "cell": name,
                "estimator": estimator,
                "m_per_m_mean": float(mean[0]),
                "m_per_m_stderr": float(se[0]),
                "deg_per_m_mean": float(mean[1]),
                "deg_per_m_stderr": float(se[1]),
            }
        )
    # Dead-reckoned raw baseline from the constant-NLL cell's pretrained mean.
    base_ckpt = os.path.join(outdir, "cells", "smoother-constant-nll", "checkpoint.ckpt")
    if os.path.exists(base_ckpt):
        model = tasks.OdomModel("constant", sim_cfg)
        model.init_params(np.random.default_rng(seed))
        pstore = ParameterStore.load(base_ckpt)
        fold_means = [
            tasks.evaluate(pstore, ds, fold, "raw", model, cfg.solver_config()).mean()
            for fold in parse_folds(cfg["eval.folds"])
        ]
        mean, se = _mean_se(fold_means)
        rows.append(
            {
                "cell": "raw-dead-reckoning",
                "estimator": "raw",
                "m_per_m_mean": float(mean[0]),
                "m_per_m_stderr": float(se[0]),
                "deg_per_m_mean": float(mean[1]),
                "deg_per_m_stderr": float(se[1]),
            }
        )
    columns = [
        "cell",
        "estimator",
        "m_per_m_mean",
        "m_per_m_stderr",
        "deg_per_m_mean",
        "deg_per_m_stderr",
    ]
    _write_csv(os.path.join(outdir, "results.csv"), rows, columns)
    svg_bar_chart(
        os.path.join(outdir, "results.svg"),
        [r["cell"] for r in rows],
        [r["m_per_m_mean"] for r in rows],
        [r["m_per_m_stderr"] for r in rows],
        "Planar odometry: translational error",
        "m/m",
    )
    _write_run_files(outdir, cfg, {"dataset": ds_path})
    for r in rows:
        print(
            f"{r['cell']:36s} m/m {r['m_per_m_mean']:.4f} +/- {r['m_per_m_stderr']:.4f}"
            f"  deg/m {r['deg_per_m_mean']:.4f}"
        )
    if failures:
        for name, msg in failures:
            print(f"FAILED cell {name}: {msg}", file=sys.stderr)
        return 3
    return 0


def _transfer_seed_worker(payload):
    """One seed of the noise-transfer protocol: train both contexts, then
    evaluate each checkpoint under both estimators (2 x 2 table cell values)."""
    cfg = RunConfig(overrides=[f"{k}={v}" for k, v in payload["config"].items()])
    seed = payload["seed"]
    seeddir = payload["seeddir"]
    os.makedirs(seeddir, exist_ok=True)
    sim_cfg = _task_sim_cfg(cfg, "odom2d")
    ds = tasks.generate_dataset(
        "odom2d", payload["records"], seed, cfg["data.folds"], sim_cfg
    )
    ds_path = os.path.join(seeddir, "dataset-odom2d.jsonl")
    tasks.write_dataset(ds_path, ds)

    checkpoints = {}
    for context in ("ekf", "smoother"):
        model = tasks.OdomModel("heteroscedastic", sim_cfg)
        tc = _train_config(cfg)
        tc.loss = "e2e-mse"
        tc.estimator = context
        tc.seed = seed
        # Transfer protocol: learn the heteroscedastic head in context, with
        # the rest of the parameters (transition covariance, mean map) frozen
        # after pretraining.
        tc.train_slices = tuple(model.sensor.noise_slices())
        celldir = os.path.join(seeddir, f"trained-on-{context}")
        os.makedirs(celldir, exist_ok=True)
        pstore, _ = learning.train(
            ds,
            model,
            tc,
            cfg.solver_config(),
            metrics_path=os.path.join(celldir, "metrics.csv"),
            checkpoint_path=os.path.join(celldir, "checkpoint.ckpt"),
        )
        checkpoints[context] = pstore

    table = {}
    model = tasks.OdomModel("heteroscedastic", sim_cfg)
    model.init_params(np.random.default_rng(seed))
    for trained_on, pstore in checkpoints.items():
        for tested_on in ("ekf", "smoother"):
            fold_means = [
                tasks.evaluate(
                    pstore,
                    ds,
                    fold,
                    tested_on,
                    model,
                    cfg.solver_config(),
                    cfg["eval.max_records"] or None,
                ).mean()[0]
                for fold in parse_folds(cfg["eval.folds"])
            ]
            table[f"{trained_on}->{tested_on}"] = float(np.mean(fold_means))
    return {"seed": seed, "table": table, "dataset": ds_path}


def run_noise_transfer(cfg: RunConfig, outdir, jobs=1) -> int:
    """Train heteroscedastic noise under each estimator, evaluate under both."""
    os.makedirs(outdir, exist_ok=True)
    n_seeds = cfg["experiment.seeds"]
    records = cfg["experiment.records"] or 120
    epochs = cfg["experiment.epochs"] or 3
    base_seed = cfg["run.seed"]
    payloads = []
    for i in range(n_seeds):
        seed = base_seed + 1000 * i
        payloads.append(
            {
                "seed": seed,
                "records": records,
                "seeddir": os.path.join(outdir, f"seed-{seed}"),
                "config": _bundle_config(
                    cfg,
                    **{
                        "model.task": "odom2d",
                        "model.noise": "heteroscedastic",
                        "train.epochs": epochs,
                        "train.loss": "e2e-mse",
                        "train.supervision": "position",
                        "train.window": cfg["train.window"] or 20,
                        "train.windows_per_record": cfg["train.windows_per_record"] or 2,
                        "run.seed": seed,
                    },
                ),
            }
        )
    outputs, failures = _run_cells(_transfer_seed_worker, payloads, jobs)
    if not outputs:
        for name, msg in failures:
            print(f"FAILED {name}: {msg}", file=sys.stderr)
        return 3

    combos = ["ekf->ekf", "ekf->smoother", "smoother->ekf", "smoother->smoother"]
    rows = []
    for combo in combos:
        vals = [out["table"][combo] for out in outputs]
        trained_on, tested_on = combo.split("->")
        rows.append(
            {
                "trained_on": trained_on,
                "tested_on": tested_on,
                "m_per_m_mean": float(np.mean(vals)),
                "m_per_m_stderr": float(
                    np.std(vals, ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
                ),
                "seed_values": ";".join(repr(float(v)) for v in vals),
            }
        )
    columns = ["trained_on", "tested_on", "m_per_m_mean", "m_per_m_stderr", "seed_values"]
    _write_csv(os.path.join(outdir, "results.csv"), rows, columns)
    svg_bar_chart(
        os.path.join(outdir, "results.svg"),
        [f"{r['trained_on']}->{r['tested_on']}" for r in rows],
        [r["m_per_m_mean"] for r in rows],
        [r["m_per_m_stderr"] for r in rows],
        "Noise-model transfer (m/m)",
        "m/m",
    )
    inputs = {f"dataset-seed{out['seed']}": out["dataset"] for out in outputs}
    _write_run_files(outdir, cfg, inputs)
    print("noise transfer (m/m, mean over seeds):")
    for r in rows:
        print(
            f"  trained on {r['trained_on']:<9s} tested on {r['tested_on']:<9s}"
            f" {r['m_per_m_mean']:.4f} +/- {r['m_per_m_stderr']:.4f}"
        )
    if failures:
        for name, msg in failures:
            print(f"FAILED {name}: {msg}", file=sys.stderr)
        return 3
    return 0


BUNDLES = {
    "disk-compare": run_disk_compare,
    "odom-compare": run_odom_compare,
    "noise-transfer": run_noise_transfer,
}


def cmd_experiment(cfg: RunConfig, name, outdir, jobs) -> int:
    if name not in BUNDLES:
        raise ConfigError(
            f"unknown experiment '{name}' (choose from {sorted(BUNDLES)})"
        )
    return BUNDLES[name](cfg, outdir, jobs)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="configuration file of dotted key = value lines")
    p.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override a key"
    )
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="master seed (run.seed)")


def build_parser():
    ap = argparse.ArgumentParser(prog="smoothlearn")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset")
    _add_common(g)
    g.add_argument("--task", choices=["disk", "odom2d"])
    g.add_argument("--records", type=int)
    g.add_argument("--length", type=int)
    g.add_argument("--dump-frames", action="store_true")

    t = sub.add_parser("train", help="train factor parameters")
    _add_common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--loss", choices=["e2e-mse", "joint-nll"])
    t.add_argument("--noise", choices=["constant", "heteroscedastic"])
    t.add_argument("--estimator", choices=["smoother", "ekf"])
    t.add_argument("--k", type=int, help="unrolled Gauss-Newton steps")
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(e)
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--estimator", choices=["smoother", "ekf", "raw", "gt-echo"])
    e.add_argument("--folds", help="fold list, e.g. 5-9")

    x = sub.add_parser("experiment", help="run a named experiment bundle")
    _add_common(x)
    x.add_argument("name", choices=sorted(BUNDLES))
    x.add_argument("--jobs", type=int, default=1)
    return ap


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig(args.config, args.set)
    mapping = {
        "seed": "run.seed",
        "task": "model.task",
        "records": "data.records",
        "length": "data.length",
        "loss": "train.loss",
        "noise": "model.noise",
        "estimator": "estimator",
        "k": "train.k",
        "epochs": "train.epochs",
        "folds": "eval.folds",
    }
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg.set(key, val)
    if getattr(args, "dump_frames", False):
        cfg.set("data.dump_frames", True)
    env_seed = os.environ.get("SMOOTHLEARN_SEED")
    if env_seed is not None:
        cfg.set("run.seed", env_seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "gen":
            return cmd_gen(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.dataset, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.dataset, args.checkpoint, args.out)
        if args.command == "experiment":
            return cmd_experiment(cfg, args.name, args.out, args.jobs)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except SmoothlearnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
