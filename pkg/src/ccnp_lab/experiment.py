"""Config-driven experiments: dataset caching, (variant x seed) training jobs, result tables.

A config is a flat TOML or JSON table.  Every key is optional and typed;
unknown keys and wrong types are rejected with the offending key named.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .datagen import (
    Family,
    FunctionFamilySpec,
    GPKernelSpec,
    LVSampler,
    MetaDataset,
    make_meta_dataset,
)
from .datastore import cache_exists, load_dataset, save_dataset
from .evaluation import MetricReport, evaluate, metric_scales
from .model import VARIANTS, ModelDims
from .objectives import LossWeights
from .training import TrainConfig, train_run

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

DATA_ENV = "CCNP_LAB_DATA"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "experiment"
    # data
    family: str = "sinusoid"
    count: int = 500
    n_points: int = 100
    data_seed: int = 0
    split_ratio: list = field(default_factory=lambda: [9, 1, 1])
    gp_lengthscale: float = 1.0
    gp_period: float = 1.0
    gp_nu: float = 2.5
    gp_noise: float = 0.02
    lv_mode: str = "greek"
    lv_steps: int = 150
    lv_dt: float = 0.01
    lv_greek_order: str = "appendix"
    # runs
    variants: list = field(default_factory=lambda: ["CNP", "AttnCNP", "CCNP"])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    shots: int = 5
    eval_seed: int = 12345
    # training
    epochs: int = 25
    batch_size: int = 16
    lr: float = 1e-3
    lr_frl: float | None = None
    lr_tcl: float | None = None
    lr_fcl: float | None = None
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.5
    schedule: str = "sequential"
    max_context: int | None = None
    max_extra_target: int = 10
    grad_clip: float | None = 10.0
    disable_attn: bool = False
    disable_tcl: bool = False
    disable_fcl: bool = False
    width: int = 64
    heads: int = 4
    z_dim: int = 8
    shared_projection: bool = False
    # projection-head sweep
    proj_dims: list = field(default_factory=lambda: [8, 16, 32, 64, 128])

    def train_config(self, variant: str, seed: int, **overrides) -> TrainConfig:
        dims = ModelDims(width=self.width, heads=self.heads, z_dim=self.z_dim,
                         shared_projection=self.shared_projection)
        cfg = dict(
            variant=variant,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_frl=self.lr_frl if self.lr_frl is not None else self.lr,
            lr_tcl=self.lr_tcl if self.lr_tcl is not None else self.lr,
            lr_fcl=self.lr_fcl if self.lr_fcl is not None else self.lr,
            weights=LossWeights(self.alpha, self.beta, self.tau),
            disable_attn=self.disable_attn,
            disable_tcl=self.disable_tcl,
            disable_fcl=self.disable_fcl,
            schedule=self.schedule,
            seed=seed,
            max_context=self.max_context if self.max_context is not None else self.shots,
            max_extra_target=self.max_extra_target,
            eval_shots=self.shots,
            grad_clip=self.grad_clip,
            dims=dims,
        )
        cfg.update(overrides)
        return TrainConfig(**cfg)

    def data_spec(self):
        if self.family in {f.value for f in Family}:
            return FunctionFamilySpec(self.family)
        if self.family.startswith("gp-"):
            return GPKernelSpec(self.family[3:], self.gp_lengthscale, self.gp_period, self.gp_nu, self.gp_noise)
        if self.family == "lv":
            return LVSampler(self.lv_mode, self.lv_steps, self.lv_dt, self.lv_greek_order)
        raise ConfigError(f"family: unknown family {self.family!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_SCALARS = {int: (int,), float: (int, float), str: (str,), bool: (bool,)}


def _expected(name: str) -> tuple[type, bool]:
    """(base type, optional) for a config field, read from its annotation."""
    ann = {f.name: f.type for f in fields(ExperimentConfig)}[name]
    optional = "None" in ann
    base = ann.replace("| None", "").strip()
    return {"int": int, "float": float, "str": str, "bool": bool, "list": list}[base], optional


def _check(name: str, value: Any, where: str) -> Any:
    typ, optional = _expected(name)
    if value is None and optional:
        return None
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: key '{name}' must be a list, got {type(value).__name__}")
        return list(value)
    # bool is an int subclass; reject it for numeric fields and vice versa
    if isinstance(value, bool) != (typ is bool) or not isinstance(value, _SCALARS[typ]):
        raise ConfigError(f"{where}: key '{name}' must be {typ.__name__}, got {type(value).__name__}")
    return float(value) if typ is float else value


def validate(raw: dict, where: str = "config") -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{where}: unknown key '{key}'")
    values = {k: _check(k, v, where) for k, v in raw.items()}
    cfg = ExperimentConfig(**values)
    for v in cfg.variants:
        if v not in VARIANTS:
            raise ConfigError(f"{where}: variants: unknown variant {v!r}")
    if not cfg.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in cfg.seeds):
        raise ConfigError(f"{where}: seeds must be a non-empty list of integers")
    if cfg.schedule not in ("sequential", "combined"):
        raise ConfigError(f"{where}: schedule must be 'sequential' or 'combined'")
    if len(cfg.split_ratio) != 3:
        raise ConfigError(f"{where}: split_ratio must have three entries")
    try:
        cfg.data_spec()
        cfg.train_config(cfg.variants[0] if cfg.variants else "CCNP", 0)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return cfg


def load_config(path: str | os.PathLike, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a table")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return validate(raw, str(path))


# ---------------------------------------------------------------------------
# data


def data_root(default: str | os.PathLike = "data") -> Path:
    return Path(os.environ.get(DATA_ENV) or default)


def dataset_name(cfg: ExperimentConfig) -> str:
    spec = cfg.data_spec().to_dict()
    key = json.dumps({"spec": spec, "count": cfg.count, "n": cfg.n_points, "seed": cfg.data_seed,
                      "ratio": cfg.split_ratio}, sort_keys=True)
    return f"{cfg.family}-{cfg.count}-s{cfg.data_seed}-{hashlib.sha256(key.encode()).hexdigest()[:10]}"


def get_dataset(cfg: ExperimentConfig, root: str | os.PathLike | None = None) -> MetaDataset:
    """Load the cached meta-dataset for ``cfg`` or generate and cache it."""
    root = Path(root) if root is not None else data_root()
    name = dataset_name(cfg)
    if cache_exists(root, name):
        return load_dataset(root, name)
    ds = make_meta_dataset(cfg.data_spec(), cfg.count, cfg.split_ratio, cfg.data_seed, cfg.n_points)
    save_dataset(ds, root, name)
    return ds


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    variant: str
    seed: int
    ok: bool
    predictive_ll: float | None = None
    recon_mse: float | None = None
    run_dir: str | None = None
    error: str | None = None


def _run_one(cfg: ExperimentConfig, variant: str, seed: int, ds: MetaDataset, runs_dir: Path,
             overrides: dict | None = None) -> RunResult:
    name = f"{variant}-seed{seed}"
    try:
        art = train_run(cfg.train_config(variant, seed, **(overrides or {})), ds, runs_dir / name,
                        cfg.eval_seed)
        report = evaluate([art.model], ds.test, cfg.shots, cfg.eval_seed)
        return RunResult(variant, seed, True, report.per_seed_ll[0], report.per_seed_mse[0], str(art.run_dir))
    except Exception as exc:  # recorded per run; the experiment carries on
        log.error("run %s failed: %s", name, exc)
        return RunResult(variant, seed, False, run_dir=str(runs_dir / name),
                         error="".join(traceback.format_exception_only(type(exc), exc)).strip())


def _job(args):
    return _run_one(*args)


def run_jobs(jobs: Sequence[tuple], n_workers: int = 1) -> list[RunResult]:
    if n_workers <= 1 or len(jobs) <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_job, jobs))


def _fmt(v: float | None) -> str:
    return "" if v is None else format(v, ".17g")


TABLE_COLUMNS = ["variant", "n_seeds", "ll_mean", "ll_std", "mse_mean", "mse_std", "ll_scale", "mse_scale"]


def summarize(results: Sequence[RunResult], family_id: str) -> dict[str, MetricReport]:
    ll_scale, mse_scale = metric_scales(family_id)
    reports = {}
    for variant in dict.fromkeys(r.variant for r in results):
        ok = sorted((r for r in results if r.variant == variant and r.ok), key=lambda r: r.seed)
        if ok:
            reports[variant] = MetricReport([r.predictive_ll for r in ok], [r.recon_mse for r in ok],
                                            ll_scale, mse_scale, [r.seed for r in ok])
    return reports


def write_table(path: Path, reports: dict[str, MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for variant, r in reports.items():
            w.writerow([variant, r.n_seeds, _fmt(r.ll_mean), _fmt(r.ll_std), _fmt(r.mse_mean), _fmt(r.mse_std),
                        _fmt(r.ll_scale), _fmt(r.mse_scale)])


def read_table(path: str | os.PathLike) -> dict[str, dict]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["variant"]] = {k: (float(v) if v != "" else None) if k not in ("variant", "n_seeds")
                                   else (int(v) if k == "n_seeds" else v) for k, v in row.items()}
    return out


@dataclass
class ExperimentOutcome:
    exit_code: int
    out_dir: Path
    results: list[RunResult]
    reports: dict[str, MetricReport]


def run_experiment(cfg: ExperimentConfig, out: str | os.PathLike = "results", jobs: int = 1,
                   data_dir: str | os.PathLike | None = None) -> ExperimentOutcome:
    """Generate (or load) data, train every (variant, seed), evaluate and write the result table."""
    out_dir = Path(out) / cfg.experiment
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = get_dataset(cfg, data_dir)
    runs_dir = out_dir / "run"
    work = [(cfg, v, s, ds, runs_dir) for v in cfg.variants for s in cfg.seeds]
    results = run_jobs(work, jobs)
    family_id = ds.test[0].family_id
    reports = summarize(results, family_id)
    write_table(out_dir / "table.csv", reports)
    summary = {
        "experiment": cfg.experiment,
        "config": cfg.to_dict(),
        "dataset": dataset_name(cfg),
        "runs": [r.__dict__ for r in results],
        "metrics": {v: {**r.to_dict(), "display": r.display()} for v, r in reports.items()},
        "failed": [f"{r.variant}-seed{r.seed}" for r in results if not r.ok],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return ExperimentOutcome(1 if summary["failed"] else 0, out_dir, results, reports)


# ---------------------------------------------------------------------------
# projection-head sweep


@dataclass
class SweepRow:
    dim: int
    mse_mean: float
    mse_std: float | None


def monotone_trend(rows: Sequence[SweepRow]) -> str:
    """Describe the direction of MSE against dim; reported, never asserted."""
    m = [r.mse_mean for r in rows]
    d = np.diff(m)
    if np.all(d <= 0):
        return "non-increasing"
    if np.all(d >= 0):
        return "non-decreasing"
    return "non-monotone"


def projection_dim_sweep(cfg: ExperimentConfig, dims: Sequence[int] | None = None,
                         out: str | os.PathLike = "results", jobs: int = 1,
                         data_dir: str | os.PathLike | None = None) -> tuple[list[SweepRow], str, Path]:
    dims = list(dims if dims is not None else cfg.proj_dims)
    if not dims:
        raise ValueError("projection_dim_sweep needs at least one dim")
    out_dir = Path(out) / cfg.experiment
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = get_dataset(cfg, data_dir)
    runs_dir = out_dir / "sweep"
    work = []
    for dim in dims:
        dims_cfg = ModelDims(width=cfg.width, heads=cfg.heads, z_dim=int(dim), shared_projection=cfg.shared_projection)
        work += [(cfg, "CCNP", s, ds, runs_dir / f"z{dim}", {"dims": dims_cfg}) for s in cfg.seeds]
    results = run_jobs(work, jobs)
    rows = []
    for i, dim in enumerate(dims):
        chunk = results[i * len(cfg.seeds):(i + 1) * len(cfg.seeds)]
        failed = [r for r in chunk if not r.ok]
        if failed:
            raise RuntimeError(f"sweep run z={dim} seed={failed[0].seed} failed: {failed[0].error}")
        mses = [r.recon_mse for r in chunk]
        rows.append(SweepRow(int(dim), float(np.mean(mses)), float(np.std(mses, ddof=1)) if len(mses) > 1 else None))
    with open(out_dir / "proj_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dim", "mse_mean", "mse_std"])
        for r in rows:
            w.writerow([r.dim, _fmt(r.mse_mean), _fmt(r.mse_std)])
    return rows, monotone_trend(rows), out_dir / "proj_sweep.csv"
