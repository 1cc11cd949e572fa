"""Episodic meta-training.

The sequential schedule takes three optimizer steps per episode, in order:
function contrast, temporal contrast, reconstruction.  Each step has its own
Adam state and only updates its own parameter group.  The combined schedule
takes one step on ``frl + alpha * tcl + beta * fcl`` over the union of groups.

Under the sequential schedule the reconstruction step treats ``r_T`` and
``r_F`` as constants, since those encoders are not in its group.  Under the
combined schedule the reconstruction gradient reaches every branch.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .datagen import ContextTargetSplit, Instantiation, MetaDataset, Phase, sample_split
from .evaluation import score_split
from .model import VARIANTS, CCNPModel, ModelDims, SetBatch, build_variant, decode, fcl_embed, represent, tcl_embed
from .objectives import LossWeights, combined_objective, fcl_loss, frl_nll, tcl_loss
from .optim import AdamState, adam_step, clip_grad_norm

log = logging.getLogger(__name__)


class Schedule(str, enum.Enum):
    SEQUENTIAL = "sequential"
    COMBINED = "combined"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "CCNP"
    epochs: int = 25
    batch_size: int = 16
    lr_frl: float = 1e-3
    lr_tcl: float = 1e-3
    lr_fcl: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    disable_attn: bool = False
    disable_tcl: bool = False
    disable_fcl: bool = False
    schedule: Schedule = Schedule.SEQUENTIAL
    seed: int = 0
    max_context: int = 5
    max_extra_target: int = 10
    eval_shots: int | None = None
    grad_clip: float | None = 10.0
    dims: ModelDims = field(default_factory=ModelDims)

    def __post_init__(self):
        self.schedule = Schedule(self.schedule)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.batch_size < 2 and self.fcl_enabled:
            raise ValueError("batch_size must be >= 2 when the function contrast is enabled")

    @property
    def fcl_enabled(self) -> bool:
        return "F" in VARIANTS.get(self.variant, ((), True))[0] and not self.disable_fcl and self.weights.beta > 0

    @property
    def shots(self) -> int:
        return self.eval_shots or self.max_context

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["dims"] = ModelDims(**d.get("dims", {}))
        return cls(**d)


def build_model(config: TrainConfig, x_dim: int = 1, y_dim: int = 1) -> CCNPModel:
    """Variant + ablation flags -> model.  A zero loss weight removes that branch entirely."""
    drop = []
    if config.disable_tcl or config.weights.alpha == 0:
        drop.append("T")
    if config.disable_fcl or config.weights.beta == 0:
        drop.append("F")
    dims = replace(config.dims, x_dim=x_dim, y_dim=y_dim)
    return build_variant(config.variant, dims, config.seed, drop=drop,
                         attention=False if config.disable_attn else None)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    insts: list[Instantiation]
    splits: list[ContextTargetSplit]
    context: SetBatch
    target: SetBatch

    @classmethod
    def build(cls, insts: Sequence[Instantiation], splits: Sequence[ContextTargetSplit]) -> "Episode":
        insts, splits = list(insts), list(splits)
        return cls(
            insts,
            splits,
            SetBatch.from_instantiations(insts, [s.context_indices for s in splits]),
            SetBatch.from_instantiations(insts, [s.target_indices for s in splits]),
        )


def sample_episode(insts: Sequence[Instantiation], max_context: int, max_extra_target: int,
                   rng: np.random.Generator) -> Episode:
    splits = [sample_split(inst, Phase.TRAIN, max_context, max_extra_target, rng) for inst in insts]
    return Episode.build(insts, splits)


@dataclass
class EpisodeReport:
    frl: float
    tcl: float | None = None
    fcl: float | None = None


@dataclass
class Optimizers:
    states: dict[str, AdamState]

    @classmethod
    def for_model(cls, model: CCNPModel, config: TrainConfig) -> "Optimizers":
        lrs = {"frl": config.lr_frl, "tcl": config.lr_tcl, "fcl": config.lr_fcl}
        if config.schedule is Schedule.COMBINED:
            return cls({"combined": AdamState(lr=config.lr_frl)})
        return cls({g: AdamState(lr=lrs[g]) for g in model.param_groups()})


def _fcl_members(ep: Episode) -> list[int]:
    return [k for k, s in enumerate(ep.splits) if len(s.context_indices) >= 2]


def fcl_forward(model: CCNPModel, ep: Episode, rng: np.random.Generator, tau: float) -> T.Tensor | None:
    members = _fcl_members(ep)
    if len(members) < 2:
        return None
    q_i, q_j, _, _ = fcl_embed(model, [ep.insts[k] for k in members],
                               [ep.splits[k].context_indices for k in members], rng)
    return fcl_loss(q_i, q_j, tau)


def tcl_forward(model: CCNPModel, ep: Episode, tau: float, r_T: T.Tensor | None = None) -> T.Tensor:
    r_T = represent(model, "T", ep.context) if r_T is None else r_T
    z_hat, z = tcl_embed(model, ep.target.x, ep.target.segment, r_T, ep.target.y)
    return tcl_loss(z_hat, z, tau)


def frl_forward(model: CCNPModel, ep: Episode, reps: dict | None = None) -> T.Tensor:
    """Reconstruction NLL.  Branches missing from ``reps`` are computed as constants."""
    bundle = dict(reps or {})
    if "C" not in bundle:
        bundle["C"] = represent(model, "C", ep.context)
    for b in model.branches:
        if b not in bundle:
            with T.no_grad():
                bundle[b] = represent(model, b, ep.context)
    pred = decode(model, ep.target.x, ep.target.segment, bundle)
    return frl_nll(pred, ep.target.y)


def _guarded(objective: str, fn: Callable[[], T.Tensor | None]) -> T.Tensor | None:
    try:
        loss = fn()
    except T.NonFiniteError as exc:
        raise TrainingError(f"{objective} loss became non-finite: {exc}") from exc
    if loss is not None and not math.isfinite(loss.item()):
        raise TrainingError(f"{objective} loss is NaN/inf")
    return loss


def _step(model: CCNPModel, loss: T.Tensor, group, state: AdamState, grad_clip: float | None) -> None:
    for _, p in model.named_parameters():
        p.grad = None
    T.backward(loss)
    for _, p in group:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    if grad_clip:
        clip_grad_norm(group, grad_clip)
    adam_step(group, state)


def train_episode(model: CCNPModel, optimizers: Optimizers, episode: Episode, config: TrainConfig,
                  fcl_rng: np.random.Generator, only: Sequence[str] | None = None) -> EpisodeReport:
    """One episode.  ``only`` restricts the sequential schedule to some objectives (for tests)."""
    groups = model.param_groups()
    tau = config.weights.tau
    clip = config.grad_clip
    if config.schedule is Schedule.COMBINED:
        fcl = _guarded("FCL", lambda: fcl_forward(model, episode, fcl_rng, tau)) if "fcl" in groups else None
        reps = {b: represent(model, b, episode.context) for b in model.branches}
        tcl = _guarded("TCL", lambda: tcl_forward(model, episode, tau, reps["T"])) if "T" in reps else None
        frl = _guarded("FRL", lambda: frl_forward(model, episode, reps))
        total = _guarded("combined", lambda: combined_objective(frl, tcl, fcl, config.weights))
        union = list({n: p for g in groups.values() for n, p in g}.items())
        _step(model, total, union, optimizers.states["combined"], clip)
        return EpisodeReport(frl.item(), tcl.item() if tcl is not None else None,
                             fcl.item() if fcl is not None else None)

    run = set(only) if only is not None else {"fcl", "tcl", "frl"}
    report = EpisodeReport(float("nan"))
    if "fcl" in groups and "fcl" in run:
        loss = _guarded("FCL", lambda: fcl_forward(model, episode, fcl_rng, tau))
        if loss is not None:
            report.fcl = loss.item()
            _step(model, loss, groups["fcl"], optimizers.states["fcl"], clip)
    if "tcl" in groups and "tcl" in run:
        loss = _guarded("TCL", lambda: tcl_forward(model, episode, tau))
        report.tcl = loss.item()
        _step(model, loss, groups["tcl"], optimizers.states["tcl"], clip)
    if "frl" in run:
        loss = _guarded("FRL", lambda: frl_forward(model, episode))
        report.frl = loss.item()
        _step(model, loss, groups["frl"], optimizers.states["frl"], clip)
    return report


# ---------------------------------------------------------------------------
# runs


@dataclass
class CurveRow:
    epoch: int
    frl: float
    tcl: float | None
    fcl: float | None
    val_ll: float


@dataclass
class RunArtifacts:
    model: CCNPModel  # holds the best-validation parameters
    config: TrainConfig
    curves: list[CurveRow]
    best_state: dict[str, np.ndarray]
    final_state: dict[str, np.ndarray]
    best_epoch: int
    run_dir: Path | None = None
    final_metrics: dict = field(default_factory=dict)


def _fmt(v: float | None) -> str:
    return "" if v is None else format(v, ".17g")


def write_curves(path: Path, curves: Sequence[CurveRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "frl", "tcl", "fcl", "val_ll"])
        for c in curves:
            w.writerow([c.epoch, _fmt(c.frl), _fmt(c.tcl), _fmt(c.fcl), _fmt(c.val_ll)])


def read_curves(path: str | Path) -> list[CurveRow]:
    def num(s):
        return float(s) if s != "" else None

    with open(path, newline="") as fh:
        return [CurveRow(int(r["epoch"]), num(r["frl"]), num(r["tcl"]), num(r["fcl"]), num(r["val_ll"]))
                for r in csv.DictReader(fh)]


def _mean(xs: list) -> float | None:
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def train_run(config: TrainConfig, dataset: MetaDataset, run_dir: str | Path | None = None,
              eval_seed: int = 12345) -> RunArtifacts:
    """Train for ``config.epochs`` passes over the training split, validating after each.

    Validation uses exactly ``shots`` context points and scores every index of
    each validation instantiation; the best-scoring parameters are kept.
    """
    if not dataset.train or not dataset.val:
        raise ValueError("dataset needs non-empty train and val splits")
    sample = dataset.train[0]
    model = build_model(config, x_dim=1, y_dim=sample.y_dim)
    optimizers = Optimizers.for_model(model, config)
    data_rng = np.random.default_rng([config.seed, 1])
    fcl_rng = np.random.default_rng([config.seed, 2])
    n = len(dataset.train)
    curves: list[CurveRow] = []
    best_ll, best_state, best_epoch = -math.inf, model.state_dict(), 0
    for epoch in range(1, config.epochs + 1):
        order = data_rng.permutation(n)
        frl, tcl, fcl = [], [], []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            ep = sample_episode([dataset.train[i] for i in idx], config.max_context, config.max_extra_target,
                                data_rng)
            rep = train_episode(model, optimizers, ep, config, fcl_rng)
            frl.append(rep.frl)
            tcl.append(rep.tcl)
            fcl.append(rep.fcl)
        val_ll = score_split(model, dataset.val, config.shots, eval_seed).predictive_ll
        curves.append(CurveRow(epoch, _mean(frl), _mean(tcl), _mean(fcl), val_ll))
        log.debug("epoch %d frl=%.4f val_ll=%.4f", epoch, curves[-1].frl, val_ll)
        if val_ll > best_ll:
            best_ll, best_state, best_epoch = val_ll, model.state_dict(), epoch
    final_state = model.state_dict()
    model.load_state_dict(best_state)
    art = RunArtifacts(model, config, curves, best_state, final_state, best_epoch)
    if run_dir is not None:
        art.run_dir = write_run_dir(art, Path(run_dir))
    return art


def write_run_dir(art: RunArtifacts, run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(art.config.to_dict(), indent=2, sort_keys=True))
    write_curves(run_dir / "curves.csv", art.curves)
    model = art.model
    save_checkpoint(run_dir / "ckpt_best.bin", model, {"epoch": art.best_epoch, "config": art.config.to_dict()})
    model.load_state_dict(art.final_state)
    save_checkpoint(run_dir / "ckpt_final.bin", model, {"epoch": len(art.curves), "config": art.config.to_dict()})
    model.load_state_dict(art.best_state)
    return run_dir
