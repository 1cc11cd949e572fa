"""N-shot scoring, per-seed metric aggregation and the coefficient probe."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .datagen import Instantiation, MetaDataset, Phase, sample_split
from .model import CCNPModel, SetBatch, predict, represent_all
from .nn import MLP
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
ONE_D_FAMILIES = ("sinusoid", "exponential", "oscillator", "line")


@dataclass
class SplitScore:
    """Scores of one model on one split.

    ``predictive_ll`` is the log-likelihood of the whole target sequence
    (summed over points), averaged over instantiations; ``recon_mse`` is the
    squared error of the predictive mean averaged over every target value.
    """

    predictive_ll: float
    recon_mse: float
    per_instance_ll: np.ndarray
    per_instance_mse: np.ndarray


def eval_splits(insts: Sequence[Instantiation], shots: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    return [sample_split(inst, Phase.EVAL, shots, 0, rng) for inst in insts]


def score_split(model: CCNPModel, insts: Sequence[Instantiation], shots: int, seed: int = 0) -> SplitScore:
    """Condition on exactly ``shots`` context points and score every index of each instantiation."""
    if not insts:
        raise ValueError("empty split")
    y_dim = insts[0].y_dim
    if y_dim != model.arch.dims.y_dim:
        raise ValueError(f"data has y_dim={y_dim} but the model was built for y_dim={model.arch.dims.y_dim}")
    splits = eval_splits(insts, shots, seed)
    context = SetBatch.from_instantiations(insts, [s.context_indices for s in splits])
    target = SetBatch.from_instantiations(insts, [s.target_indices for s in splits])
    pred = predict(model, context, target.x, target.segment)
    mu, sigma = pred.mean.data, pred.scale.data
    logp = -np.log(sigma) - 0.5 * ((target.y - mu) / sigma) ** 2 - HALF_LOG_2PI
    sq = (target.y - mu) ** 2
    s = target.n_segments
    ll = np.bincount(target.segment, weights=logp.sum(axis=1), minlength=s)
    mse = np.bincount(target.segment, weights=sq.sum(axis=1), minlength=s) / (target.lengths * y_dim)
    total_mse = float(sq.mean())
    return SplitScore(float(ll.mean()), total_mse, ll, mse)


def metric_scales(family_id: str) -> tuple[float, float]:
    """Display factors (ll_scale, mse_scale): 1D families are shown as LL x 1e-2 and MSE x 1e2."""
    if family_id in ONE_D_FAMILIES:
        return 1e-2, 1e2
    return 1.0, 1.0


@dataclass
class MetricReport:
    per_seed_ll: list[float]
    per_seed_mse: list[float]
    ll_scale: float = 1.0
    mse_scale: float = 1.0
    seeds: list[int] = field(default_factory=list)

    @staticmethod
    def _std(xs) -> float | None:
        return float(np.std(xs, ddof=1)) if len(xs) >= 2 else None

    @property
    def n_seeds(self) -> int:
        return len(self.per_seed_mse)

    @property
    def ll_mean(self) -> float:
        return float(np.mean(self.per_seed_ll))

    @property
    def ll_std(self) -> float | None:
        return self._std(self.per_seed_ll)

    @property
    def mse_mean(self) -> float:
        return float(np.mean(self.per_seed_mse))

    @property
    def mse_std(self) -> float | None:
        return self._std(self.per_seed_mse)

    def display(self) -> dict:
        """Values multiplied by their recorded scale factors."""
        def sc(v, f):
            return None if v is None else v * f

        return {
            "ll_mean": sc(self.ll_mean, self.ll_scale),
            "ll_std": sc(self.ll_std, self.ll_scale),
            "mse_mean": sc(self.mse_mean, self.mse_scale),
            "mse_std": sc(self.mse_std, self.mse_scale),
        }

    def to_dict(self) -> dict:
        return {
            "n_seeds": self.n_seeds,
            "seeds": list(self.seeds),
            "per_seed_ll": list(self.per_seed_ll),
            "per_seed_mse": list(self.per_seed_mse),
            "ll_mean": self.ll_mean,
            "ll_std": self.ll_std,
            "mse_mean": self.mse_mean,
            "mse_std": self.mse_std,
            "ll_scale": self.ll_scale,
            "mse_scale": self.mse_scale,
        }


def evaluate(models: Sequence[CCNPModel], insts: Sequence[Instantiation], shots: int, seed: int = 0,
             family_id: str | None = None, seeds: Sequence[int] = ()) -> MetricReport:
    """Score one trained model per seed on the same split and context draws."""
    if not models:
        raise ValueError("no models to evaluate")
    for inst in insts:
        if shots > len(inst):
            raise ValueError(f"shots={shots} exceeds sequence length {len(inst)}")
    scores = [score_split(m, insts, shots, seed) for m in models]
    ll_scale, mse_scale = metric_scales(family_id or insts[0].family_id)
    return MetricReport([s.predictive_ll for s in scores], [s.recon_mse for s in scores], ll_scale, mse_scale,
                        list(seeds))


# ---------------------------------------------------------------------------
# coefficient probe


@dataclass
class CoeffProbeConfig:
    shots: int = 10
    contexts_per_instance: int = 4
    hidden: int = 32
    steps: int = 500
    lr: float = 1e-2
    seed: int = 0


@dataclass
class ProbeResult:
    mse_alpha: float
    mse_beta: float

    @property
    def combined(self) -> float:
        return 0.5 * (self.mse_alpha + self.mse_beta)

    def to_dict(self) -> dict:
        return {"mse_alpha": self.mse_alpha, "mse_beta": self.mse_beta, "combined": self.combined}


def probe_features(model: CCNPModel, insts: Sequence[Instantiation], shots: int, contexts: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Frozen representation bundle ``concat(r_C, r_T, r_F)`` for several random contexts per instantiation."""
    rep_insts = [inst for inst in insts for _ in range(contexts)]
    splits = [sample_split(inst, Phase.EVAL, shots, 0, rng) for inst in rep_insts]
    batch = SetBatch.from_instantiations(rep_insts, [s.context_indices for s in splits])
    with T.no_grad():
        reps = represent_all(model, batch)
    feats = np.concatenate([reps[b].data for b in model.branches], axis=1)
    labels = np.array([inst.coeffs[:2] for inst in rep_insts], dtype=np.float64)
    return feats, labels


def coefficient_inference(model: CCNPModel, dataset: MetaDataset, config: CoeffProbeConfig = CoeffProbeConfig()
                          ) -> ProbeResult:
    """Regress (alpha, beta) from the frozen context representation; test MSE per coefficient.

    The probe trains on the train split and is scored on the test split.
    """
    family = dataset.train[0].family_id
    if family != "sinusoid":
        log.warning("coefficient probe expects a sinusoid run, got family %r; running anyway", family)
    rng = np.random.default_rng([config.seed, 3])
    x_tr, y_tr = probe_features(model, dataset.train, config.shots, config.contexts_per_instance, rng)
    x_te, y_te = probe_features(model, dataset.test, config.shots, config.contexts_per_instance, rng)
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0)
    sd[sd < 1e-12] = 1.0
    x_tr, x_te = (x_tr - mu) / sd, (x_te - mu) / sd

    backbone = model.parameters()
    probe = MLP([x_tr.shape[1], config.hidden, 2], config.seed, "probe")
    params = list(probe.named_parameters())
    state = AdamState(lr=config.lr)
    xt = T.tensor(x_tr)
    for _ in range(config.steps):
        for _, p in params:
            p.grad = None
        loss = T.mean(T.square(T.sub(probe(xt), y_tr)))
        T.backward(loss)
        adam_step(params, state)
        # backbone features were computed without a graph, so nothing may reach it
        assert all(p.grad is None for p in backbone), "backbone received gradients during probe training"
    with T.no_grad():
        err = (probe(T.tensor(x_te)).data - y_te) ** 2
    return ProbeResult(float(err[:, 0].mean()), float(err[:, 1].mean()))
