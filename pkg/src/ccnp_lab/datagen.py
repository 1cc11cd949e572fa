"""Seedable generators for the synthetic function families, GP samples and
Lotka-Volterra trajectories, plus context/target sampling and meta-dataset
splitting.

All generators take an ``rng_seed`` (int or ``np.random.SeedSequence``) and
are pure functions of it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import kv

Seed = Union[int, np.random.SeedSequence, None]


def _rng(seed: Seed) -> np.random.Generator:
    return np.random.default_rng(seed)


@dataclass
class Instantiation:
    x: np.ndarray  # (n,)
    y: np.ndarray  # (n, d)
    coeffs: tuple
    family_id: str

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        self.y = y[:, None] if y.ndim == 1 else y
        if len(self.x) != len(self.y):
            raise ValueError(f"x has {len(self.x)} points but y has {len(self.y)}")
        if len(self.x) > 1 and not np.all(np.diff(self.x) > 0):
            raise ValueError("x must be strictly increasing")
        self.coeffs = tuple(float(c) for c in self.coeffs)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def y_dim(self) -> int:
        return self.y.shape[1]


# ---------------------------------------------------------------------------
# 1D closed-form families


class Family(str, enum.Enum):
    SINUSOID = "sinusoid"
    EXPONENTIAL = "exponential"
    OSCILLATOR = "oscillator"
    LINE = "line"


def family_formula(family: Family | str, x: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    family = Family(family)
    if family is Family.SINUSOID:
        return alpha * np.sin(x - beta)
    if family is Family.EXPONENTIAL:
        return alpha * np.exp(x - beta)
    if family is Family.OSCILLATOR:
        return alpha * np.sin(x - beta) * np.exp(-0.5 * x)
    if family is Family.LINE:
        return alpha * x + beta
    raise ValueError(f"unknown family {family!r}")


_FAMILY_X_RANGE = {
    Family.SINUSOID: (-math.pi, math.pi),
    Family.EXPONENTIAL: (-1.0, 4.0),
    Family.OSCILLATOR: (0.0, 5.0),
    Family.LINE: (0.0, 5.0),
}


@dataclass(frozen=True)
class FunctionFamilySpec:
    family: Family
    alpha_range: tuple[float, float] = (-1.0, 1.0)
    beta_range: tuple[float, float] = (-0.5, 0.5)
    x_range: tuple[float, float] | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "family", Family(self.family))
        except ValueError:
            raise ValueError(f"unknown family {self.family!r}") from None
        if self.x_range is None:
            object.__setattr__(self, "x_range", _FAMILY_X_RANGE[self.family])
        for name in ("alpha_range", "beta_range", "x_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must satisfy low < high, got ({lo}, {hi})")
            object.__setattr__(self, name, (float(lo), float(hi)))

    @property
    def family_id(self) -> str:
        return self.family.value

    def to_dict(self) -> dict:
        return {
            "kind": "family",
            "family": self.family.value,
            "alpha_range": list(self.alpha_range),
            "beta_range": list(self.beta_range),
            "x_range": list(self.x_range),
        }


def sample_family_instantiation(
    spec: FunctionFamilySpec,
    n_points: int = 100,
    rng_seed: Seed = None,
    alpha: float | None = None,
    beta: float | None = None,
) -> Instantiation:
    """Draw (alpha, beta) uniformly from the family coefficient ranges and evaluate on an even grid.

    Passing ``alpha``/``beta`` pins them instead of sampling.
    """
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    rng = _rng(rng_seed)
    a = rng.uniform(*spec.alpha_range)
    b = rng.uniform(*spec.beta_range)
    a = a if alpha is None else alpha
    b = b if beta is None else beta
    x = np.linspace(spec.x_range[0], spec.x_range[1], n_points)
    return Instantiation(x, family_formula(spec.family, x, a, b), (a, b), spec.family_id)


# ---------------------------------------------------------------------------
# Gaussian processes


class KernelKind(str, enum.Enum):
    RBF = "rbf"
    PERIODIC = "periodic"
    NOISY_MATERN = "matern"


@dataclass(frozen=True)
class GPKernelSpec:
    kind: KernelKind
    lengthscale: float = 1.0
    period: float = 1.0
    nu: float = 2.5
    noise_std: float = 0.02
    x_range: tuple[float, float] = (-2.0, 2.0)

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if self.lengthscale <= 0:
            raise ValueError("lengthscale must be > 0")
        if self.period <= 0:
            raise ValueError("period must be > 0")
        if self.nu <= 0:
            raise ValueError("nu must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def family_id(self) -> str:
        return f"gp-{self.kind.value}"

    def to_dict(self) -> dict:
        return {
            "kind": "gp",
            "kernel": self.kind.value,
            "lengthscale": self.lengthscale,
            "period": self.period,
            "nu": self.nu,
            "noise_std": self.noise_std,
            "x_range": list(self.x_range),
        }


def matern(d: np.ndarray, lengthscale: float, nu: float) -> np.ndarray:
    scaled = np.sqrt(2.0 * nu) * np.asarray(d, dtype=np.float64) / lengthscale
    out = np.ones_like(scaled)
    pos = scaled > 0
    s = scaled[pos]
    out[pos] = (2.0 ** (1.0 - nu) / gamma_fn(nu)) * s**nu * kv(nu, s)
    return out


def gp_gram(spec: GPKernelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("gp_gram needs at least one point")
    d = np.abs(x[:, None] - x[None, :])
    l = spec.lengthscale
    if spec.kind is KernelKind.RBF:
        k = np.exp(-(d**2) / (2.0 * l**2))
    elif spec.kind is KernelKind.PERIODIC:
        k = np.exp(-2.0 * np.sin(np.pi * d / spec.period) ** 2 / l**2)
    else:
        k = matern(d, l, spec.nu)
        k[np.diag_indices_from(k)] += spec.noise_std**2
    return 0.5 * (k + k.T)


JITTER_START = 1e-10
JITTER_MAX = 1e-4


def jittered_cholesky(k: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky factor of ``k + jitter * I`` with jitter escalating by 10x up to 1e-4."""
    jitter = JITTER_START
    eye = np.eye(len(k))
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(k + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError(f"Cholesky failed with jitter up to {JITTER_MAX:g}")


def sample_gp_instantiation(spec: GPKernelSpec, x: np.ndarray, rng_seed: Seed = None) -> Instantiation:
    x = np.asarray(x, dtype=np.float64)
    chol, _ = jittered_cholesky(gp_gram(spec, x))
    y = chol @ _rng(rng_seed).standard_normal(len(x))
    return Instantiation(x, y, (spec.lengthscale, spec.period, spec.nu, spec.noise_std), spec.family_id)


# ---------------------------------------------------------------------------
# Lotka-Volterra


class LVMode(str, enum.Enum):
    GREEK = "greek"
    POPULATION = "population"


# (alpha, beta, gamma, delta); the appendix table and the main text swap alpha/beta
GREEK_COEFFS = {
    "appendix": (4.0 / 3.0, 2.0 / 3.0, 1.0, 1.0),
    "main_text": (2.0 / 3.0, 4.0 / 3.0, 1.0, 1.0),
}
GREEK_Y0_RANGE = (0.5, 2.0)
POPULATION_Y0 = (1.6, 0.8)
POPULATION_RANGES = {
    "alpha": (0.9, 1.1),
    "beta": (0.05, 0.15),
    "gamma": (1.25, 1.75),
    "delta": (0.5, 1.0),
}
UNDERFLOW = 1e-9


@dataclass(frozen=True)
class LVConfig:
    mode: LVMode = LVMode.GREEK
    y1_0: float = 1.0
    y2_0: float = 1.0
    alpha: float = 4.0 / 3.0
    beta: float = 2.0 / 3.0
    gamma: float = 1.0
    delta: float = 1.0
    steps: int = 150
    dt: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "mode", LVMode(self.mode))
        for name in ("y1_0", "y2_0", "alpha", "beta", "gamma", "delta", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"LVConfig.{name} must be > 0")
        if self.steps < 2:
            raise ValueError("LVConfig.steps must be >= 2")

    @property
    def family_id(self) -> str:
        return f"lv-{self.mode.value}"

    @property
    def coeffs(self) -> tuple:
        return (self.alpha, self.beta, self.gamma, self.delta, self.y1_0, self.y2_0)

    def to_dict(self) -> dict:
        return {"kind": "lv", **{k: getattr(self, k) for k in
                ("y1_0", "y2_0", "alpha", "beta", "gamma", "delta", "steps", "dt")}, "mode": self.mode.value}


@dataclass(frozen=True)
class LVSampler:
    """Draws an ``LVConfig`` per trial following the Greek/Population modes."""

    mode: LVMode = LVMode.GREEK
    steps: int = 150
    dt: float = 0.01
    greek_order: str = "appendix"

    def __post_init__(self):
        object.__setattr__(self, "mode", LVMode(self.mode))
        if self.greek_order not in GREEK_COEFFS:
            raise ValueError(f"greek_order must be one of {sorted(GREEK_COEFFS)}")

    @property
    def family_id(self) -> str:
        return f"lv-{self.mode.value}"

    def draw(self, rng: np.random.Generator) -> LVConfig:
        if self.mode is LVMode.GREEK:
            a, b, g, d = GREEK_COEFFS[self.greek_order]
            y1, y2 = rng.uniform(*GREEK_Y0_RANGE, size=2)
        else:
            y1, y2 = POPULATION_Y0
            a, b, g, d = (rng.uniform(*POPULATION_RANGES[k]) for k in ("alpha", "beta", "gamma", "delta"))
        return LVConfig(self.mode, y1, y2, a, b, g, d, self.steps, self.dt)

    def to_dict(self) -> dict:
        return {"kind": "lv", "mode": self.mode.value, "steps": self.steps, "dt": self.dt,
                "greek_order": self.greek_order}


def lv_rhs(y: np.ndarray, a: float, b: float, g: float, d: float) -> np.ndarray:
    y1, y2 = y
    return np.array([a * y1 - b * y1 * y2, d * y1 * y2 - g * y2])


def lv_first_integral(y1, y2, cfg: LVConfig):
    """Conserved quantity of the LV flow."""
    return cfg.delta * y1 - cfg.gamma * np.log(y1) + cfg.beta * y2 - cfg.alpha * np.log(y2)


def simulate_lv(config: LVConfig, rng_seed: Seed = None) -> Instantiation:
    """Fixed-step RK4 trajectory of ``config.steps`` points (the first is the initial state).

    ``rng_seed`` is accepted for interface symmetry; the integration is deterministic.
    """
    a, b, g, d = config.alpha, config.beta, config.gamma, config.delta
    h = config.dt
    ys = np.empty((config.steps, 2))
    y = np.array([config.y1_0, config.y2_0], dtype=np.float64)
    ys[0] = y
    for k in range(1, config.steps):
        k1 = lv_rhs(y, a, b, g, d)
        k2 = lv_rhs(y + 0.5 * h * k1, a, b, g, d)
        k3 = lv_rhs(y + 0.5 * h * k2, a, b, g, d)
        k4 = lv_rhs(y + h * k3, a, b, g, d)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)) or y.min() < UNDERFLOW:
            raise FloatingPointError(f"LV population left the valid range at step {k}: {y}")
        ys[k] = y
    x = np.arange(config.steps) * h
    return Instantiation(x, ys, config.coeffs, config.family_id)


# ---------------------------------------------------------------------------
# context / target sampling


class Phase(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass
class ContextTargetSplit:
    context_indices: np.ndarray
    target_indices: np.ndarray

    def __post_init__(self):
        c, t = self.context_indices, self.target_indices
        if len(np.unique(c)) != len(c) or len(np.unique(t)) != len(t):
            raise ValueError("duplicate indices in split")
        if not np.isin(c, t).all():
            raise ValueError("context indices must be a subset of target indices")


def sample_split(
    inst: Instantiation,
    phase: Phase | str,
    max_context: int,
    max_extra_target: int,
    rng_seed: Seed = None,
) -> ContextTargetSplit:
    """Train: |C| ~ U{1..N}, |T| = |C| + U{1..M}.  Eval: |C| = N, T = every index."""
    n = len(inst)
    if max_context < 1 or max_extra_target < 0:
        raise ValueError("max_context must be >= 1 and max_extra_target >= 0")
    if max_context + max_extra_target > n:
        raise ValueError(
            f"max_context + max_extra_target = {max_context + max_extra_target} exceeds sequence length {n}"
        )
    rng = _rng(rng_seed)
    if Phase(phase) is Phase.EVAL:
        ctx = np.sort(rng.choice(n, size=max_context, replace=False))
        return ContextTargetSplit(ctx, np.arange(n))
    n_ctx = int(rng.integers(1, max_context + 1))
    n_extra = int(rng.integers(1, max_extra_target + 1)) if max_extra_target > 0 else 0
    perm = rng.permutation(n)[: n_ctx + n_extra]
    return ContextTargetSplit(np.sort(perm[:n_ctx]), np.sort(perm))


# ---------------------------------------------------------------------------
# meta-datasets


DataSpec = Union[FunctionFamilySpec, GPKernelSpec, LVSampler]


@dataclass
class MetaDataset:
    train: list[Instantiation]
    val: list[Instantiation]
    test: list[Instantiation]
    spec: dict = field(default_factory=dict)
    seed: int | None = None

    def splits(self) -> dict[str, list[Instantiation]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def split_sizes(count: int, ratio: Sequence[float]) -> tuple[int, int, int]:
    total = float(sum(ratio))
    n_val = int(round(count * ratio[1] / total))
    n_test = int(round(count * ratio[2] / total))
    return count - n_val - n_test, n_val, n_test


def instantiation_key(inst: Instantiation) -> tuple:
    # GP draws share their kernel hyperparameters, so the sample itself is the identity
    if inst.family_id.startswith("gp-"):
        return (inst.family_id, inst.y.tobytes())
    return (inst.family_id, inst.coeffs)


def generate_instantiation(spec: DataSpec, seed: np.random.SeedSequence, n_points: int) -> Instantiation:
    if isinstance(spec, FunctionFamilySpec):
        return sample_family_instantiation(spec, n_points, seed)
    if isinstance(spec, GPKernelSpec):
        x = np.linspace(spec.x_range[0], spec.x_range[1], n_points)
        return sample_gp_instantiation(spec, x, seed)
    if isinstance(spec, LVSampler):
        return simulate_lv(spec.draw(_rng(seed)))
    raise TypeError(f"unsupported data spec {type(spec).__name__}")


def make_meta_dataset(
    spec: DataSpec,
    count: int,
    split_ratio: Sequence[float] = (9, 1, 1),
    rng_seed: int = 0,
    n_points: int = 100,
) -> MetaDataset:
    """Generate ``count`` distinct instantiations and split them train/val/test."""
    if count < 11:
        raise ValueError("count must be >= 11 so every split is non-empty")
    n_train, n_val, n_test = split_sizes(count, split_ratio)
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split ratio {tuple(split_ratio)} leaves an empty split for count={count}")
    root = np.random.SeedSequence(rng_seed)
    insts: list[Instantiation] = []
    seen: set = set()
    while len(insts) < count:
        for child in root.spawn(count - len(insts)):
            inst = generate_instantiation(spec, child, n_points)
            key = instantiation_key(inst)
            if key in seen:
                continue
            seen.add(key)
            insts.append(inst)
    meta = {**spec.to_dict(), "count": count, "n_points": n_points, "split_ratio": list(split_ratio)}
    return MetaDataset(
        insts[:n_train], insts[n_train:n_train + n_val], insts[n_train + n_val:], meta, rng_seed
    )
