"""CNP / AttnCNP / CCNP model family.

Three encoding branches share the raw pair input ``concat(x, y)``:

* ``C`` feeds the generative decoder (reconstruction loss),
* ``T`` feeds the temporal contrastive head (the main text calls this branch
  ``P``; ``r_P`` and ``r_T`` are the same vector),
* ``F`` feeds the function contrastive head.

Each branch owns a 4-layer ReLU pair encoder and, unless attention is
disabled, its own multi-head self-attention block; the set representation is
the mean over context rows of the (attended) encodings.  The decoder consumes
``concat(x_t, r_C, r_T, r_F)`` restricted to the branches the variant has.

The index and observation featurizers are the identity for scalar indices and
low-dimensional observations, so there is nothing to learn in them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .datagen import Instantiation
from .nn import MLP, Linear, Module, MultiHeadSelfAttention
from .tensor import Tensor

BRANCHES = ("C", "T", "F")
SIGMA_FLOOR = 0.1
MASK_VALUE = -1e30

VARIANTS: dict[str, tuple[tuple[str, ...], bool]] = {
    "CNP": (("C",), False),
    "AttnCNP": (("C",), True),
    "CCNP": (("C", "T", "F"), True),
    "CCNP_minus_Attn": (("C", "T", "F"), False),
    "CCNP_minus_TCL": (("C", "F"), True),
    "CCNP_minus_FCL": (("C", "T"), True),
}


@dataclass(frozen=True)
class ModelDims:
    x_dim: int = 1
    y_dim: int = 1
    width: int = 64
    heads: int = 4
    z_dim: int = 8
    encoder_layers: int = 4
    decoder_layers: int = 4
    shared_projection: bool = False

    def __post_init__(self):
        for name in ("x_dim", "y_dim", "width", "heads", "z_dim", "encoder_layers", "decoder_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelDims.{name} must be >= 1")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} must be divisible by heads {self.heads}")


@dataclass(frozen=True)
class Architecture:
    kind: str
    dims: ModelDims
    branches: tuple[str, ...]
    attention: bool
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dims": asdict(self.dims),
            "branches": list(self.branches),
            "attention": self.attention,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(d["kind"], ModelDims(**d["dims"]), tuple(d["branches"]), bool(d["attention"]), int(d["seed"]))


# ---------------------------------------------------------------------------
# batches of sets


@dataclass
class SetBatch:
    """Several variable-size sets of ``(x, y)`` rows stacked along axis 0.

    ``segment[i]`` names the set row ``i`` belongs to; sets are contiguous and
    in order.
    """

    x: np.ndarray  # (N, x_dim)
    y: np.ndarray  # (N, y_dim)
    segment: np.ndarray  # (N,)
    n_segments: int
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_sets(cls, sets: Sequence[tuple[np.ndarray, np.ndarray]]) -> "SetBatch":
        if not sets:
            raise ValueError("SetBatch needs at least one set")
        xs, ys, segs = [], [], []
        for s, (x, y) in enumerate(sets):
            if len(x) == 0:
                raise ValueError(f"set {s} is empty")
            x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
            y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
            xs.append(x)
            ys.append(y)
            segs.append(np.full(len(x), s, dtype=np.intp))
        return cls(np.concatenate(xs), np.concatenate(ys), np.concatenate(segs), len(sets))

    @classmethod
    def from_instantiations(cls, insts: Sequence[Instantiation], indices: Sequence[np.ndarray]) -> "SetBatch":
        return cls.from_sets([(inst.x[idx], inst.y[idx]) for inst, idx in zip(insts, indices)])

    def __len__(self) -> int:
        return len(self.x)

    @property
    def lengths(self) -> np.ndarray:
        return np.bincount(self.segment, minlength=self.n_segments)

    def pairs(self) -> np.ndarray:
        return np.concatenate([self.x, self.y], axis=1)

    def mean_matrix(self) -> np.ndarray:
        """(S, N) matrix averaging the rows of each set."""
        if "mean" not in self._cache:
            m = np.zeros((self.n_segments, len(self)))
            m[self.segment, np.arange(len(self))] = 1.0 / self.lengths[self.segment]
            self._cache["mean"] = m
        return self._cache["mean"]

    def padding(self, heads: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gather index into rows (+1 pad row), additive key mask, and padded mean matrix."""
        key = ("pad", heads)
        if key not in self._cache:
            lengths = self.lengths
            n_max = int(lengths.max())
            starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
            pos = np.arange(n_max)
            valid = pos[None, :] < lengths[:, None]  # (S, n_max)
            index = np.where(valid, starts[:, None] + pos[None, :], len(self)).reshape(-1)
            key_mask = np.where(valid, 0.0, MASK_VALUE)  # (S, n_max)
            mask = np.broadcast_to(key_mask[:, None, None, :], (self.n_segments, heads, n_max, n_max)).copy()
            mean = np.zeros((self.n_segments, self.n_segments * n_max))
            rows = np.repeat(np.arange(self.n_segments), n_max)
            mean[rows[valid.reshape(-1)], np.flatnonzero(valid.reshape(-1))] = (
                1.0 / lengths[rows[valid.reshape(-1)]]
            )
            self._cache[key] = (index, mask, mean)
        return self._cache[key]


@dataclass
class GaussianPrediction:
    mean: Tensor
    scale: Tensor


# ---------------------------------------------------------------------------
# modules


class EncoderStack(Module):
    def __init__(self, arch: Architecture):
        d = arch.dims
        sizes = [d.x_dim + d.y_dim] + [d.width] * d.encoder_layers
        self.pair = {b: MLP(sizes, arch.seed, f"encoder.pair.{b}") for b in arch.branches}
        self.attention = (
            {b: MultiHeadSelfAttention(d.width, d.heads, arch.seed, f"encoder.attention.{b}") for b in arch.branches}
            if arch.attention
            else {}
        )


class DecoderStack(Module):
    def __init__(self, arch: Architecture):
        d = arch.dims
        sizes = [d.x_dim + d.width * len(arch.branches)] + [d.width] * d.decoder_layers
        self.trunk = MLP(sizes, arch.seed, "decoder.trunk", final_relu=True)
        self.mu_head = Linear(d.width, d.y_dim, arch.seed, "decoder.mu_head")
        self.sigma_head = Linear(d.width, d.y_dim, arch.seed, "decoder.sigma_head")


class Heads(Module):
    def __init__(self, arch: Architecture):
        d = arch.dims
        if "T" in arch.branches:
            self.varphi = MLP([d.x_dim + d.width, d.width, d.width], arch.seed, "heads.varphi")
            self.rho_P = Linear(d.width, d.z_dim, arch.seed, "heads.rho_P")
            obs_out = d.width if d.shared_projection else d.z_dim
            self.obs_proj = Linear(d.y_dim, obs_out, arch.seed, "heads.obs_proj")
        if "F" in arch.branches:
            self.rho_F = Linear(d.width, d.z_dim, arch.seed, "heads.rho_F")


class CCNPModel(Module):
    def __init__(self, arch: Architecture):
        self.arch = arch
        self.encoder = EncoderStack(arch)
        self.decoder = DecoderStack(arch)
        self.heads = Heads(arch)

    @property
    def branches(self) -> tuple[str, ...]:
        return self.arch.branches

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data[...] = arr

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Parameters stepped by each objective's update.

        FCL: branch-F encoder and attention, decoder, rho_F.  TCL: branch-T
        encoder and attention, varphi, rho_P and the observation projection.
        FRL: branch-C encoder and attention, decoder.
        """
        named = list(self.named_parameters())

        def pick(prefixes):
            return [(n, p) for n, p in named if n.startswith(prefixes)]

        groups = {
            "frl": pick(("encoder.pair.C.", "encoder.attention.C.", "decoder.")),
        }
        if "T" in self.branches:
            groups["tcl"] = pick(("encoder.pair.T.", "encoder.attention.T.", "heads.varphi.", "heads.rho_P.",
                                  "heads.obs_proj."))
        if "F" in self.branches:
            groups["fcl"] = pick(("encoder.pair.F.", "encoder.attention.F.", "decoder.", "heads.rho_F."))
        return groups


def build_variant(kind: str, dims: ModelDims | None = None, seed: int = 0,
                  drop: Sequence[str] = (), attention: bool | None = None) -> CCNPModel:
    """Construct one of the named model variants.

    ``drop`` removes contrastive branches ("T"/"F") and ``attention`` overrides
    the aggregation type; with both applied a CCNP can collapse to exactly the
    AttnCNP/CNP architecture.
    """
    if kind not in VARIANTS:
        raise ValueError(f"unknown variant {kind!r}; expected one of {sorted(VARIANTS)}")
    branches, attn = VARIANTS[kind]
    branches = tuple(b for b in branches if b not in drop)
    if "C" not in branches:
        raise ValueError("the reconstruction branch C cannot be dropped")
    arch = Architecture(kind, dims or ModelDims(), branches, attn if attention is None else attention, seed)
    return CCNPModel(arch)


# ---------------------------------------------------------------------------
# forward computations


def encode_rows(model: CCNPModel, branch: str, batch: SetBatch) -> Tensor:
    """Per-row local representations ``h(x, y)``; rows never mix."""
    return model.encoder.pair[branch](T.tensor(batch.pairs()))


def aggregate(model: CCNPModel, branch: str, rows: Tensor, batch: SetBatch) -> Tensor:
    """Permutation-invariant set summary per segment, shape ``(S, width)``."""
    if len(batch) == 0:
        raise ValueError("cannot aggregate an empty context")
    if not model.arch.attention:
        return T.matmul(batch.mean_matrix(), rows)
    attn = model.encoder.attention[branch]
    index, mask, mean = batch.padding(attn.heads)
    s, width = batch.n_segments, rows.shape[1]
    n_max = mask.shape[-1]
    padded = T.gather_rows(T.concat([rows, np.zeros((1, width))], axis=0), index)
    out = attn(T.reshape(padded, (s, n_max, width)), mask)
    return T.matmul(mean, T.reshape(out, (s * n_max, width)))


def represent(model: CCNPModel, branch: str, batch: SetBatch) -> Tensor:
    return aggregate(model, branch, encode_rows(model, branch, batch), batch)


def represent_all(model: CCNPModel, batch: SetBatch, trainable: Sequence[str] | None = None) -> dict[str, Tensor]:
    """Representations for every branch; branches outside ``trainable`` are computed without grad."""
    out = {}
    for b in model.branches:
        if trainable is None or b in trainable:
            out[b] = represent(model, b, batch)
        else:
            with T.no_grad():
                out[b] = represent(model, b, batch)
    return out


def decode(model: CCNPModel, x_t: np.ndarray, segment: np.ndarray, bundle: dict[str, Tensor]) -> GaussianPrediction:
    """Gaussian predictive per target row; sigma = 0.9 softplus(.) + 0.1."""
    missing = [b for b in model.branches if b not in bundle]
    if missing:
        raise ValueError(f"representation bundle lacks branches {missing}")
    x_t = np.asarray(x_t, dtype=np.float64).reshape(len(x_t), -1)
    parts = [T.tensor(x_t)] + [T.gather_rows(bundle[b], segment) for b in model.branches]
    dec = model.decoder
    r_g = dec.trunk(T.concat(parts, axis=1))
    mu = dec.mu_head(r_g)
    sigma = T.add(T.scale(T.softplus(dec.sigma_head(r_g)), 1.0 - SIGMA_FLOOR), SIGMA_FLOOR)
    return GaussianPrediction(mu, sigma)


def predict(model: CCNPModel, context: SetBatch, x_t: np.ndarray, segment: np.ndarray) -> GaussianPrediction:
    with T.no_grad():
        return decode(model, x_t, segment, represent_all(model, context))


def tcl_embed(model: CCNPModel, x_t: np.ndarray, segment: np.ndarray, r_T: Tensor,
              y_t: np.ndarray) -> tuple[Tensor, Tensor]:
    """Predictive embedding ``rho_P(varphi(x_t, r_T))`` and ground-truth embedding of ``y_t``."""
    h = model.heads
    x_t = np.asarray(x_t, dtype=np.float64).reshape(len(x_t), -1)
    y_t = np.asarray(y_t, dtype=np.float64).reshape(len(y_t), -1)
    pred = h.varphi(T.concat([T.tensor(x_t), T.gather_rows(r_T, segment)], axis=1))
    z_hat = h.rho_P(pred)
    z = h.obs_proj(T.tensor(y_t))
    if model.arch.dims.shared_projection:
        z = h.rho_P(z)
    return z_hat, z


def split_views(context_indices: Sequence[np.ndarray], rng: np.random.Generator) -> tuple[list, list]:
    """Halve each context index set into two disjoint random views (floor/ceil sizes)."""
    first, second = [], []
    for idx in context_indices:
        idx = np.asarray(idx)
        if len(idx) < 2:
            raise ValueError("function contrast needs at least 2 context points per instantiation")
        perm = rng.permutation(idx)
        half = len(idx) // 2
        first.append(np.sort(perm[:half]))
        second.append(np.sort(perm[half:]))
    return first, second


def fcl_embed(model: CCNPModel, insts: Sequence[Instantiation], context_indices: Sequence[np.ndarray],
              rng_seed=None) -> tuple[Tensor, Tensor, list, list]:
    """Project both partial views of every context set through branch F and rho_F.

    Returns ``(q_i, q_j, views_i, views_j)`` with ``q_*`` of shape ``(F, z)``.
    """
    rng = np.random.default_rng(rng_seed)
    views_i, views_j = split_views(context_indices, rng)
    batch = SetBatch.from_instantiations(list(insts) * 2, views_i + views_j)
    q = model.heads.rho_F(represent(model, "F", batch))
    f = len(insts)
    return T.gather_rows(q, np.arange(f)), T.gather_rows(q, np.arange(f, 2 * f)), views_i, views_j


def encode_context(model: CCNPModel, branch: str, inst: Instantiation, context_indices: np.ndarray) -> Tensor:
    idx = np.asarray(context_indices)
    if idx.size == 0:
        raise ValueError("empty context")
    return encode_rows(model, branch, SetBatch.from_instantiations([inst], [idx]))


def representation_bundle(model: CCNPModel, inst: Instantiation, context_indices: np.ndarray) -> dict[str, np.ndarray]:
    with T.no_grad():
        reps = represent_all(model, SetBatch.from_instantiations([inst], [np.asarray(context_indices)]))
    return {b: r.data[0].copy() for b, r in reps.items()}
