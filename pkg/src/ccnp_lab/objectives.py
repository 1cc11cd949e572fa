"""Reconstruction NLL and the two InfoNCE objectives.

Both contrastive losses are means over anchors of
``-log(exp(s_pos / tau) / (exp(s_pos / tau) + sum_neg exp(s_neg / tau)))``
with cosine similarity ``s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import GaussianPrediction
from .tensor import Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # temporal contrast
    beta: float = 1.0  # function contrast
    tau: float = 0.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class BatchEmbeddings:
    """Contrastive embeddings for one batch.

    ``z_hat[k]`` and ``z[k]`` are the predictive and ground-truth embeddings
    of the same (instantiation, target index); ``q_i[f]``/``q_j[f]`` are the
    two partial-view embeddings of instantiation ``f``.
    """

    z_hat: Tensor | None = None
    z: Tensor | None = None
    q_i: Tensor | None = None
    q_j: Tensor | None = None
    instance_ids: np.ndarray | None = None


def frl_nll(predictions: GaussianPrediction | Sequence[GaussianPrediction], targets) -> Tensor:
    """Mean over target points of the diagonal-Gaussian negative log-likelihood.

    Dimensions of a multi-output target are summed per point.
    """
    if isinstance(predictions, GaussianPrediction):
        predictions = [predictions]
        targets = [targets]
    if not predictions or len(predictions) != len(targets):
        raise ValueError("predictions and targets must be aligned, non-empty lists")
    if len(predictions) == 1:
        mu, sigma = predictions[0].mean, predictions[0].scale
    else:
        mu = T.concat([p.mean for p in predictions], axis=0)
        sigma = T.concat([p.scale for p in predictions], axis=0)
    ys = [np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64) for t in targets]
    y = np.concatenate([a.reshape(len(a), -1) for a in ys]).reshape(mu.shape)
    if (sigma.data <= 0).any():
        raise ValueError("predictive scale must be positive")
    n_points = mu.shape[0]
    resid = T.div(T.sub(y, mu), sigma)
    per_elem = T.add(T.add(T.log(sigma), T.scale(T.square(resid), 0.5)), HALF_LOG_2PI)
    return T.scale(T.sum(per_elem), 1.0 / n_points)


def _infonce_rows(logits: Tensor, pos_mask: np.ndarray, cand_mask: np.ndarray) -> Tensor:
    """Per-row loss; ``cand_mask`` marks positive+negatives, ``pos_mask`` the single positive."""
    pos = T.sum(T.mul(logits, pos_mask), axis=1)
    denom = T.sum(T.mul(T.exp(logits), cand_mask), axis=1)
    return T.sub(T.log(denom), pos)


def tcl_loss(z_hat: Tensor, z: Tensor, tau: float = 0.5) -> Tensor:
    """Temporal InfoNCE: anchor ``z_hat[k]``, positive ``z[k]``, every other ``z`` row a negative."""
    n = z_hat.shape[0]
    if z.shape[0] != n:
        raise ValueError(f"tcl_loss: {n} anchors but {z.shape[0]} ground-truth embeddings")
    if n < 2:
        raise ValueError("tcl_loss needs at least 2 embedded points")
    logits = T.scale(T.cosine_sim(z_hat, z), 1.0 / tau)
    eye = np.eye(n)
    return T.mean(_infonce_rows(logits, eye, np.ones((n, n))))


def fcl_loss(q_i: Tensor, q_j: Tensor, tau: float = 0.5) -> Tensor:
    """Function InfoNCE over two partial views per instantiation.

    For anchor ordering (a, b) of instantiation f the positive is
    ``sim(q_a^f, q_b^f)`` and, for every other instantiation f', the negatives
    are ``sim(q_a^f, q_a^f')``, ``sim(q_a^f, q_b^f')`` and ``sim(q_b^f, q_b^f')``.
    Both orderings are averaged, so the loss is symmetric in the two views.
    """
    f = q_i.shape[0]
    if q_j.shape[0] != f:
        raise ValueError("fcl_loss: view batches differ in size")
    if f < 2:
        raise ValueError("fcl_loss needs at least 2 instantiations (no negatives otherwise)")
    inv_tau = 1.0 / tau
    s_ii = T.scale(T.cosine_sim(q_i, q_i), inv_tau)
    s_ij = T.scale(T.cosine_sim(q_i, q_j), inv_tau)
    s_jj = T.scale(T.cosine_sim(q_j, q_j), inv_tau)
    s_ji = T.transpose(s_ij)
    off = 1.0 - np.eye(f)
    eye = np.eye(f)
    pos = T.sum(T.mul(s_ij, eye), axis=1)
    e_ii, e_ij, e_jj, e_ji = T.exp(s_ii), T.exp(s_ij), T.exp(s_jj), T.exp(s_ji)
    # ordering (i, j): negatives (i,i'), (i,j'), (j,j'); ordering (j, i): (j,j'), (j,i'), (i,i')
    neg_ij = T.sum(T.mul(T.add(T.add(e_ii, e_ij), e_jj), off), axis=1)
    neg_ji = T.sum(T.mul(T.add(T.add(e_jj, e_ji), e_ii), off), axis=1)
    e_pos = T.exp(pos)
    loss_ij = T.sub(T.log(T.add(e_pos, neg_ij)), pos)
    loss_ji = T.sub(T.log(T.add(e_pos, neg_ji)), pos)
    return T.scale(T.add(T.mean(loss_ij), T.mean(loss_ji)), 0.5)


def combined_objective(frl: Tensor, tcl: Tensor | None, fcl: Tensor | None, weights: LossWeights) -> Tensor:
    """``frl + alpha * tcl + beta * fcl``; absent or zero-weighted terms are skipped."""
    total = frl
    if tcl is not None and weights.alpha > 0:
        total = T.add(total, T.scale(tcl, weights.alpha))
    if fcl is not None and weights.beta > 0:
        total = T.add(total, T.scale(fcl, weights.beta))
    return total
