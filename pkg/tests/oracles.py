"""Loop-based InfoNCE oracles: one anchor at a time, plain floats, no vectorization."""

import math

import numpy as np


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def tcl_oracle(z_hat, z, tau):
    losses = []
    for k in range(len(z_hat)):
        logits = [cos(z_hat[k], z[j]) / tau for j in range(len(z))]
        losses.append(-(logits[k] - math.log(sum(math.exp(v) for v in logits))))
    return sum(losses) / len(losses)


def fcl_oracle(q_i, q_j, tau):
    views = (q_i, q_j)
    f_count = len(q_i)
    total = 0.0
    for f in range(f_count):
        for a, b in ((0, 1), (1, 0)):
            pos = math.exp(cos(views[a][f], views[b][f]) / tau)
            neg = 0.0
            for g in range(f_count):
                if g == f:
                    continue
                neg += math.exp(cos(views[a][f], views[a][g]) / tau)
                neg += math.exp(cos(views[a][f], views[b][g]) / tau)
                neg += math.exp(cos(views[b][f], views[b][g]) / tau)
            total += -math.log(pos / (pos + neg))
    return total / (2 * f_count)
