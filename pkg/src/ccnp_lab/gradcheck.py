"""Central finite-difference checks for every differentiable op.

Each case draws random inputs, contracts the op output with a fixed random
weight array to get a scalar, and compares the autodiff gradient of every
input element against ``(f(x + h) - f(x - h)) / 2h``.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T

H = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def _away_from_zero(rng, shape, lo=0.1, hi=2.0):
    mag = rng.uniform(lo, hi, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _positive(rng, shape):
    return rng.uniform(0.2, 3.0, size=shape)


def _shape2(rng):
    return (int(rng.integers(1, 6)), int(rng.integers(1, 6)))


def _case_matmul(rng):
    n, k = _shape2(rng)
    m = int(rng.integers(1, 6))
    if rng.random() < 0.3:
        b = int(rng.integers(2, 4))
        return T.matmul, [rng.normal(size=(b, n, k)), rng.normal(size=(k, m))]
    if rng.random() < 0.5:
        b = int(rng.integers(2, 4))
        return T.matmul, [rng.normal(size=(b, n, k)), rng.normal(size=(b, k, m))]
    return T.matmul, [rng.normal(size=(n, k)), rng.normal(size=(k, m))]


def _case_binary(fn, positive_rhs=False):
    def case(rng):
        shape = _shape2(rng)
        r = rng.random()
        rhs_shape = shape if r < 0.5 else (shape[1:] if r < 0.8 else ())
        rhs = _positive(rng, rhs_shape) if positive_rhs else rng.normal(size=rhs_shape)
        return fn, [rng.normal(size=shape), rhs]

    return case


def _case_concat(rng):
    axis = int(rng.integers(0, 2))
    n, d = _shape2(rng)
    parts = []
    for _ in range(int(rng.integers(1, 4))):
        s = [n, d]
        s[axis] = int(rng.integers(1, 4))
        parts.append(rng.normal(size=tuple(s)))
    return (lambda *xs: T.concat(xs, axis=axis)), parts


def _case_unary(fn, sampler=None):
    def case(rng):
        shape = _shape2(rng)
        x = sampler(rng, shape) if sampler else rng.normal(size=shape)
        return fn, [x]

    return case


def _case_axis(fn):
    def case(rng):
        shape = _shape2(rng) + ((int(rng.integers(1, 4)),) if rng.random() < 0.4 else ())
        axis = None if fn is T.mean and rng.random() < 0.25 else int(rng.integers(0, len(shape)))
        return (lambda x: fn(x, axis=axis)), [rng.normal(size=shape)]

    return case


def _case_scale(rng):
    c = float(rng.normal() * 2)
    return (lambda x: T.scale(x, c)), [rng.normal(size=_shape2(rng))]


def _case_cosine(rng):
    d = int(rng.integers(2, 6))
    if rng.random() < 0.3:
        return T.cosine_sim, [rng.normal(size=(d,)), rng.normal(size=(d,))]
    return T.cosine_sim, [rng.normal(size=(int(rng.integers(1, 5)), d)), rng.normal(size=(int(rng.integers(1, 5)), d))]


def _case_gather(rng):
    n, d = _shape2(rng)
    idx = rng.integers(0, n, size=int(rng.integers(1, 8)))
    return (lambda x: T.gather_rows(x, idx)), [rng.normal(size=(n, d))]


def _case_transpose(rng):
    shape = _shape2(rng) + (int(rng.integers(1, 4)),)
    axes = tuple(rng.permutation(3))
    return (lambda x: T.transpose(x, axes)), [rng.normal(size=shape)]


def _case_reshape(rng):
    n, d = _shape2(rng)
    return (lambda x: T.reshape(x, (d, n))), [rng.normal(size=(n, d))]


CASES: dict[str, Callable] = {
    "matmul": _case_matmul,
    "add": _case_binary(T.add),
    "sub": _case_binary(T.sub),
    "mul": _case_binary(T.mul),
    "div": _case_binary(T.div, positive_rhs=True),
    "concat": _case_concat,
    "relu": _case_unary(T.relu, _away_from_zero),
    "softplus": _case_unary(T.softplus),
    "sigmoid": _case_unary(T.sigmoid),
    "mean": _case_axis(T.mean),
    "sum": _case_axis(T.sum),
    "scale": _case_scale,
    "cosine_sim": _case_cosine,
    "softmax": _case_axis(T.softmax),
    "log": _case_unary(T.log, _positive),
    "exp": _case_unary(T.exp),
    "square": _case_unary(T.square),
    "gather_rows": _case_gather,
    "transpose": _case_transpose,
    "reshape": _case_reshape,
}


class CaseResult(NamedTuple):
    max_rel: float  # over elements whose abs error exceeds ABS_FLOOR
    max_abs: float

    @property
    def passed(self) -> bool:
        return self.max_rel < REL_TOL


def _errors(a: np.ndarray, n: np.ndarray) -> tuple[float, float]:
    diff = np.abs(a - n)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
    rel = np.where(diff <= ABS_FLOOR, 0.0, diff / denom)
    return float(rel.max(initial=0.0)), float(diff.max(initial=0.0))


def check_case(fn: Callable, inputs: list[np.ndarray], rng) -> CaseResult:
    """Compare autodiff against finite differences for every input element."""
    ts = [T.Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*ts)
    w = rng.normal(size=out.shape)
    loss = T.sum(T.mul(out, w)) if out.ndim else T.mul(out, float(w))
    T.backward(loss)

    def f(xs):
        o = fn(*[T.Tensor(x) for x in xs]).data
        return float(np.sum(o * w))

    worst_rel = worst_abs = 0.0
    for k, x in enumerate(inputs):
        num = np.zeros_like(x)
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            xp = [v.copy() for v in inputs]
            xm = [v.copy() for v in inputs]
            xp[k][idx] += H
            xm[k][idx] -= H
            num[idx] = (f(xp) - f(xm)) / (2 * H)
        rel, ab = _errors(ts[k].grad, num)
        worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, ab)
    return CaseResult(worst_rel, worst_abs)


def run_gradcheck(seed: int = 0, n_cases: int = 10, ops: list[str] | None = None) -> dict[str, CaseResult]:
    """Worst-case errors per op over ``n_cases`` random shapes each."""
    rng = np.random.default_rng(seed)
    report = {}
    for name in ops or list(CASES):
        rel = ab = 0.0
        for _ in range(n_cases):
            fn, inputs = CASES[name](rng)
            res = check_case(fn, inputs, rng)
            rel, ab = max(rel, res.max_rel), max(ab, res.max_abs)
        report[name] = CaseResult(rel, ab)
    return report
