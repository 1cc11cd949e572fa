import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ccnp_lab import tensor as T
from ccnp_lab.gradcheck import CASES, check_case, run_gradcheck
from ccnp_lab.tensor import NonFiniteError, ShapeError, Tape, Tensor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def small_matrix(min_side=1, max_side=5):
    shapes = st.tuples(st.integers(min_side, max_side), st.integers(min_side, max_side))
    return shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite))


class TestForwardValues:
    def test_softplus_zero_is_ln2(self):
        assert T.softplus(np.array(0.0)).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_cosine_self_similarity_is_one(self):
        a = np.array([0.3, -1.2, 4.0])
        assert T.cosine_sim(a, a).item() == pytest.approx(1.0, abs=1e-15)

    def test_matmul_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, np.eye(2)).data, a)

    def test_cosine_zero_norm_raises(self):
        with pytest.raises(ValueError, match="zero"):
            T.cosine_sim(np.zeros(3), np.ones(3))

    def test_cosine_matrix_form(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        ref = (a / np.linalg.norm(a, axis=1, keepdims=True)) @ (b / np.linalg.norm(b, axis=1, keepdims=True)).T
        np.testing.assert_allclose(T.cosine_sim(a, b).data, ref, atol=1e-14)

    def test_batched_matmul(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(4, 5))
        np.testing.assert_allclose(T.matmul(a, b).data, a @ b)


class TestErrors:
    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(3, 2\)"):
            T.add(np.ones((2, 3)), np.ones((3, 2)))

    def test_general_broadcast_rejected(self):
        # (2, 1) against (2, 3) is numpy-legal but outside the supported rules
        with pytest.raises(ShapeError):
            T.mul(np.ones((2, 1)), np.ones((2, 3)))

    def test_leading_batch_broadcast_allowed(self):
        out = T.add(np.ones((4, 2, 3)), np.arange(3.0))
        assert out.shape == (4, 2, 3)

    def test_nonfinite_forward_raises(self):
        with pytest.raises(NonFiniteError, match="exp"):
            T.exp(np.array([1000.0]))

    def test_log_of_zero_raises(self):
        with pytest.raises(NonFiniteError):
            T.log(np.array([0.0]))

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            T.backward(T.square(x))


class TestBackward:
    def test_square_grad(self):
        x = Tensor(3.0, requires_grad=True)
        T.backward(T.square(x))
        assert x.grad == pytest.approx(6.0)

    def test_softplus_grad_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        T.backward(T.softplus(x))
        assert x.grad == pytest.approx(0.5)

    def test_grads_accumulate_until_zeroed(self):
        x = Tensor(2.0, requires_grad=True)
        T.backward(T.square(x))
        T.backward(T.square(x))
        assert x.grad == pytest.approx(8.0)
        x.zero_grad()
        T.backward(T.square(x))
        assert x.grad == pytest.approx(4.0)

    def test_reused_input_accumulates(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        T.backward(T.sum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = T.square(x)
        assert y.node is None and not y.requires_grad

    def test_constants_do_not_get_grads(self):
        c = Tensor(np.ones(2))
        x = Tensor(np.ones(2), requires_grad=True)
        T.backward(T.sum(T.mul(x, c)))
        assert c.grad is None

    def test_tape_is_topological(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        loss = T.mean(T.relu(T.matmul(x, x)))
        tape = Tape(loss)
        pos = {id(t): k for k, t in enumerate(tape.order)}
        for t in tape.order:
            if t.node is not None:
                for p in t.node.inputs:
                    if p.requires_grad:
                        assert pos[id(p)] < pos[id(t)]
        assert tape.ops() == ["matmul", "relu", "mean"]

    @given(small_matrix())
    @settings(max_examples=40, deadline=None)
    def test_linearity(self, a):
        # grad of (f + g) equals grad f + grad g
        x = Tensor(a, requires_grad=True)
        T.backward(T.add(T.sum(T.square(x)), T.sum(T.softplus(x))))
        both = x.grad.copy()
        x.zero_grad()
        T.backward(T.sum(T.square(x)))
        g1 = x.grad.copy()
        x.zero_grad()
        T.backward(T.sum(T.softplus(x)))
        np.testing.assert_allclose(both, g1 + x.grad, rtol=1e-12, atol=1e-12)


class TestProperties:
    @given(small_matrix(), st.integers(0, 1))
    @settings(max_examples=60, deadline=None)
    def test_softmax_is_distribution(self, a, axis):
        s = T.softmax(a, axis=axis).data
        assert (s > 0).all()
        np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-12)

    @given(st.floats(-100, 100), st.tuples(st.integers(1, 6), st.integers(1, 6)), st.integers(0, 1))
    @settings(max_examples=60, deadline=None)
    def test_mean_of_constant(self, c, shape, axis):
        np.testing.assert_allclose(T.mean(np.full(shape, c), axis=axis).data, c, rtol=1e-14, atol=1e-14)

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50)))
    @settings(max_examples=60, deadline=None)
    def test_softplus_matches_reference(self, x):
        np.testing.assert_allclose(T.softplus(x).data, np.logaddexp(0.0, x), rtol=1e-12, atol=1e-300)


class TestGradcheck:
    @pytest.mark.parametrize("op", sorted(CASES))
    def test_op_matches_finite_differences(self, op):
        rng = np.random.default_rng(zlib.crc32(op.encode()))
        for _ in range(10):
            fn, inputs = CASES[op](rng)
            res = check_case(fn, inputs, rng)
            assert res.passed, f"{op}: max rel error {res.max_rel:.3e}"

    def test_run_gradcheck_covers_spec_ops(self):
        required = {"matmul", "add", "concat", "relu", "softplus", "mean", "scale", "cosine_sim", "softmax",
                    "log", "exp", "square", "gather_rows"}
        report = run_gradcheck(seed=3, n_cases=2)
        assert required <= set(report)
        assert all(r.passed for r in report.values())
