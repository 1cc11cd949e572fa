import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccnp_lab import tensor as T
from ccnp_lab.model import GaussianPrediction
from ccnp_lab.objectives import LossWeights, combined_objective, fcl_loss, frl_nll, tcl_loss

from oracles import fcl_oracle, tcl_oracle

TAU = 0.5


class TestTCL:
    def test_hand_computed_two_candidates(self):
        e1, e2 = np.eye(2)
        loss = tcl_loss(T.tensor(np.stack([e1, e2])), T.tensor(np.stack([e1, e2])), TAU).item()
        assert loss == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
        assert loss == pytest.approx(0.1269, abs=1e-4)

    def test_identical_embeddings_give_log_k(self):
        z = np.ones((6, 4))
        assert tcl_loss(T.tensor(z), T.tensor(z), TAU).item() == pytest.approx(math.log(6), abs=1e-12)

    def test_matches_oracle_on_random_batches(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            f, pts, d = rng.integers(1, 9), rng.integers(1, 9), rng.integers(2, 9)
            n = int(max(f * pts, 2))
            z_hat, z = rng.normal(size=(n, d)), rng.normal(size=(n, d))
            got = tcl_loss(T.tensor(z_hat), T.tensor(z), TAU).item()
            assert got == pytest.approx(tcl_oracle(z_hat, z, TAU), abs=1e-9)

    def test_single_point_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            tcl_loss(T.tensor(np.ones((1, 3))), T.tensor(np.ones((1, 3))))

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            tcl_loss(T.tensor(np.zeros((2, 3))), T.tensor(np.ones((2, 3))))


class TestFCL:
    def test_hand_computed_two_instantiations(self):
        e1, e2 = np.eye(2)
        q = np.stack([e1, e2])
        loss = fcl_loss(T.tensor(q), T.tensor(q.copy()), TAU).item()
        assert loss == pytest.approx(-math.log(math.exp(2) / (math.exp(2) + 3)), abs=1e-12)

    def test_identical_views_give_log_candidates(self):
        f = 5
        q = np.ones((f, 3))
        expected = math.log(1 + 3 * (f - 1))
        assert fcl_loss(T.tensor(q), T.tensor(q), TAU).item() == pytest.approx(expected, abs=1e-12)

    def test_matches_oracle_on_random_batches(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            f, d = int(rng.integers(2, 9)), int(rng.integers(2, 9))
            q_i, q_j = rng.normal(size=(f, d)), rng.normal(size=(f, d))
            got = fcl_loss(T.tensor(q_i), T.tensor(q_j), TAU).item()
            assert got == pytest.approx(fcl_oracle(q_i, q_j, TAU), abs=1e-9)

    def test_symmetric_in_views(self):
        rng = np.random.default_rng(2)
        q_i, q_j = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        a = fcl_loss(T.tensor(q_i), T.tensor(q_j)).item()
        b = fcl_loss(T.tensor(q_j), T.tensor(q_i)).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_single_instantiation_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            fcl_loss(T.tensor(np.ones((1, 3))), T.tensor(np.ones((1, 3))))


embeddings = st.integers(2, 6).flatmap(
    lambda n: st.tuples(st.just(n), st.integers(2, 5), st.integers(0, 2**31), st.floats(0.01, 100.0)))


class TestContrastiveProperties:
    @given(embeddings)
    @settings(max_examples=50, deadline=None)
    def test_scale_invariance(self, params):
        n, d, seed, c = params
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        for loss in (tcl_loss, fcl_loss):
            base = loss(T.tensor(a), T.tensor(b)).item()
            scaled = loss(T.tensor(a * c), T.tensor(b * c)).item()
            assert abs(base - scaled) < 1e-10

    @given(embeddings)
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, params):
        n, d, seed, _ = params
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        assert tcl_loss(T.tensor(a), T.tensor(b)).item() >= 0
        assert fcl_loss(T.tensor(a), T.tensor(b)).item() >= 0


def gaussian(mu, sigma):
    return GaussianPrediction(T.tensor(np.asarray(mu, float)), T.tensor(np.asarray(sigma, float)))


class TestFRL:
    HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)

    def test_at_mode_unit_scale(self):
        loss = frl_nll(gaussian([[0.3]], [[1.0]]), np.array([[0.3]])).item()
        assert loss == pytest.approx(self.HALF_LOG_2PI, abs=1e-15)
        assert loss == pytest.approx(0.9189, abs=1e-4)

    def test_one_sigma_off(self):
        s = 0.37
        loss = frl_nll(gaussian([[1.0]], [[s]]), np.array([[1.0 + s]])).item()
        assert loss == pytest.approx(self.HALF_LOG_2PI + math.log(s) + 0.5, abs=1e-12)

    def test_two_dims_sum(self):
        one = frl_nll(gaussian([[0.0]], [[0.5]]), np.array([[0.2]])).item()
        two = frl_nll(gaussian([[0.0, 0.0]], [[0.5, 0.5]]), np.array([[0.2, 0.2]])).item()
        assert two == pytest.approx(2 * one, abs=1e-12)

    def test_list_input_is_mean_over_points(self):
        a = gaussian([[0.0], [1.0]], [[1.0], [2.0]])
        b = gaussian([[3.0]], [[0.5]])
        ya, yb = np.array([[0.5], [0.0]]), np.array([[2.0]])
        whole = frl_nll([a, b], [ya, yb]).item()
        pts = [frl_nll(gaussian([[m]], [[s]]), np.array([[y]])).item()
               for m, s, y in ((0, 1, 0.5), (1, 2, 0), (3, 0.5, 2))]
        assert whole == pytest.approx(np.mean(pts), abs=1e-12)

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            frl_nll(gaussian([[0.0]], [[0.0]]), np.array([[0.0]]))

    def test_misaligned_lists(self):
        with pytest.raises(ValueError, match="aligned"):
            frl_nll([gaussian([[0.0]], [[1.0]])], [])

    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.1, 5))
    @settings(max_examples=80, deadline=None)
    def test_decreases_as_mean_approaches_target(self, y, mu0, sigma):
        prev = None
        for t in np.linspace(0, 1, 6):
            mu = mu0 + t * (y - mu0)
            loss = frl_nll(gaussian([[mu]], [[sigma]]), np.array([[y]])).item()
            if prev is not None:
                assert loss <= prev + 1e-12
            prev = loss


class TestCombined:
    def test_zero_weights_reduce_to_frl(self):
        frl, tcl, fcl = T.tensor(1.5), T.tensor(2.0), T.tensor(3.0)
        assert combined_objective(frl, tcl, fcl, LossWeights(0, 0)).item() == 1.5

    def test_weighted_sum(self):
        frl, tcl, fcl = T.tensor(1.5), T.tensor(2.0), T.tensor(3.0)
        assert combined_objective(frl, tcl, fcl, LossWeights(0.5, 0.1)).item() == pytest.approx(1.5 + 1.0 + 0.3)

    def test_missing_terms_skipped(self):
        assert combined_objective(T.tensor(1.0), None, None, LossWeights()).item() == 1.0

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(tau=0.0)
        with pytest.raises(ValueError):
            LossWeights(alpha=-1.0)
