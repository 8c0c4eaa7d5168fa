import math

import numpy as np
import pytest

from novnet.errors import ConfigError, LabelError
from novnet.losses import (
    MembershipParams,
    cross_entropy,
    cumulative_loss,
    membership_loss,
    membership_risk_components,
    sigmoid,
    sigmoid_prime,
    softmax,
)


def scalar_sigmoid(t):
    return 1.0 / (1.0 + math.exp(-t))


def membership_scalar_oracle(f, y, lam):
    """Straight evaluation of the loss formula with math.exp only."""
    c = len(f)
    correct = (1.0 - scalar_sigmoid(f[y])) ** 2
    wrong = sum(scalar_sigmoid(f[i]) ** 2 for i in range(c) if i != y) / (c - 1)
    return correct + lam * wrong


class TestSoftmax:
    def test_symmetric_zeros(self):
        assert np.allclose(softmax(np.zeros(3)), 1 / 3, rtol=0, atol=1e-15)

    def test_shift_invariance_exact_values(self):
        # shift by an integer keeps f + c exactly representable here
        f = np.array([1.0, 2.0, 0.5])
        assert np.array_equal(softmax(f), softmax(f + 16.0))

    def test_shift_invariance_random(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((4, 6))
        shifted = softmax(f + rng.standard_normal())
        assert np.allclose(softmax(f), shifted, rtol=0, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((10, 7)) * 10
        assert np.allclose(softmax(f).sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_two_logit_oracle(self):
        p = softmax(np.array([1.0, 2.0]))
        e1, e2 = math.exp(1.0), math.exp(2.0)
        assert abs(p[0] - e1 / (e1 + e2)) < 1e-15
        assert abs(p[1] - e2 / (e1 + e2)) < 1e-15


class TestSigmoid:
    def test_zero(self):
        assert sigmoid(0.0) == 0.5

    def test_symmetry(self):
        for t in (-3.0, -0.5, 0.25, 7.0):
            assert abs(sigmoid(t) + sigmoid(-t) - 1.0) < 1e-15

    def test_one(self):
        assert abs(sigmoid(1.0) - scalar_sigmoid(1.0)) < 1e-15

    def test_extreme_values_finite(self):
        assert sigmoid(-1000.0) == 0.0
        assert sigmoid(1000.0) == 1.0

    def test_prime(self):
        for t in (-2.0, 0.0, 1.5):
            s = scalar_sigmoid(t)
            assert abs(sigmoid_prime(t) - s * (1 - s)) < 1e-15


class TestCrossEntropy:
    def test_uniform_logits(self):
        r = cross_entropy(np.zeros(4), 2)
        assert abs(r.value - math.log(4)) < 1e-12

    def test_saturated(self):
        f = np.array([40.0, -40.0, -40.0])
        assert cross_entropy(f, 0).value < 1e-6

    def test_grad_is_softmax_minus_onehot(self):
        f = np.array([0.3, -1.2, 2.0])
        r = cross_entropy(f, 1)
        expected = softmax(f)
        expected[1] -= 1.0
        assert np.allclose(r.grad, expected, rtol=0, atol=1e-15)

    def test_grad_rows_sum_zero(self):
        rng = np.random.default_rng(2)
        f = rng.standard_normal((6, 5)) * 3
        y = rng.integers(0, 5, size=6)
        r = cross_entropy(f, y)
        assert np.allclose(r.grad.sum(axis=1), 0.0, rtol=0, atol=1e-12)

    def test_grad_matches_finite_differences(self):
        # logits bounded so no softmax entry saturates below the finite-
        # difference roundoff floor (~1e-10 absolute at eps=1e-6)
        rng = np.random.default_rng(3)
        for _ in range(10):
            f = rng.uniform(-2.0, 2.0, size=5)
            y = int(rng.integers(0, 5))
            r = cross_entropy(f, y)
            eps = 1e-6
            for j in range(5):
                hi = f.copy(); hi[j] += eps
                lo = f.copy(); lo[j] -= eps
                fd = (cross_entropy(hi, y).value - cross_entropy(lo, y).value) / (2 * eps)
                scale = max(abs(fd), abs(r.grad[j]), 1e-10)
                assert abs(r.grad[j] - fd) / scale < 1e-6

    def test_batch_mean(self):
        f = np.array([[1.0, 0.0], [0.0, 2.0]])
        y = np.array([0, 1])
        r = cross_entropy(f, y)
        singles = [cross_entropy(f[i], y[i]).value for i in range(2)]
        assert abs(r.value - np.mean(singles)) < 1e-15

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            cross_entropy(np.zeros(3), 3)


class TestMembershipLoss:
    def test_symmetric_zero_logits(self):
        r = membership_loss(np.zeros(3), 0, MembershipParams(5.0))
        assert abs(r.value - 1.5) < 1e-12

    def test_saturated(self):
        f = np.array([40.0, -40.0, -40.0])
        r = membership_loss(f, 0, MembershipParams(5.0))
        assert r.value < 1e-6
        assert np.all(np.abs(r.grad) < 1e-6)

    def test_scalar_oracle(self):
        f = np.array([1.0, -0.5, 0.2])
        expected = membership_scalar_oracle(f, 0, 5.0)
        assert abs(expected - 1.1845) < 5e-5  # sanity on the quoted value
        r = membership_loss(f, 0, MembershipParams(5.0))
        assert abs(r.value - expected) < 1e-12

    @pytest.mark.parametrize("c", [2, 5, 10])
    @pytest.mark.parametrize("lam", [1.0, 5.0])
    def test_grad_matches_finite_differences(self, c, lam):
        rng = np.random.default_rng(c * 100 + int(lam))
        params = MembershipParams(lam)
        for _ in range(10):
            f = rng.uniform(-4.0, 4.0, size=c)
            y = int(rng.integers(0, c))
            r = membership_loss(f, y, params)
            eps = 1e-6
            for j in range(c):
                hi = f.copy(); hi[j] += eps
                lo = f.copy(); lo[j] -= eps
                fd = (membership_loss(hi, y, params).value - membership_loss(lo, y, params).value) / (2 * eps)
                scale = max(abs(fd), abs(r.grad[j]), 1e-10)
                assert abs(r.grad[j] - fd) / scale < 1e-5

    def test_value_bounded(self):
        rng = np.random.default_rng(4)
        for lam in (1.0, 5.0):
            for _ in range(50):
                c = int(rng.integers(2, 8))
                f = rng.standard_normal(c) * 10
                y = int(rng.integers(0, c))
                v = membership_loss(f, y, MembershipParams(lam)).value
                assert 0.0 <= v <= 1.0 + lam

    def test_monotonicity_signs(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            c = int(rng.integers(2, 7))
            f = rng.uniform(-4, 4, size=c)
            y = int(rng.integers(0, c))
            g = membership_loss(f, y, MembershipParams(5.0)).grad
            assert g[y] < 0.0  # decreasing in the true-class activation
            for i in range(c):
                if i != y:
                    assert g[i] > 0.0

    def test_limit_at_extremes(self):
        f = np.full(5, -40.0)
        f[2] = 40.0
        assert membership_loss(f, 2, MembershipParams(5.0)).value < 1e-6

    def test_needs_two_classes(self):
        with pytest.raises(ConfigError):
            membership_loss(np.zeros(1), 0, MembershipParams(5.0))

    def test_lambda_positive(self):
        with pytest.raises(ConfigError):
            MembershipParams(0.0)

    def test_batch_mean_of_singles(self):
        rng = np.random.default_rng(6)
        f = rng.standard_normal((4, 3))
        y = np.array([0, 2, 1, 0])
        r = membership_loss(f, y, MembershipParams(5.0))
        singles = [membership_loss(f[i], y[i], MembershipParams(5.0)) for i in range(4)]
        assert abs(r.value - np.mean([s.value for s in singles])) < 1e-14
        stacked = np.stack([s.grad for s in singles]) / 4
        assert np.allclose(r.grad, stacked, rtol=0, atol=1e-15)

    def test_risk_components(self):
        f = np.array([1.0, -0.5, 0.2])
        correct, wrong = membership_risk_components(f, 0)
        assert abs(correct - (1 - scalar_sigmoid(1.0)) ** 2) < 1e-15
        expected_wrong = (scalar_sigmoid(-0.5) ** 2 + scalar_sigmoid(0.2) ** 2) / 2
        assert abs(wrong - expected_wrong) < 1e-15
        value = membership_loss(f, 0, MembershipParams(5.0)).value
        assert abs(value - (correct + 5.0 * wrong)) < 1e-12


class TestCumulativeLoss:
    def test_stated_defaults(self):
        assert cumulative_loss(1.0, 2.0, 3.0, 1.0, 1.0) == 6.0

    def test_degenerate_weights(self):
        assert cumulative_loss(1.25, 7.0, 9.0, 0.0, 0.0) == 1.25

    def test_arithmetic_oracle(self):
        assert abs(cumulative_loss(0.7, 1.1, 0.4, 2.0, 0.5) - 3.1) < 1e-12

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigError):
            cumulative_loss(1.0, 1.0, 1.0, -0.5, 1.0)
