import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smoothitr.errors import DimensionMismatch, EmptySample
from smoothitr.nuisance import WeightedSample
from smoothitr.objective import (RuleCoefficients, penalized_gradient, penalized_objective,
                                 penalty, risk, risk_gradient, surrogate_gradient,
                                 surrogate_objective, surrogate_shift)
from smoothitr.smoothing import KernelKind, SmoothedLoss

EPA = SmoothedLoss(KernelKind.EPANECHNIKOV, 0.5)


def random_sample(rng, n=50, p=3):
    return WeightedSample(rng.exponential(size=n), rng.choice([-1.0, 1.0], n),
                          rng.normal(size=(n, p)))


def one_unit(weight=2.0, x=0.0):
    return WeightedSample(np.array([weight]), np.array([1.0]), np.array([[x]]))


class TestRuleCoefficients:
    def test_round_trip(self):
        b = RuleCoefficients.from_vector([1.0, 2.0, -3.0])
        assert b.beta0 == 1.0 and b.beta1 == (2.0, -3.0) and b.p == 2
        np.testing.assert_array_equal(b.as_vector(), [1, 2, -3])

    def test_ties_go_to_control(self):
        b = RuleCoefficients(0.0, (1.0,))
        np.testing.assert_array_equal(b.rule(np.array([[-1.0], [0.0], [1.0]])), [0, 0, 1])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            RuleCoefficients(np.nan, (1.0,))


class TestRisk:
    def test_zero_weights(self):
        ws = WeightedSample(np.zeros(3), np.ones(3), np.ones((3, 1)))
        assert risk(ws, [0.3, -2.0], EPA) == 0.0
        np.testing.assert_array_equal(risk_gradient(ws, [0.3, -2.0], EPA), 0.0)

    def test_margin_beyond_window(self):
        assert risk(one_unit(), [1.5, 0.0], EPA) == 0.0

    def test_linear_regime(self):
        assert risk(one_unit(), [0.0, 0.0], EPA) == 2.0

    def test_gradient_zero_when_all_margins_clear(self):
        ws = WeightedSample(np.ones(4), np.array([1.0, 1, -1, -1]),
                            np.array([[2.0], [3.0], [-2.0], [-4.0]]))
        np.testing.assert_array_equal(risk_gradient(ws, [0.0, 1.0], EPA), 0.0)

    def test_empty_sample(self):
        ws = WeightedSample(np.zeros(0), np.zeros(0), np.zeros((0, 2)))
        with pytest.raises(EmptySample):
            risk(ws, [0, 0, 0], EPA)

    def test_wrong_length(self):
        with pytest.raises(DimensionMismatch):
            risk(one_unit(), [0.0, 0.0, 0.0], EPA)

    @pytest.mark.parametrize("kernel", list(KernelKind))
    def test_gradient_matches_central_differences(self, kernel):
        rng = np.random.default_rng(7)
        ws = random_sample(rng)
        sl = SmoothedLoss(kernel, 0.4)
        for _ in range(5):
            b = rng.normal(size=4)
            g = risk_gradient(ws, b, sl)
            fd = np.array([(risk(ws, b + 1e-5 * e, sl) - risk(ws, b - 1e-5 * e, sl)) / 2e-5
                           for e in np.eye(4)])
            np.testing.assert_allclose(g, fd, atol=1e-6)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(8)
        ws = random_sample(rng)
        perm = rng.permutation(ws.n)
        shuffled = WeightedSample(ws.weights[perm], ws.labels[perm], ws.covariates[perm])
        b = rng.normal(size=4)
        assert risk(shuffled, b, EPA) == pytest.approx(risk(ws, b, EPA), rel=1e-14)

    def test_weight_scaling(self):
        rng = np.random.default_rng(9)
        ws = random_sample(rng)
        scaled = WeightedSample(4.0 * ws.weights, ws.labels, ws.covariates)
        b = rng.normal(size=4)
        assert risk(scaled, b, EPA) == 4.0 * risk(ws, b, EPA)
        np.testing.assert_array_equal(risk_gradient(scaled, b, EPA), 4.0 * risk_gradient(ws, b, EPA))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.01, 0.99))
    def test_convex(self, seed, theta):
        rng = np.random.default_rng(seed)
        ws = random_sample(rng, n=30, p=2)
        a, b = rng.normal(size=3) * 2, rng.normal(size=3) * 2
        mix = risk(ws, theta * a + (1 - theta) * b, EPA)
        assert mix <= theta * risk(ws, a, EPA) + (1 - theta) * risk(ws, b, EPA) + 1e-10


class TestPenalty:
    def test_lambda_zero(self):
        rng = np.random.default_rng(1)
        ws, b = random_sample(rng), rng.normal(size=4)
        assert penalized_objective(ws, b, EPA, 0.0) == risk(ws, b, EPA)

    def test_zero_slopes(self):
        rng = np.random.default_rng(2)
        ws = random_sample(rng)
        assert penalized_objective(ws, [0.7, 0, 0, 0], EPA, 5.0) == risk(ws, [0.7, 0, 0, 0], EPA)

    def test_hand_arithmetic(self):
        # one unit with margin 0 has risk 1 (weight 1)
        ws = WeightedSample(np.array([1.0]), np.array([1.0]), np.array([[0.0, 0.0]]))
        assert penalized_objective(ws, [0.0, 1.0, 2.0], EPA, 0.1) == pytest.approx(1.5)

    def test_intercept_not_penalized(self):
        assert penalty([10.0, 0.0], 1.0) == 0.0
        rng = np.random.default_rng(3)
        ws, b = random_sample(rng), rng.normal(size=4)
        diff = penalized_gradient(ws, b, EPA, 0.3) - risk_gradient(ws, b, EPA)
        np.testing.assert_allclose(diff, np.r_[0.0, 0.6 * b[1:]], atol=1e-15)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            penalized_objective(one_unit(), [0.0, 0.0], EPA, -1.0)


class TestSurrogate:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.central = random_sample(rng, n=60)
        self.pooled = WeightedSample.concat([self.central, random_sample(rng, n=240)])
        self.anchor = rng.normal(size=4)
        self.beta = rng.normal(size=4)
        self.sl_h, self.sl_b = SmoothedLoss(h=0.3), SmoothedLoss(h=0.6)

    def test_zero_shift_is_penalized_objective(self):
        got = surrogate_objective(self.central, self.beta, self.sl_b, np.zeros(4), self.anchor, 0.1)
        assert got == penalized_objective(self.central, self.beta, self.sl_b, 0.1)

    def test_at_anchor_inner_product_vanishes(self):
        shift = np.arange(4.0)
        got = surrogate_objective(self.central, self.anchor, self.sl_b, shift, self.anchor, 0.1)
        assert got == penalized_objective(self.central, self.anchor, self.sl_b, 0.1)

    def test_gradient_at_anchor_is_global_gradient(self):
        g_global = risk_gradient(self.pooled, self.anchor, self.sl_h)
        shift = surrogate_shift(self.central, self.anchor, self.sl_b, g_global)
        got = surrogate_gradient(self.central, self.anchor, self.sl_b, shift, 0.2)
        want = penalized_gradient(self.pooled, self.anchor, self.sl_h, 0.2)
        np.testing.assert_allclose(got, want, atol=1e-15)

    def test_single_site_same_bandwidth_everywhere(self):
        g = risk_gradient(self.central, self.anchor, self.sl_h)
        shift = surrogate_shift(self.central, self.anchor, self.sl_h, g)
        np.testing.assert_array_equal(shift, 0.0)
        np.testing.assert_allclose(surrogate_gradient(self.central, self.beta, self.sl_h, shift, 0.2),
                                   penalized_gradient(self.central, self.beta, self.sl_h, 0.2))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            surrogate_objective(self.central, self.beta, self.sl_b, np.zeros(3), self.anchor, 0.1)
        with pytest.raises(DimensionMismatch):
            surrogate_shift(self.central, self.anchor, self.sl_b, np.zeros(5))
