import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smoothitr.smoothing import KernelKind, SmoothedLoss, hinge, lipschitz_constant
from oracles import quad_kernel_mass, quad_smoothed_hinge

KERNELS = list(KernelKind)
kernels = st.sampled_from(KERNELS)
bandwidths = st.floats(0.01, 2.0)
margins = st.floats(-3.0, 3.0)


@pytest.mark.parametrize("kernel", KERNELS)
def test_kernel_is_symmetric_density(kernel):
    u = np.linspace(-3, 3, 601)
    np.testing.assert_array_equal(kernel.pdf(u), kernel.pdf(-u))
    assert np.all(kernel.pdf(u) >= 0)
    assert quad_kernel_mass(kernel.value) == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("kernel", [KernelKind.EPANECHNIKOV, KernelKind.UNIFORM])
def test_bounded_kernels_vanish_outside_unit_interval(kernel):
    assert kernel.pdf(1.0001) == 0.0 and kernel.pdf(-1.0001) == 0.0


@pytest.mark.parametrize("h", [0.0, -1.0, float("nan")])
def test_bandwidth_must_be_positive(h):
    with pytest.raises(ValueError):
        SmoothedLoss(KernelKind.EPANECHNIKOV, h)


class TestLossExamples:
    epa = SmoothedLoss(KernelKind.EPANECHNIKOV, 0.5)

    def test_outside_window_is_zero(self):
        assert self.epa.loss(1.5) == 0.0

    def test_linear_regime_is_hinge(self):
        assert self.epa.loss(0.5) == 0.5

    def test_epanechnikov_at_kink(self):
        expected = quad_smoothed_hinge("epanechnikov", 0.5, 1.0)
        assert expected == pytest.approx(0.09375, abs=1e-10)
        assert self.epa.loss(1.0) == pytest.approx(0.09375, abs=1e-15)

    def test_uniform_at_kink(self):
        expected = quad_smoothed_hinge("uniform", 0.4, 1.0)
        assert expected == pytest.approx(0.1, abs=1e-10)
        assert SmoothedLoss(KernelKind.UNIFORM, 0.4).loss(1.0) == pytest.approx(0.1, abs=1e-15)

    def test_loss_is_vectorised(self):
        out = self.epa.loss(np.array([0.5, 1.0, 1.5]))
        np.testing.assert_allclose(out, [0.5, 0.09375, 0.0])


class TestDerivativeExamples:
    @pytest.mark.parametrize("kernel", KERNELS)
    @pytest.mark.parametrize("h", [0.1, 0.5, 2.0])
    def test_half_mass_at_one(self, kernel, h):
        assert SmoothedLoss(kernel, h).deriv(1.0) == pytest.approx(-0.5, abs=1e-15)

    @pytest.mark.parametrize("t", [0.5, 0.0, -3.0])
    def test_full_mass(self, t):
        assert SmoothedLoss(KernelKind.EPANECHNIKOV, 0.5).deriv(t) == -1.0

    def test_epanechnikov_cdf_value(self):
        # -F(1/2) with F the Epanechnikov CDF; cross-checked by quadrature of K
        from oracles import adaptive_simpson, KERNELS as QK
        expected = -adaptive_simpson(QK["epanechnikov"], -1.0, 0.5, 1e-12)
        assert expected == pytest.approx(-0.84375, abs=1e-10)
        assert SmoothedLoss(KernelKind.EPANECHNIKOV, 0.5).deriv(0.75) == pytest.approx(-0.84375, abs=1e-15)

    def test_second_derivative_examples(self):
        epa = SmoothedLoss(KernelKind.EPANECHNIKOV, 0.5)
        assert epa.second_deriv(1.0) == pytest.approx(1.5)
        assert epa.second_deriv(2.0) == 0.0
        assert SmoothedLoss(KernelKind.GAUSSIAN, 1.0).second_deriv(1.0) == pytest.approx(0.3989422804, abs=1e-10)


class TestLipschitz:
    @pytest.mark.parametrize("kernel,h,expected", [
        (KernelKind.EPANECHNIKOV, 0.25, 3.0),
        (KernelKind.UNIFORM, 0.5, 1.0),
        (KernelKind.EPANECHNIKOV, 1.0, 0.75),
        (KernelKind.GAUSSIAN, 1.0, 1 / np.sqrt(2 * np.pi)),
    ])
    def test_constants(self, kernel, h, expected):
        assert lipschitz_constant(SmoothedLoss(kernel, h)) == pytest.approx(expected, rel=1e-15)

    @settings(max_examples=300, deadline=None)
    @given(kernels, bandwidths, margins, margins)
    def test_derivative_is_lipschitz(self, kernel, h, t1, t2):
        sl = SmoothedLoss(kernel, h)
        gap = abs(sl.deriv(t1) - sl.deriv(t2))
        assert gap <= sl.lipschitz_constant() * abs(t1 - t2) + 1e-12

    @settings(max_examples=300, deadline=None)
    @given(kernels, bandwidths, margins, margins)
    def test_quadratic_majorization(self, kernel, h, u1, u2):
        sl = SmoothedLoss(kernel, h)
        bound = sl.loss(u2) + sl.deriv(u2) * (u1 - u2) + sl.lipschitz_constant() * (u1 - u2) ** 2 / 2
        assert sl.loss(u1) <= bound + 1e-12


class TestProperties:
    @settings(max_examples=300, deadline=None)
    @given(kernels, bandwidths, margins)
    def test_smoothing_bias_at_most_half_bandwidth(self, kernel, h, t):
        sl = SmoothedLoss(kernel, h)
        assert abs(sl.loss(t) - hinge(t)) <= h / 2 + 1e-15
        assert sl.loss(t) >= 0

    @settings(max_examples=200, deadline=None)
    @given(kernels, bandwidths, margins, margins)
    def test_convexity(self, kernel, h, t1, t2):
        sl = SmoothedLoss(kernel, h)
        assert sl.second_deriv(t1) >= 0
        lo, hi = sorted((t1, t2))
        assert sl.deriv(lo) <= sl.deriv(hi)
        assert -1.0 <= sl.deriv(t1) <= 0.0

    @pytest.mark.parametrize("kernel", KERNELS)
    def test_finite_differences(self, kernel):
        rng = np.random.default_rng(11)
        h = rng.uniform(0.01, 2.0, 1000)
        t = rng.uniform(-3.0, 3.0, 1000)
        step = 1e-6
        for hi, ti in zip(h, t):
            sl = SmoothedLoss(kernel, hi)
            fd = (sl.loss(ti + step) - sl.loss(ti - step)) / (2 * step)
            assert fd == pytest.approx(sl.deriv(ti), abs=1e-6)
            s = (1 - ti) / hi
            if kernel.bounded and abs(abs(s) - 1) * hi < 1e-5:
                continue
            fd2 = (sl.deriv(ti + step) - sl.deriv(ti - step)) / (2 * step)
            assert fd2 == pytest.approx(sl.second_deriv(ti), abs=1e-6)

    @pytest.mark.parametrize("kernel", KERNELS)
    @pytest.mark.parametrize("h", [1e-1, 1e-3, 1e-5])
    def test_vanishing_bandwidth_recovers_hinge(self, kernel, h):
        t = np.linspace(-2, 3, 101)
        np.testing.assert_allclose(SmoothedLoss(kernel, h).loss(t), hinge(t), atol=h / 2 + 1e-15)

    def test_matches_quadrature_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            kernel = KERNELS[rng.integers(3)]
            h, t = rng.uniform(0.01, 2.0), rng.uniform(-3, 3)
            assert SmoothedLoss(kernel, h).loss(t) == pytest.approx(
                quad_smoothed_hinge(kernel.value, h, t), abs=1e-8)
