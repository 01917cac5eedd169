import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drumscribe.loss import (
    AnnealState, anneal_c, aph_loss, mse_loss, pseudo_huber_loss, training_loss,
)
from drumscribe.tensor import ShapeError, Tensor


def t(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


class TestMse:
    def test_zero_on_identical(self):
        x = t(np.random.default_rng(0).standard_normal((4, 3, 2)))
        assert float(mse_loss(x, x).data) == 0.0

    def test_unit_difference(self):
        assert float(mse_loss(t(np.zeros((5, 2))), t(np.ones((5, 2)))).data) == 1.0

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((10, 7, 2)), rng.standard_normal((10, 7, 2))
        # independent two-pass summation: accumulate then divide
        total = 0.0
        for ai, bi in zip(a.ravel(), b.ravel()):
            total += (ai - bi) ** 2
        assert float(mse_loss(t(a), t(b)).data) == pytest.approx(total / a.size, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(t(np.zeros((2, 2))), t(np.zeros((2, 3))))


class TestAnneal:
    def test_endpoints(self):
        assert anneal_c(AnnealState(alpha=0.0)) == 1.0
        assert anneal_c(AnnealState(alpha=1.0)) == 1e-4

    def test_midpoint(self):
        assert anneal_c(AnnealState(alpha=0.5)) == pytest.approx((1.0 + 1e-4) / 2)

    def test_monotone_non_increasing(self):
        values = [anneal_c(AnnealState(alpha=a)) for a in np.linspace(0, 1, 50)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_invalid_alpha(self):
        with pytest.raises(ValueError):
            AnnealState(alpha=1.5)

    def test_invalid_c_order(self):
        with pytest.raises(ValueError):
            AnnealState(alpha=0.0, c_max=1e-4, c_min=1.0)


class TestPseudoHuber:
    def test_zero_residual_zero_contribution(self):
        x = t(np.full((3, 3), 0.7))
        assert float(aph_loss(x, x, c=2.0).data) == pytest.approx(0.0, abs=1e-12)

    def test_three_four_five(self):
        out = aph_loss(t([[3.0]]), t([[0.0]]), c=4.0)
        assert float(out.data) == pytest.approx(1.0)

    def test_small_residual_taylor(self):
        rng = np.random.default_rng(2)
        r = rng.uniform(-1e-3, 1e-3, size=1000)
        loss = float(aph_loss(t(r), t(np.zeros_like(r)), c=1.0).data)
        taylor = np.mean(r ** 2) / 2.0
        assert loss == pytest.approx(taylor, rel=0.01)

    def test_rejects_nonpositive_c(self):
        with pytest.raises(ValueError):
            aph_loss(t([1.0]), t([0.0]), c=0.0)

    def test_global_norm_variant(self):
        r = np.array([3.0, 4.0])
        out = pseudo_huber_loss(t(r), t(np.zeros(2)), c=1.0, norm="global")
        assert float(out.data) == pytest.approx(np.sqrt(25.0 + 1.0) - 1.0)

    def test_mse_limit_large_c(self):
        # c -> inf: 2c * PH -> mean of r^2
        rng = np.random.default_rng(3)
        r = rng.standard_normal(500)
        c = 1e3
        ph = float(aph_loss(t(r), t(np.zeros_like(r)), c=c).data)
        assert 2 * c * ph == pytest.approx(np.mean(r ** 2), rel=0.01)

    def test_mae_limit_small_c(self):
        rng = np.random.default_rng(4)
        r = rng.standard_normal(500)
        ph = float(aph_loss(t(r), t(np.zeros_like(r)), c=1e-6).data)
        assert ph == pytest.approx(np.mean(np.abs(r)), rel=0.01)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20),
           st.floats(1e-3, 10.0))
    def test_nonnegative_and_zero_iff_equal(self, residuals, c):
        r = np.array(residuals)
        value = float(aph_loss(t(r), t(np.zeros_like(r)), c=c).data)
        assert value >= 0.0
        # strict positivity only when a residual is resolvable against c
        if np.max(np.abs(r)) > 1e-6 * c:
            assert value > 0.0

    def test_strictly_increasing_in_abs_residual(self):
        c = 0.5
        values = [float(aph_loss(t([r]), t([0.0]), c=c).data)
                  for r in np.linspace(0, 5, 40)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = np.asarray(rng.standard_normal(20))
        x_hat = Tensor(rng.standard_normal(20), requires_grad=True)
        aph_loss(t(x), x_hat, c=0.3).backward()
        h = 1e-5
        for i in range(20):
            orig = x_hat.data[i]
            x_hat.data[i] = orig + h
            hi = float(aph_loss(t(x), Tensor(x_hat.data), c=0.3).data)
            x_hat.data[i] = orig - h
            lo = float(aph_loss(t(x), Tensor(x_hat.data), c=0.3).data)
            x_hat.data[i] = orig
            fd = (hi - lo) / (2 * h)
            assert x_hat.grad[i] == pytest.approx(fd, rel=1e-4, abs=1e-8)


class TestTrainingLoss:
    def test_zero_on_identical_for_all_objectives(self):
        x = t(np.random.default_rng(6).standard_normal((5, 7, 2)))
        state = AnnealState(alpha=0.3)
        for objective in ("mse", "ph", "aph"):
            assert float(training_loss(x, x, objective, state).data) == pytest.approx(0.0, abs=1e-12)

    def test_aph_at_alpha_zero_matches_half_mse_for_small_residuals(self):
        rng = np.random.default_rng(7)
        r = rng.uniform(-1e-4, 1e-4, size=(50,))
        x, x_hat = t(r), t(np.zeros_like(r))
        state = AnnealState(alpha=0.0)  # c = 1
        aph = float(training_loss(x, x_hat, "aph", state).data)
        mse = float(training_loss(x, x_hat, "mse", state).data)
        assert aph * 2.0 / mse == pytest.approx(1.0, rel=1e-3)

    def test_aph_at_alpha_one_matches_mae_for_large_residuals(self):
        rng = np.random.default_rng(8)
        r = rng.uniform(1.0, 5.0, size=(100,)) * rng.choice([-1, 1], size=100)
        x, x_hat = t(r), t(np.zeros_like(r))
        state = AnnealState(alpha=1.0)  # c = 1e-4
        aph = float(training_loss(x, x_hat, "aph", state).data)
        assert abs(aph - np.mean(np.abs(r))) < 1e-4

    def test_ph_uses_fixed_c(self):
        x, x_hat = t([[3.0]]), t([[0.0]])
        out = training_loss(x, x_hat, "ph", AnnealState(alpha=1.0))
        assert float(out.data) == pytest.approx(np.sqrt(10.0) - 1.0)

    def test_unknown_objective(self):
        with pytest.raises(ValueError):
            training_loss(t([0.0]), t([0.0]), "huber", AnnealState())
