import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drumscribe.diffusion import (
    DiffusionConfig, DiffusionError, add_noise, precond_coeffs, precondition,
    refine, sample, sample_training_sigma, sigma_schedule,
)


def schedule_oracle(sigma_min, sigma_max, rho, n):
    """Independent elementwise evaluation of the sampling-noise formula."""
    out = []
    for i in range(n):
        lo = sigma_min ** (1.0 / rho)
        hi = sigma_max ** (1.0 / rho)
        out.append((hi + i / (n - 1) * (lo - hi)) ** rho)
    return np.array(out)


class TestConfig:
    def test_rejects_bad_bounds(self):
        with pytest.raises(DiffusionError):
            DiffusionConfig(sigma_min=1.0, sigma_max=0.5)

    def test_rejects_nonpositive_rho(self):
        with pytest.raises(DiffusionError):
            DiffusionConfig(rho=0.0)


class TestTrainingSigma:
    def test_degenerate_std(self):
        cfg = DiffusionConfig(p_mean=-1.2, p_std=0.0)
        rng = np.random.default_rng(0)
        draws = [sample_training_sigma(cfg, rng) for _ in range(50)]
        assert np.allclose(draws, np.exp(-1.2))

    def test_lognormal_mean_monte_carlo(self):
        cfg = DiffusionConfig()
        rng = np.random.default_rng(1)
        draws = np.array([sample_training_sigma(cfg, rng) for _ in range(100_000)])
        assert abs(np.log(draws).mean() - (-1.2)) < 0.02
        assert np.all(draws > 0)


class TestSchedule:
    def test_endpoints_exact(self):
        cfg = DiffusionConfig()
        sigmas = sigma_schedule(cfg, 10)
        assert sigmas[0] == pytest.approx(cfg.sigma_max, rel=1e-15)
        assert sigmas[-1] == pytest.approx(cfg.sigma_min, rel=1e-15)

    def test_rho_one_is_linear(self):
        cfg = DiffusionConfig(rho=1.0)
        sigmas = sigma_schedule(cfg, 5)
        assert np.allclose(sigmas, np.linspace(cfg.sigma_max, cfg.sigma_min, 5))

    def test_matches_independent_oracle(self):
        cfg = DiffusionConfig(sigma_max=80.0, sigma_min=0.002, rho=7.0)
        sigmas = sigma_schedule(cfg, 10)
        expected = schedule_oracle(0.002, 80.0, 7.0, 10)
        assert np.allclose(sigmas, expected, rtol=1e-12)

    def test_rejects_single_step(self):
        with pytest.raises(DiffusionError):
            sigma_schedule(DiffusionConfig(), 1)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1e-4, 0.5), st.floats(1.0, 200.0), st.floats(0.5, 10.0),
           st.integers(2, 50))
    def test_strictly_decreasing_property(self, sigma_min, sigma_max, rho, n):
        cfg = DiffusionConfig(sigma_min=sigma_min, sigma_max=sigma_max, rho=rho)
        sigmas = sigma_schedule(cfg, n)
        assert np.all(np.diff(sigmas) < 0)


class TestPreconditioning:
    def test_c_skip_half_at_sigma_data(self):
        cfg = DiffusionConfig()
        c_skip, _, _, _ = precond_coeffs(cfg, cfg.sigma_data)
        assert c_skip == pytest.approx(0.5)

    def test_c_in_identity(self):
        cfg = DiffusionConfig()
        rng = np.random.default_rng(2)
        for sigma in np.exp(rng.uniform(-6, 5, size=10_000)):
            _, _, c_in, _ = precond_coeffs(cfg, sigma)
            assert abs(c_in ** 2 * (sigma ** 2 + cfg.sigma_data ** 2) - 1.0) < 1e-6

    def test_low_sigma_passthrough(self):
        cfg = DiffusionConfig()
        x = np.random.default_rng(3).standard_normal((8, 3, 2))
        out = precondition(lambda xi, cn, cond: np.ones_like(xi), x, 1e-6, None, cfg)
        assert np.allclose(out, x, atol=1e-5)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(DiffusionError):
            precond_coeffs(DiffusionConfig(), 0.0)

    def test_c_noise_is_quarter_log(self):
        _, _, _, c_noise = precond_coeffs(DiffusionConfig(), 2.0)
        assert c_noise == pytest.approx(np.log(2.0) / 4.0)


class TestAddNoise:
    def test_zero_sigma_identity(self):
        x = np.random.default_rng(4).standard_normal((5, 7, 2))
        out = add_noise(x, 0.0, np.random.default_rng(5))
        assert np.array_equal(out, x)

    def test_empirical_variance(self):
        x = np.zeros(100_000)
        sigma = 0.7
        out = add_noise(x, sigma, np.random.default_rng(6))
        assert np.var(out - x) == pytest.approx(sigma ** 2, rel=0.02)

    def test_shape_preserved(self):
        x = np.zeros((3, 4, 2))
        assert add_noise(x, 1.0, np.random.default_rng(7)).shape == x.shape


class CountingDenoiser:
    """Oracle denoiser returning a fixed clean grid; counts evaluations."""

    def __init__(self, grid):
        self.grid = grid
        self.calls = 0
        self.sigmas = []

    def __call__(self, x, sigma, cond):
        self.calls += 1
        self.sigmas.append(sigma)
        return self.grid.copy()


class TestSampler:
    def setup_method(self):
        self.cfg = DiffusionConfig()
        self.grid = np.clip(np.random.default_rng(8).standard_normal((20, 7, 2)), -1, 1)

    def test_one_step_single_call_no_renoise(self):
        den = CountingDenoiser(self.grid)
        out = sample(den, None, 1, np.random.default_rng(9), self.cfg, self.grid.shape)
        assert den.calls == 1
        assert den.sigmas == [self.cfg.sigma_max]
        assert np.allclose(out, self.grid)

    def test_perfect_denoiser_fixed_point(self):
        for n_steps in (1, 2, 5, 10):
            for seed in (0, 1, 2):
                den = CountingDenoiser(self.grid)
                out = sample(den, None, n_steps, np.random.default_rng(seed),
                             self.cfg, self.grid.shape)
                assert np.allclose(out, self.grid)

    def test_trajectory_sigmas_match_schedule(self):
        den = CountingDenoiser(self.grid)
        sample(den, None, 7, np.random.default_rng(10), self.cfg, self.grid.shape)
        assert np.allclose(den.sigmas, sigma_schedule(self.cfg, 7))

    def test_zero_network_norm_decreases(self):
        # raw net 0 means each denoise shrinks x by c_skip; the iterate norm
        # must fall monotonically down the ladder
        norms = []

        def denoiser(x, sigma, cond):
            norms.append(np.linalg.norm(x))
            return precondition(lambda xi, cn, c: np.zeros_like(xi), x, sigma, cond, self.cfg)

        sample(denoiser, None, 8, np.random.default_rng(11), self.cfg, (50, 7, 2))
        assert all(b < a for a, b in zip(norms, norms[1:]))

    def test_rejects_zero_steps(self):
        with pytest.raises(DiffusionError):
            sample(CountingDenoiser(self.grid), None, 0, np.random.default_rng(0),
                   self.cfg, self.grid.shape)

    def test_determinism(self):
        den = CountingDenoiser(self.grid)
        a = sample(den, None, 5, np.random.default_rng(12), self.cfg, self.grid.shape)
        b = sample(den, None, 5, np.random.default_rng(12), self.cfg, self.grid.shape)
        assert np.array_equal(a, b)


class TestRefine:
    def setup_method(self):
        self.cfg = DiffusionConfig()
        self.grid = np.clip(np.random.default_rng(13).standard_normal((20, 7, 2)), -1, 1)

    def test_perfect_denoiser_returns_oracle(self):
        den = CountingDenoiser(self.grid)
        start = np.zeros_like(self.grid)
        out = refine(start, den, None, self.cfg.sigma_min * 1.5, 10,
                     np.random.default_rng(14), self.cfg)
        assert np.allclose(out, self.grid)

    def test_output_shape(self):
        den = CountingDenoiser(self.grid)
        out = refine(self.grid, den, None, 1.0, 10, np.random.default_rng(15), self.cfg)
        assert out.shape == self.grid.shape

    def test_tail_is_schedule_suffix(self):
        den = CountingDenoiser(self.grid)
        refine(self.grid, den, None, 2.5, 10, np.random.default_rng(16), self.cfg)
        full = sigma_schedule(self.cfg, 10)
        expected = full[full <= 2.5]
        assert np.allclose(den.sigmas, expected)

    def test_rejects_out_of_range_restart(self):
        den = CountingDenoiser(self.grid)
        for bad in (0.0, self.cfg.sigma_min, self.cfg.sigma_max * 2):
            with pytest.raises(DiffusionError):
                refine(self.grid, den, None, bad, 10, np.random.default_rng(0), self.cfg)


def test_euler_variant_perfect_denoiser():
    cfg = DiffusionConfig()
    grid = np.clip(np.random.default_rng(17).standard_normal((10, 7, 2)), -1, 1)
    den = CountingDenoiser(grid)
    out = sample(den, None, 6, np.random.default_rng(18), cfg, grid.shape,
                 method="euler")
    # final denoise at sigma_min returns the oracle grid exactly
    assert np.allclose(out, grid)
