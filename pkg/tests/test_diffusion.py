import numpy as np
import pytest
import torch

from slamdimm.diffusion import (
    build_linear_schedule,
    forward_sample,
    forward_step,
    predict_z0,
    refine_latent,
    reverse_step,
)

from conftest import seeded

SCHED = build_linear_schedule()

# Regression constant for the default schedule's final signal retention,
# frozen from an extended-precision cumulative product (np.longdouble).
ALPHA_BAR_T_DEFAULT = 4.0358297653756736e-05


class TestSchedule:
    def test_endpoints(self):
        assert float(SCHED.beta[0]) == pytest.approx(1e-4, abs=0.0)
        assert float(SCHED.beta[-1]) == pytest.approx(2e-2, abs=0.0)
        assert float(SCHED.alpha[0]) == pytest.approx(0.9999)

    def test_linear_spacing(self):
        t = np.arange(1, 1001)
        expected = 1e-4 + (t - 1) / 999 * (2e-2 - 1e-4)
        assert np.allclose(SCHED.beta.numpy(), expected, rtol=0, atol=1e-15)

    def test_alpha_bar_against_longdouble_oracle(self):
        beta = np.linspace(1e-4, 2e-2, 1000).astype(np.longdouble)
        oracle = np.cumprod(1 - beta)
        assert float(SCHED.alpha_bar[-1]) == pytest.approx(float(oracle[-1]), rel=1e-10)
        assert float(SCHED.alpha_bar[-1]) == pytest.approx(ALPHA_BAR_T_DEFAULT, rel=1e-12)
        assert np.allclose(SCHED.alpha_bar.numpy(), oracle.astype(np.float64), rtol=1e-12)

    def test_alpha_bar_monotone_and_small_at_T(self):
        ab = SCHED.alpha_bar.numpy()
        assert np.all(np.diff(ab) < 0)
        assert ab[-1] < 0.05

    def test_recurrence(self):
        ab = SCHED.alpha_bar.numpy()
        a = SCHED.alpha.numpy()
        assert np.allclose(ab[1:], ab[:-1] * a[1:], rtol=1e-12)

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            build_linear_schedule(1000, 2e-2, 1e-4)
        with pytest.raises(ValueError):
            build_linear_schedule(1, 1e-4, 2e-2)
        with pytest.raises(ValueError):
            build_linear_schedule(10, 0.0, 0.5)

    def test_posterior_variance_zero_at_first_step(self):
        assert SCHED.posterior_variance(1) == 0.0
        assert SCHED.posterior_variance(2) > 0.0


class TestForwardSample:
    def test_moments_from_zero_latent(self):
        # z0 = 0: z_t is pure noise scaled by sqrt(1 - alpha_bar_t)
        n = 200_000
        z0 = torch.zeros(n, dtype=torch.float64)
        for t in (1, 10, 500, 1000):
            zt, _ = forward_sample(z0, t, SCHED, seeded(t))
            want_var = 1.0 - float(SCHED.alpha_bar[t - 1])
            assert abs(float(zt.mean())) < 0.02 * np.sqrt(want_var)
            assert float(zt.var()) == pytest.approx(want_var, rel=0.02)

    def test_pure_noise_at_T(self):
        g = seeded(3)
        z0 = torch.randn(64, 64, generator=g, dtype=torch.float64)
        zt, _ = forward_sample(z0, 1000, SCHED, g)
        corr = np.corrcoef(zt.numpy().ravel(), z0.numpy().ravel())[0, 1]
        assert abs(corr) < 0.05

    def test_bitwise_reproducible(self):
        z0 = torch.randn(4, 8, 8, generator=seeded(0))
        a, ea = forward_sample(z0, 77, SCHED, seeded(9))
        b, eb = forward_sample(z0, 77, SCHED, seeded(9))
        assert torch.equal(a, b) and torch.equal(ea, eb)

    def test_step_range(self):
        z0 = torch.zeros(2, 2)
        with pytest.raises(ValueError):
            forward_sample(z0, 0, SCHED)
        with pytest.raises(ValueError):
            forward_sample(z0, 1001, SCHED)


class TestForwardStep:
    @pytest.mark.parametrize("t", [1, 10, 500])
    def test_composition_matches_closed_form(self, t):
        # chaining single Markov steps 1..t must reproduce the closed-form
        # marginal's moments
        n = 100_000
        g = seeded(100 + t)
        z = torch.full((n,), 0.8, dtype=torch.float64)
        for step in range(1, t + 1):
            z = forward_step(z, step, SCHED, g)
        closed, _ = forward_sample(torch.full((n,), 0.8, dtype=torch.float64), t, SCHED, seeded(7))
        want_var = 1.0 - float(SCHED.alpha_bar[t - 1])
        assert float(z.var()) == pytest.approx(want_var, rel=0.02)
        assert float(closed.var()) == pytest.approx(want_var, rel=0.02)
        assert abs(float(z.mean()) - float(closed.mean())) < 0.02 * max(1.0, abs(float(closed.mean())))

    def test_tiny_beta_is_identity(self):
        sched = build_linear_schedule(10, 1e-12, 2e-12)
        z = torch.randn(16, 16, generator=seeded(1), dtype=torch.float64)
        out = forward_step(z, 5, sched, seeded(2))
        assert float((out - z).abs().max()) < 1e-5

    def test_first_step_matches_forward_sample_distribution(self):
        n = 100_000
        z0 = torch.full((n,), 0.3, dtype=torch.float64)
        a = forward_step(z0, 1, SCHED, seeded(11))
        b, _ = forward_sample(z0, 1, SCHED, seeded(12))
        assert float(a.mean()) == pytest.approx(float(b.mean()), abs=1e-3)
        assert float(a.var()) == pytest.approx(float(b.var()), rel=0.05)


class TestPredictZ0:
    @pytest.mark.parametrize("t", [1, 10, 100, 500, 1000])
    def test_inverts_forward_sample(self, t):
        z0 = torch.randn(4, 8, 8, generator=seeded(t), dtype=torch.float64)
        zt, eps = forward_sample(z0, t, SCHED, seeded(t + 1))
        rec = predict_z0(zt, eps, t, SCHED)
        rel = float((rec - z0).norm() / z0.norm())
        assert rel <= 1e-5

    def test_zero_eps_hat(self):
        zt = torch.randn(3, 3, generator=seeded(0))
        out = predict_z0(zt, torch.zeros_like(zt), 10, SCHED)
        abar = float(SCHED.alpha_bar[9])
        assert torch.allclose(out, zt / np.sqrt(abar))

    def test_formula_at_t1(self):
        # at t=1, alpha_bar = 1 - beta_1, so the inversion reduces to
        # (zt - sqrt(beta_1) eps) / sqrt(1 - beta_1)
        zt = torch.randn(5, 5, generator=seeded(4), dtype=torch.float64)
        eps_hat = torch.randn(5, 5, generator=seeded(5), dtype=torch.float64)
        beta1 = float(SCHED.beta[0])
        want = (zt - np.sqrt(beta1) * eps_hat) / np.sqrt(1 - beta1)
        assert torch.allclose(predict_z0(zt, eps_hat, 1, SCHED), want)


def oracle_denoiser(z0):
    """Returns the exact noise consistent with the current state and z0."""

    def denoise(zt, t):
        abar = float(SCHED.alpha_bar[t - 1])
        return (zt - np.sqrt(abar) * z0) / np.sqrt(1.0 - abar)

    return denoise


class TestReverseStep:
    def test_closed_loop_recovers_z0(self):
        z0 = torch.randn(4, 8, 8, generator=seeded(21), dtype=torch.float64)
        g = seeded(22)
        zt, _ = forward_sample(z0, 500, SCHED, g)
        for t in range(500, 0, -1):
            zt = reverse_step(zt, t, oracle_denoiser(z0), SCHED, g)
        assert float((zt - z0).norm() / z0.norm()) < 0.05

    def test_final_step_deterministic(self):
        z1 = torch.randn(2, 4, 4, generator=seeded(30), dtype=torch.float64)
        a = reverse_step(z1, 1, oracle_denoiser(torch.zeros_like(z1)), SCHED, seeded(1))
        b = reverse_step(z1, 1, oracle_denoiser(torch.zeros_like(z1)), SCHED, seeded(2))
        assert torch.equal(a, b)

    def test_reproducible_trajectory(self):
        z0 = torch.randn(2, 4, 4, generator=seeded(31), dtype=torch.float64)
        den = oracle_denoiser(z0)

        def run(seed):
            g = seeded(seed)
            zt, _ = forward_sample(z0, 50, SCHED, g)
            for t in range(50, 0, -1):
                zt = reverse_step(zt, t, den, SCHED, g)
            return zt

        assert torch.equal(run(77), run(77))


class TestRefineLatent:
    def test_t0_is_identity(self):
        z = torch.randn(3, 6, 6, generator=seeded(40))
        out = refine_latent(z, oracle_denoiser(z), SCHED, t_test=0, rng=seeded(1))
        assert out is z

    def test_oracle_round_trip(self):
        z = torch.randn(4, 8, 8, generator=seeded(41), dtype=torch.float64)
        out = refine_latent(z, oracle_denoiser(z), SCHED, t_test=500, rng=seeded(42))
        assert float((out - z).norm() / z.norm()) < 0.05

    def test_single_step_mode(self):
        z = torch.randn(4, 8, 8, generator=seeded(43), dtype=torch.float64)
        out = refine_latent(
            z, oracle_denoiser(z), SCHED, t_test=500, rng=seeded(44), single_step=True
        )
        # with the exact noise, the one-shot inversion is exact
        assert float((out - z).norm() / z.norm()) < 1e-10
