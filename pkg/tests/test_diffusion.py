import math

import numpy as np
import pytest
import torch

from cbctsim.diffusion import (DenoiserModel, DiffusionConfig, NoiseSchedule,
                               build_schedule, diffusion_loss, forward_noise,
                               load_denoiser, reverse_step, sample,
                               save_denoiser, training_step)

TINY = DiffusionConfig(widths=(8, 16), depth=2, emb_dim=16)


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    m = DenoiserModel(TINY)
    m.eval()
    return m


class TestSchedule:
    def test_default_construction(self):
        s = build_schedule()
        assert s.T == 1000 and s.delta == 0.999 and s.tau == 0.008
        assert s.beta.shape == (1000,) and s.gamma.shape == (1000,)

    def test_alpha_bar_zero_is_one(self):
        s = build_schedule(T=100)
        assert s.alpha_bar[0] == pytest.approx(1.0, abs=1e-15)
        assert s.gamma_at(0) == 1.0

    def test_gamma_strictly_decreasing(self):
        s = build_schedule()
        assert np.all(np.diff(s.gamma) < 0)

    def test_beta_capped_at_delta(self):
        s = build_schedule()
        assert np.all(s.beta <= s.delta + 1e-15)
        assert np.all(s.beta > 0)

    def test_gamma_is_cumprod(self):
        s = build_schedule(T=500)
        assert np.allclose(s.gamma, np.cumprod(1.0 - s.beta), rtol=1e-14)

    def test_terminal_gamma_near_zero(self):
        # frozen from the T=1000 cosine schedule: gamma_T ~ 2.4e-9
        s = build_schedule()
        assert s.gamma[-1] < 1e-3
        assert s.gamma[-1] == pytest.approx(2.43e-9, rel=0.05)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            build_schedule(T=0)
        with pytest.raises(ValueError):
            build_schedule(delta=0.0)
        with pytest.raises(ValueError):
            build_schedule(tau=0.0)


class TestForwardNoise:
    def test_gamma_one_is_identity(self, rng):
        z0 = rng.normal(size=(4, 4))
        eps = rng.normal(size=(4, 4))
        assert np.allclose(forward_noise(z0, 1.0, eps), z0)

    def test_interpolation_formula(self, rng):
        z0 = rng.normal(size=(4, 4))
        eps = rng.normal(size=(4, 4))
        got = forward_noise(z0, 0.25, eps)
        assert np.allclose(got, 0.5 * z0 + math.sqrt(0.75) * eps)

    def test_variance_preserved(self):
        rng = np.random.default_rng(0)
        z0 = rng.normal(size=100_000)
        eps = rng.normal(size=100_000)
        zt = forward_noise(z0, 0.4, eps)
        assert zt.std() == pytest.approx(1.0, abs=0.02)

    def test_invalid_gamma(self, rng):
        z = rng.normal(size=(2, 2))
        with pytest.raises(ValueError):
            forward_noise(z, 0.0, z)
        with pytest.raises(ValueError):
            forward_noise(z, 1.5, z)


class TestModel:
    def test_output_shape(self, tiny_model):
        x = torch.zeros(3, 1, 16, 16)
        z = torch.zeros(3, 1, 16, 16)
        out = tiny_model(x, z, torch.full((3,), 0.5))
        assert out.shape == (3, 1, 16, 16)

    def test_depends_on_condition(self, tiny_model):
        z = torch.randn(1, 1, 16, 16, generator=torch.Generator().manual_seed(0))
        g = torch.full((1,), 0.5)
        a = tiny_model(torch.zeros(1, 1, 16, 16), z, g)
        b = tiny_model(torch.ones(1, 1, 16, 16), z, g)
        assert not torch.allclose(a, b)

    def test_depends_on_noise_level(self, tiny_model):
        z = torch.randn(1, 1, 16, 16, generator=torch.Generator().manual_seed(0))
        x = torch.zeros(1, 1, 16, 16)
        a = tiny_model(x, z, torch.full((1,), 0.9))
        b = tiny_model(x, z, torch.full((1,), 0.1))
        assert not torch.allclose(a, b)


class TestLoss:
    def test_loss_is_finite_scalar(self, tiny_model):
        sched = build_schedule(T=50)
        gen = torch.Generator().manual_seed(0)
        x = torch.zeros(2, 1, 16, 16)
        z0 = torch.zeros(2, 1, 16, 16)
        loss = diffusion_loss(tiny_model, x, z0, sched, gen)
        assert loss.ndim == 0 and torch.isfinite(loss)

    def test_rejects_unnormalized_latents(self, tiny_model):
        sched = build_schedule(T=50)
        gen = torch.Generator().manual_seed(0)
        big = torch.full((1, 1, 16, 16), 50.0)
        with pytest.raises(ValueError):
            diffusion_loss(tiny_model, big, big, sched, gen)

    def test_training_step_reduces_loss(self):
        torch.manual_seed(0)
        model = DenoiserModel(TINY)
        sched = build_schedule(T=50)
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        x = torch.zeros(4, 1, 16, 16)
        z0 = torch.zeros(4, 1, 16, 16)
        first = None
        for i in range(30):
            gen = torch.Generator().manual_seed(i % 3)
            loss = training_step(model, x, z0, sched, gen, opt)
            if first is None:
                first = loss
        gen = torch.Generator().manual_seed(0)
        final = diffusion_loss(model, x, z0, sched, gen).item()
        assert final < first

    def test_gradient_check(self):
        # analytic gradients vs central finite differences in float64
        torch.manual_seed(3)
        model = DenoiserModel(DiffusionConfig(widths=(4,), depth=1,
                                              emb_dim=8)).double()
        sched = build_schedule(T=10)
        x = torch.randn(1, 1, 8, 8, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(1))
        z0 = torch.randn(1, 1, 8, 8, dtype=torch.float64,
                         generator=torch.Generator().manual_seed(2))

        def loss_value():
            gen = torch.Generator().manual_seed(7)  # same (t, eps) every call
            return diffusion_loss(model, x, z0, sched, gen)

        loss = loss_value()
        model.zero_grad()
        loss.backward()

        rng = np.random.default_rng(0)
        params = [p for p in model.parameters() if p.grad is not None]
        h = 1e-6
        for p in rng.choice(len(params), size=5, replace=False):
            par = params[p]
            flat = par.data.view(-1)
            i = int(rng.integers(flat.numel()))
            orig = float(flat[i])
            flat[i] = orig + h
            lp = loss_value().item()
            flat[i] = orig - h
            lm = loss_value().item()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            an = float(par.grad.view(-1)[i])
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            assert rel < 1e-4


def oracle_sample(model, x, initial_noise, schedule, step_seed):
    """Independent reverse-chain oracle built from the posterior-mean form:
    mu = (sqrt(gamma_prev) * beta_t * z0_hat
          + sqrt(1 - beta_t) * (1 - gamma_prev) * z_t) / (1 - gamma_t)
    with z0_hat = (z_t - sqrt(1 - gamma_t) * eps_hat) / sqrt(gamma_t).
    Algebraically equal to the production update."""
    gen = torch.Generator().manual_seed(step_seed)
    z = initial_noise.clone().double()
    for t in range(schedule.T, 0, -1):
        noise = torch.randn(z.shape, generator=gen, dtype=initial_noise.dtype) \
            if t > 1 else None
        beta = float(schedule.beta[t - 1])
        gamma_t = schedule.gamma_at(t)
        gamma_prev = schedule.gamma_at(t - 1)
        with torch.no_grad():
            eps_hat = model(x, z.to(initial_noise.dtype),
                            torch.full((z.shape[0],), gamma_t,
                                       dtype=initial_noise.dtype)).double()
        z0_hat = (z - math.sqrt(1 - gamma_t) * eps_hat) / math.sqrt(gamma_t)
        z0_hat = z0_hat.clamp(-1.0, 1.0)
        mu = (math.sqrt(gamma_prev) * beta * z0_hat
              + math.sqrt(1 - beta) * (1 - gamma_prev) * z) / (1 - gamma_t)
        if t > 1:
            sigma = math.sqrt(beta * (1 - gamma_prev) / (1 - gamma_t))
            z = mu + sigma * noise.double()
        else:
            z = mu
    return z.to(initial_noise.dtype)


class TestSampler:
    def test_matches_posterior_mean_oracle(self):
        # float64 end to end: the two updates are algebraically identical,
        # so the residual must be at rounding level
        torch.manual_seed(0)
        model = DenoiserModel(TINY).double().eval()
        sched = build_schedule(T=25)
        gen = torch.Generator().manual_seed(11)
        x = 0.1 * torch.randn(1, 1, 16, 16, generator=gen, dtype=torch.float64)
        init = torch.randn(1, 1, 16, 16, generator=gen, dtype=torch.float64)
        ours = sample(model, x, init, sched, step_seed=4)
        ref = oracle_sample(model, x, init, sched, step_seed=4)
        assert float((ours - ref).abs().max()) < 1e-6

    def test_deterministic(self, tiny_model):
        sched = build_schedule(T=10)
        gen = torch.Generator().manual_seed(0)
        x = torch.zeros(1, 1, 16, 16)
        init = torch.randn(1, 1, 16, 16, generator=gen)
        a = sample(tiny_model, x, init, sched, step_seed=1)
        b = sample(tiny_model, x, init, sched, step_seed=1)
        assert torch.equal(a, b)

    def test_step_seed_changes_result(self, tiny_model):
        sched = build_schedule(T=10)
        gen = torch.Generator().manual_seed(0)
        x = torch.zeros(1, 1, 16, 16)
        init = torch.randn(1, 1, 16, 16, generator=gen)
        a = sample(tiny_model, x, init, sched, step_seed=1)
        b = sample(tiny_model, x, init, sched, step_seed=2)
        assert not torch.equal(a, b)

    def test_shape_mismatch_rejected(self, tiny_model):
        sched = build_schedule(T=5)
        with pytest.raises(ValueError):
            sample(tiny_model, torch.zeros(1, 1, 16, 16),
                   torch.zeros(1, 1, 8, 8), sched)

    def test_final_step_is_deterministic(self, tiny_model):
        # t=1 must not add noise: mean-only update
        sched = build_schedule(T=5)
        z1 = torch.randn(1, 1, 16, 16, generator=torch.Generator().manual_seed(3))
        x = torch.zeros(1, 1, 16, 16)
        a = reverse_step(tiny_model, x, z1, 1, sched, noise=torch.randn(z1.shape))
        b = reverse_step(tiny_model, x, z1, 1, sched, noise=None)
        assert torch.equal(a, b)


class TestSaveLoad:
    def test_round_trip(self, tiny_model, tmp_path):
        p = tmp_path / "den.ckpt"
        save_denoiser(tiny_model, p)
        back = load_denoiser(p)
        x = torch.zeros(1, 1, 16, 16)
        z = torch.randn(1, 1, 16, 16, generator=torch.Generator().manual_seed(0))
        g = torch.full((1,), 0.5)
        assert torch.allclose(tiny_model(x, z, g), back(x, z, g), atol=1e-6)
