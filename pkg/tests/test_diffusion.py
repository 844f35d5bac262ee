"""Diffusion-head tests with independent oracles: closed-form corruption
statistics, the zero-predictor loss value, analytic-epsilon sampling, and
the class-conditioned warm-up."""

import numpy as np
import pytest

import semar.tensor as T
from semar import nn
from semar.diffusion import (DiffusionHead, DiffusionHeadConfig,
                             oracle_predictor, warmup_pretrain)
from semar.tensor import Tensor


def head(data_dim=6, cond_dim=4, **cfg_kw) -> DiffusionHead:
    base = dict(timesteps=50, width=32, depth=2, time_dim=8)
    base.update(cfg_kw)
    return DiffusionHead(np.random.default_rng(0), DiffusionHeadConfig(**base),
                         data_dim=data_dim, cond_dim=cond_dim)


class TestSchedule:
    def test_beta_endpoints(self):
        cfg = DiffusionHeadConfig(timesteps=100, beta_start=1e-4, beta_end=0.02)
        betas = cfg.betas()
        assert betas[0] == pytest.approx(1e-4) and betas[-1] == pytest.approx(0.02)
        assert len(betas) == 100

    def test_alpha_bar_monotone_and_product(self):
        cfg = DiffusionHeadConfig(timesteps=10)
        abar = cfg.alpha_bars()
        assert (np.diff(abar) < 0).all()
        assert abar[3] == pytest.approx(np.prod(1.0 - cfg.betas()[:4]))

    def test_invalid_betas_rejected(self):
        with pytest.raises(ValueError, match="betas"):
            DiffusionHeadConfig(beta_end=1.5)
        with pytest.raises(ValueError, match="timesteps"):
            DiffusionHeadConfig(timesteps=0)


class TestForwardCorruption:
    def test_norm_statistics_match_closed_form(self):
        # E||x_t||^2 = abar_t ||x0||^2 + (1-abar_t) d, Monte Carlo at two ts
        h = head(data_dim=8)
        rng = np.random.default_rng(1)
        x0 = np.full((1, 8), 0.5)
        for t in (1, 40):
            draws = []
            for _ in range(4000):
                eps = rng.standard_normal((1, 8))
                draws.append(float((h.add_noise(x0, t, eps) ** 2).sum()))
            abar = h.abar_[t - 1]
            want = abar * float((x0 ** 2).sum()) + (1 - abar) * 8
            got = float(np.mean(draws))
            assert abs(got - want) / want < 0.05, (t, got, want)

    def test_t_bounds_checked(self):
        h = head()
        x0 = np.zeros((2, 6))
        eps = np.zeros((2, 6))
        with pytest.raises(ValueError, match="timestep"):
            h.add_noise(x0, 0, eps)
        with pytest.raises(ValueError, match="timestep"):
            h.add_noise(x0, h.cfg.timesteps + 1, eps)

    def test_t1_is_nearly_clean(self):
        h = head()
        x0 = np.ones((1, 6))
        x1 = h.add_noise(x0, 1, np.zeros((1, 6)))
        assert np.allclose(x1, np.sqrt(h.abar_[0]) * x0)


class TestDiffuLoss:
    def test_zero_predictor_expected_value(self):
        # with eps_hat == 0 the loss is E||eps||^2 = data_dim, within 5%
        h = head(data_dim=6)
        for p in h.net.params():
            p.data[:] = 0.0
        rng = np.random.default_rng(2)
        z = Tensor(np.zeros((4000, h.cond_dim), dtype=np.float32))
        x0 = np.zeros((4000, 6), dtype=np.float32)
        val = float(h.diffuloss(x0, z, rng).data)
        assert abs(val - 6.0) / 6.0 < 0.05, val

    def test_empty_slots_rejected(self):
        h = head()
        with pytest.raises(ValueError, match="at least one slot"):
            h.diffuloss(np.zeros((0, 6)), Tensor(np.zeros((0, 4))), np.random.default_rng(0))

    def test_deterministic_under_seed(self):
        h = head()
        x0 = np.random.default_rng(3).standard_normal((5, 6)).astype(np.float32)
        z = Tensor(np.random.default_rng(4).standard_normal((5, 4)).astype(np.float32))
        a = float(h.diffuloss(x0, z, np.random.default_rng(7)).data)
        b = float(h.diffuloss(x0, z, np.random.default_rng(7)).data)
        assert a == b

    def test_gradients_reach_condition(self):
        h = head()
        z = Tensor(np.random.default_rng(5).standard_normal((3, 4)).astype(np.float32),
                   requires_grad=True)
        loss = h.diffuloss(np.zeros((3, 6), dtype=np.float32), z, np.random.default_rng(6))
        T.backward(loss)
        assert z.grad is not None and np.abs(z.grad).max() > 0


class TestSampling:
    def test_oracle_epsilon_recovers_x0(self):
        # analytic noise-prediction for a known x0 must land on x0 closely
        h = head(data_dim=6, timesteps=100)
        x0_star = np.array([[0.3, -0.2, 0.8, 0.0, -0.5, 0.1]])
        pred = oracle_predictor(np.repeat(x0_star, 5, axis=0), h.abar_)
        z = Tensor(np.zeros((5, 4), dtype=np.float32))
        out = h.sample(z, np.random.default_rng(8), predictor=pred)
        mse = float(np.mean((out - x0_star) ** 2))
        assert mse < 1e-2, mse

    def test_oracle_loss_is_zero(self):
        # feeding the oracle's eps back into the loss residual gives exactly 0
        h = head(data_dim=6)
        rng = np.random.default_rng(9)
        x0 = rng.standard_normal((7, 6))
        t = rng.integers(1, h.cfg.timesteps + 1, size=7)
        eps = rng.standard_normal((7, 6))
        x_t = h.add_noise(x0, t, eps)
        eps_hat = oracle_predictor(x0, h.abar_)(x_t, t, None)
        assert np.abs(eps_hat - eps).max() < 1e-9

    def test_sample_shape_and_determinism(self):
        h = head()
        z = Tensor(np.random.default_rng(10).standard_normal((3, 4)).astype(np.float32))
        a = h.sample(z, np.random.default_rng(11))
        b = h.sample(z, np.random.default_rng(11))
        assert a.shape == (3, 6)
        assert np.array_equal(a, b)

    def test_sample_ignores_tape(self):
        h = head()
        z = Tensor(np.zeros((2, 4), dtype=np.float32), requires_grad=True)
        T.tape().clear()
        h.sample(z, np.random.default_rng(12))
        assert len(T.tape().nodes) == 0


class TestWarmup:
    def test_pretrain_reduces_loss(self):
        rng = np.random.default_rng(13)
        h = head(data_dim=6, cond_dim=4, timesteps=50)
        # two class-conditional cluster means, clearly separated
        means = np.array([[1.0] * 6, [-1.0] * 6], dtype=np.float32)
        data = [(i % 2, means[i % 2] + 0.05 * rng.standard_normal(6).astype(np.float32))
                for i in range(256)]

        def mean_loss(seed):
            lat = np.stack([x for _, x in data[:64]])
            z = Tensor(np.zeros((64, 4), dtype=np.float32))
            vals = [float(h.diffuloss(lat, z, np.random.default_rng(s)).data)
                    for s in range(seed, seed + 4)]
            T.tape().clear()
            return float(np.mean(vals))

        before = mean_loss(100)
        warmup_pretrain(h, data, steps=300, rng=rng, num_classes=2)
        after = mean_loss(100)
        assert after < before * 0.8, (before, after)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            warmup_pretrain(head(), [], steps=5, rng=np.random.default_rng(0),
                            num_classes=2)

    def test_returns_named_tensors(self):
        h = head()
        data = [(0, np.zeros(6, dtype=np.float32))] * 8
        out = warmup_pretrain(h, data, steps=2, rng=np.random.default_rng(1), num_classes=1)
        assert set(out) == set(h.named_tensors())
