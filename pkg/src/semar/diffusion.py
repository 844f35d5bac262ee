"""Per-token conditional diffusion head: noise-prediction training loss,
ancestral sampling, and class-conditioned warm-up pretraining.

The head is a plain MLP on the concatenation [x_t, time-embedding, z]. The
forward corruption is the standard variance-preserving schedule
x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps with a linear beta ramp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor


@dataclass
class DiffusionHeadConfig:
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    width: int = 256
    depth: int = 3
    time_dim: int = 32

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        betas = self.betas()
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("betas must lie in (0, 1)")
        abar = self.alpha_bars()
        if not (np.diff(abar) < 0).all():
            raise ValueError("alpha-bar must be strictly decreasing")

    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.timesteps, dtype=np.float64)

    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas())


class DiffusionHead(nn.Module):
    """eps_theta(x_t | t, z) as an MLP over [x_t, time_emb, z]."""

    def __init__(self, rng, cfg: DiffusionHeadConfig, data_dim: int, cond_dim: int):
        self.cfg = cfg
        self.data_dim = data_dim
        self.cond_dim = cond_dim
        dims = [data_dim + cfg.time_dim + cond_dim] + [cfg.width] * cfg.depth + [data_dim]
        self.net = nn.MLP(rng, dims, act="silu")
        self.betas_ = cfg.betas()
        self.abar_ = cfg.alpha_bars()

    def _check_t(self, t: np.ndarray):
        if (t < 1).any() or (t > self.cfg.timesteps).any():
            raise ValueError(f"timestep outside [1, {self.cfg.timesteps}]")

    def add_noise(self, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
        """x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps (pure numpy, no tape)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        self._check_t(t)
        abar = self.abar_[t - 1][:, None]
        return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps

    def predict(self, x_t: np.ndarray, t: np.ndarray, z: Tensor) -> Tensor:
        """Noise prediction; x_t and t are constants, gradients flow via z and net."""
        temb = nn.sinusoidal_embedding(t, self.cfg.time_dim)
        parts = [Tensor(x_t.astype(z.dtype)), Tensor(temb.astype(z.dtype)), z]
        return self.net(T.concat(parts, axis=-1))

    def diffuloss(self, x0: np.ndarray, z: Tensor, rng: np.random.Generator) -> Tensor:
        """Per-slot ||eps - eps_hat||^2 summed over dims, mean over slots.

        t is drawn before eps so the draw order is part of the seed contract.
        """
        n = x0.shape[0]
        if n == 0:
            raise ValueError("diffuloss needs at least one slot")
        t = rng.integers(1, self.cfg.timesteps + 1, size=n)
        eps = rng.standard_normal((n, self.data_dim))
        x_t = self.add_noise(x0, t, eps)
        diff = T.sub(self.predict(x_t, t, z), Tensor(eps.astype(z.dtype)))
        return T.mean(T.sum_(T.mul(diff, diff), axis=-1))

    def sample(self, z: Tensor, rng: np.random.Generator,
               predictor=None) -> np.ndarray:
        """Ancestral DDPM sampling; final step returns the x0 estimate.

        `predictor` overrides eps_theta (used by the analytic-oracle tests);
        signature (x_t, t_array, z) -> np.ndarray.
        """
        n = z.shape[0]
        ts = self.cfg.timesteps
        x = rng.standard_normal((n, self.data_dim))
        with T.no_grad():
            for t in range(ts, 0, -1):
                t_arr = np.full(n, t, dtype=np.int64)
                if predictor is None:
                    eps_hat = self.predict(x, t_arr, z).data.astype(np.float64)
                else:
                    eps_hat = np.asarray(predictor(x, t_arr, z), dtype=np.float64)
                beta = self.betas_[t - 1]
                abar = self.abar_[t - 1]
                if t == 1:
                    x = (x - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
                else:
                    abar_prev = self.abar_[t - 2]
                    mean = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(1.0 - beta)
                    var = (1.0 - abar_prev) / (1.0 - abar) * beta
                    x = mean + np.sqrt(var) * rng.standard_normal((n, self.data_dim))
        return x


def oracle_predictor(x0_star: np.ndarray, abar: np.ndarray):
    """Analytic eps for a known clean latent: inverts the forward corruption."""

    def predict(x_t, t_arr, _z):
        a = abar[t_arr - 1][:, None]
        return (x_t - np.sqrt(a) * x0_star) / np.sqrt(1.0 - a)

    return predict


def warmup_pretrain(head: DiffusionHead, dataset, steps: int,
                    rng: np.random.Generator, num_classes: int,
                    batch_size: int = 64, lr: float = 1e-3) -> dict:
    """Pretrain the head on (class-label, latent) pairs with a learned class
    embedding as the condition. Returns the trained head tensors by name.
    """
    if len(dataset) == 0:
        raise ValueError("warm-up dataset is empty")
    labels = np.array([int(c) for c, _ in dataset], dtype=np.int64)
    latents = np.stack([x for _, x in dataset]).astype(np.float32)
    class_emb = nn.param(rng, (num_classes, head.cond_dim), scale=0.02)
    params = dict(head.named_params(prefix="head."))
    params["class_emb"] = class_emb
    opt = nn.AdamW(params, lr=lr, weight_decay=0.0)
    for step in range(steps):
        idx = rng.integers(0, len(dataset), size=min(batch_size, len(dataset)))
        z = T.gather(class_emb, labels[idx], axis=0)
        loss = head.diffuloss(latents[idx], z, rng)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"warm-up loss diverged at step {step}")
        for p in params.values():
            p.grad = None
        T.backward(loss)
        opt.step(nn.cosine_lr(step, steps, lr))
    return head.named_tensors()
