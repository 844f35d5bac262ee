"""Layers, parameter containers, and the optimizer."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container with recursive named traversal."""

    def named_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        """All tensors in the tree, trainable or not (checkpoint surface)."""
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor):
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_tensors(f"{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_tensors(f"{key}.{i}."))
                    elif isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item
        return out

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors(prefix).items() if v.requires_grad}

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def zero_grad(self):
        for p in self.params():
            p.grad = None


def param(rng: np.random.Generator, shape, scale: float | None = None) -> Tensor:
    """Gaussian-initialized trainable tensor; default scale 1/sqrt(fan_in)."""
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else shape[-1]
        scale = 1.0 / math.sqrt(fan_in)
    data = rng.standard_normal(shape) * scale
    return Tensor(data, requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, scale: float | None = None):
        self.w = param(rng, (d_in, d_out), scale)
        self.b = zeros_param((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = T.add(y, self.b)
        return y


_ACTS: dict[str, Callable[[Tensor], Tensor]] = {
    "silu": T.silu,
    "gelu": T.gelu,
    "tanh": T.tanh,
}


class MLP(Module):
    """Stack of linears with a fixed activation between them."""

    def __init__(self, rng, dims: list[int], act: str = "silu", bias: bool = True):
        self.layers = [Linear(rng, dims[i], dims[i + 1], bias=bias) for i in range(len(dims) - 1)]
        self.act_name = act

    def __call__(self, x: Tensor) -> Tensor:
        act = _ACTS[self.act_name]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Transformer-style sin/cos embedding of (integer) timesteps, shape (..., dim)."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[..., None] * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    return emb.astype(T.default_dtype())


def cosine_lr(step: int, total_steps: int, peak_lr: float, warmup_frac: float = 0.03,
              floor_frac: float = 0.1) -> float:
    """Linear warmup over warmup_frac of training, then cosine decay to floor."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    progress = min(1.0, progress)
    floor = peak_lr * floor_frac
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """AdamW with decoupled weight decay; decay applies only to matrices (ndim >= 2)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.names = list(params.keys())
        self.params = [params[n] for n in self.names]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float32) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float32) for p in self.params]

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float32, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.dtype, copy=False)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for n, m, v in zip(self.names, self.m, self.v):
            out[f"opt.m.{n}"] = m
            out[f"opt.v.{n}"] = v
        return out
