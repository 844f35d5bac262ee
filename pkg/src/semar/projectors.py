"""Visual projector, the invert-projector variant family, and regression losses.

The visual projector lifts frozen semantic features into the backbone's
embedding space. The invert projector maps hidden states back to a prediction
of either the raw semantic feature or the aligned input embedding; the
variants mirror the module-selection ablation axes (structure, target, loss).
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

VARIANT_MLP1 = "mlp1"
VARIANT_MLP3NORM = "mlp3norm"
VARIANT_EMA_MLP1 = "ema_mlp1"
VARIANT_DIFFUSION = "diffusion_head"
VARIANTS = (VARIANT_MLP1, VARIANT_MLP3NORM, VARIANT_EMA_MLP1, VARIANT_DIFFUSION)

TARGET_VISION = "vision_encoder_output"   # regress the raw semantic feature x^s
TARGET_EMBED = "input_embedding"          # regress the aligned embedding e
TARGETS = (TARGET_VISION, TARGET_EMBED)

LOSS_COSINE = "cosine"
LOSS_MSE = "mse"


class VisualProjector(nn.Module):
    """linear -> silu -> linear, ds -> D."""

    def __init__(self, rng, ds: int, dim: int):
        self.fc1 = nn.Linear(rng, ds, dim)
        self.fc2 = nn.Linear(rng, dim, dim)
        self.ds = ds

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.ds:
            raise T.ShapeError("visual_projector", x.shape, (self.ds,))
        return self.fc2(T.silu(self.fc1(x)))


class InvertProjector(nn.Module):
    """Maps hidden state z (dim D) to a prediction of the regression target.

    MLP1:     linear(D,D) -> silu -> linear(D,out)
    MLP3Norm: three linears with rms normalization between, hidden 4D
    EmaMLP1:  same net as MLP1; the *target* is produced by an EMA copy of the
              visual projector (wired by the model, not here)
    DiffusionHead is constructed by the model directly; asking this class for
    it is a configuration error, as is pairing it with a cosine loss.
    """

    def __init__(self, rng, variant: str, dim: int, out_dim: int):
        if variant not in (VARIANT_MLP1, VARIANT_EMA_MLP1, VARIANT_MLP3NORM):
            raise ValueError(f"invert projector cannot be built for variant {variant!r}")
        self.variant = variant
        self.out_dim = out_dim
        if variant == VARIANT_MLP3NORM:
            h = 4 * dim
            self.fc1 = nn.Linear(rng, dim, h)
            self.norm1 = nn.ones_param((h,))
            self.fc2 = nn.Linear(rng, h, h)
            self.norm2 = nn.ones_param((h,))
            self.fc3 = nn.Linear(rng, h, out_dim)
        else:
            self.fc1 = nn.Linear(rng, dim, dim)
            self.fc2 = nn.Linear(rng, dim, out_dim)

    def __call__(self, z: Tensor) -> Tensor:
        if self.variant == VARIANT_MLP3NORM:
            h = T.silu(T.rmsnorm(self.fc1(z), self.norm1))
            h = T.silu(T.rmsnorm(self.fc2(h), self.norm2))
            return self.fc3(h)
        return self.fc2(T.silu(self.fc1(z)))


def ploss(e_target: Tensor, pred: Tensor) -> Tensor:
    """Mean negative cosine similarity over rows; in [-1, 1], -1 when parallel."""
    if e_target.shape != pred.shape:
        raise T.ShapeError("ploss", e_target.shape, pred.shape)
    return T.neg(T.mean(T.cosine_similarity(e_target, pred, axis=-1)))


def mse_regression_loss(target: Tensor, pred: Tensor) -> Tensor:
    if target.shape != pred.shape:
        raise T.ShapeError("mse_regression_loss", target.shape, pred.shape)
    return T.mse(pred, target)


def regression_loss(kind: str, target: Tensor, pred: Tensor) -> Tensor:
    if kind == LOSS_COSINE:
        return ploss(target, pred)
    if kind == LOSS_MSE:
        return mse_regression_loss(target, pred)
    raise ValueError(f"unknown regression loss {kind!r}")
