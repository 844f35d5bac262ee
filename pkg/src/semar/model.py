"""The unified understanding+generation model: backbone plus projectors plus
diffusion pixel head, with per-spec loss switches and gradient gating."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import nn
from . import tensor as T
from .backbone import (IMAGE, Backbone, BackboneConfig, SequenceBatch,
                       build_attention_mask)
from .config import (GATE_BLOCK_DIFFU, TARGET_MODE_EMA, ExperimentSpec)
from .diffusion import DiffusionHead, DiffusionHeadConfig
from .projectors import (TARGET_EMBED, VARIANT_DIFFUSION, VARIANT_EMA_MLP1,
                         InvertProjector, VisualProjector, regression_loss)
from .tensor import Tensor
from .toyworld import DP, DS


def _tile(flag: np.ndarray, dim: int, dtype) -> Tensor:
    return Tensor(np.broadcast_to(flag[..., None], flag.shape + (dim,)).astype(dtype))


class UnifiedModel(nn.Module):
    def __init__(self, rng: np.random.Generator, spec: ExperimentSpec,
                 bb_cfg: BackboneConfig | None = None,
                 head_cfg: DiffusionHeadConfig | None = None):
        bb_cfg = bb_cfg or BackboneConfig()
        head_cfg = head_cfg or DiffusionHeadConfig()
        if spec.warm_start_head:
            # the warm-start switch implies the enlarged decoder; one-field diff
            head_cfg = replace(head_cfg, width=head_cfg.width * 2, depth=head_cfg.depth * 2)
        self.spec = spec
        self.bb_cfg = bb_cfg
        self.head_cfg = head_cfg
        d = bb_cfg.dim
        self.backbone = Backbone(rng, bb_cfg)
        self.visual_proj = VisualProjector(rng, DS, d)
        self.mask_emb = nn.param(rng, (d,), scale=0.02)
        self.target_dim = d if spec.regression_target == TARGET_EMBED else DS
        if spec.variant == VARIANT_DIFFUSION:
            self.invert = DiffusionHead(rng, head_cfg, data_dim=self.target_dim, cond_dim=d)
        else:
            self.invert = InvertProjector(rng, spec.variant, d, self.target_dim)
        self.diffusion = DiffusionHead(rng, head_cfg, data_dim=DP, cond_dim=d)
        self.target_proj = None
        if spec.variant == VARIANT_EMA_MLP1 and spec.target_mode == TARGET_MODE_EMA:
            self.target_proj = VisualProjector(rng, DS, d)
            for name, p in self.target_proj.named_tensors().items():
                p.data = self.visual_proj.named_tensors()[name].data.copy()
                p.requires_grad = False

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def input_embeddings(self, batch: SequenceBatch) -> Tensor:
        """Blend token, projected-image, and mask embeddings per modality."""
        dt = T.default_dtype()
        tok = self.backbone.embed_tokens(batch.token_ids)
        img = self.visual_proj(Tensor(batch.image_feats.astype(dt)))
        is_img = batch.modality == IMAGE
        m_tok = _tile(~is_img, self.bb_cfg.dim, dt)
        m_img = _tile(is_img & ~batch.masked, self.bb_cfg.dim, dt)
        m_mask = _tile(batch.masked, self.bb_cfg.dim, dt)
        x = T.add(T.mul(tok, m_tok), T.mul(img, m_img))
        return T.add(x, T.mul(self.mask_emb, m_mask))

    def hidden_states(self, batch: SequenceBatch) -> Tensor:
        return self.backbone(self.input_embeddings(batch), build_attention_mask(batch))

    def regression_targets(self, feats_rows: np.ndarray) -> Tensor:
        """Target vectors for the masked slots, never carrying gradients."""
        dt = T.default_dtype()
        if self.spec.regression_target != TARGET_EMBED:
            return Tensor(feats_rows.astype(dt))
        proj = self.target_proj if self.target_proj is not None else self.visual_proj
        return T.stop_gradient(proj(Tensor(feats_rows.astype(dt))))

    def forward_batch(self, batch: SequenceBatch, rng: np.random.Generator) -> dict:
        """Compute all loss components for one batch.

        Returns tensors (still on tape) under keys text, zloss, ploss, diffu,
        plus the masked-slot count. Switched-off components are exact zeros.
        """
        b, t = batch.shape
        d = self.bb_cfg.dim
        z = self.hidden_states(batch)
        z_flat = T.reshape(z, (b * t, d))
        zero = Tensor(np.zeros((), dtype=z.dtype))

        flat_targets = batch.text_targets.reshape(-1)
        text_idx = np.flatnonzero(flat_targets >= 0)
        if text_idx.size:
            logits = self.backbone.logits(T.gather(z_flat, text_idx, axis=0))
            ce, zloss = self.backbone.text_loss(logits, flat_targets[text_idx])
        else:
            ce, zloss = zero, zero

        mask_idx = np.flatnonzero(batch.masked.reshape(-1))
        ploss_val, diffu_val = zero, zero
        if mask_idx.size:
            z_m = T.gather(z_flat, mask_idx, axis=0)
            flat_cells = batch.slot_index.reshape(-1)[mask_idx]
            feats_rows = batch.image_feats.reshape(b * t, -1)[mask_idx]
            if self.spec.ploss_on:
                if self.spec.variant == VARIANT_DIFFUSION:
                    ploss_val = self.invert.diffuloss(feats_rows, z_m, rng)
                else:
                    target = self.regression_targets(feats_rows)
                    ploss_val = regression_loss(self.spec.regression_loss,
                                                target, self.invert(z_m))
            if self.spec.diffuloss_on:
                cond = T.stop_gradient(z_m) if self.spec.gating == GATE_BLOCK_DIFFU else z_m
                x0 = batch.pixel_targets.reshape(b * t, -1)[mask_idx]
                diffu_val = self.diffusion.diffuloss(x0, cond, rng)
        return {"text": ce, "zloss": zloss, "ploss": ploss_val, "diffu": diffu_val,
                "masked_slots": int(mask_idx.size)}

    # ------------------------------------------------------------------
    # inference-side prediction
    # ------------------------------------------------------------------

    def predict_regression(self, z_rows: Tensor, rng: np.random.Generator) -> np.ndarray:
        """ê for each hidden-state row (sampled when the variant is a diffusion head)."""
        if self.spec.variant == VARIANT_DIFFUSION:
            return self.invert.sample(T.stop_gradient(z_rows), rng)
        return self.invert(T.stop_gradient(z_rows)).data

    def prediction_to_embedding(self, pred: np.ndarray) -> np.ndarray:
        """Turn ê into an input embedding for committing a generated slot."""
        if self.spec.regression_target == TARGET_EMBED:
            return pred
        return self.visual_proj(T.stop_gradient(Tensor(pred))).data

    def update_target(self, momentum: float) -> None:
        if self.target_proj is None:
            return
        online = self.visual_proj.named_params()
        target = self.target_proj.named_tensors()
        names = sorted(online)
        T.ema_update([target[n] for n in names], [online[n] for n in names], momentum)

    def zero_grad(self):
        for p in self.params():
            p.grad = None
