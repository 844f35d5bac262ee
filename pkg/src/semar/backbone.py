"""Small decoder transformer with qknorm, z-loss, and hybrid attention.

Text positions attend causally; image positions additionally attend
bidirectionally inside their own contiguous image span. Rotary position
embeddings are applied to queries and keys at every position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor
from .toyworld import DP, DS, VOCAB


@dataclass
class BackboneConfig:
    num_layers: int = 4
    dim: int = 128
    num_heads: int = 4
    vocab_size: int = len(VOCAB)
    qknorm: bool = True
    zloss_weight: float = 1e-4
    max_seq_len: int = 256

    def __post_init__(self):
        if self.dim % self.num_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by {self.num_heads} heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads


TEXT, IMAGE, PAD = 0, 1, 2


@dataclass
class SequenceBatch:
    """Interleaved multimodal layout, padded to a common length.

    span_id marks image spans (-1 outside); masked flags the image slots whose
    input is the learned mask embedding and which carry regression targets.
    """

    token_ids: np.ndarray      # (B,T) int64; pad id outside text positions
    modality: np.ndarray       # (B,T) int8 in {TEXT, IMAGE, PAD}
    span_id: np.ndarray        # (B,T) int32; -1 outside image spans
    masked: np.ndarray         # (B,T) bool
    image_feats: np.ndarray    # (B,T,DS) float; zero outside image positions
    pixel_targets: np.ndarray  # (B,T,DP) float; zero outside masked slots
    text_targets: np.ndarray   # (B,T) int64; -1 where no LM target
    slot_index: np.ndarray = field(default=None)  # (B,T) int32; grid cell per image slot

    def __post_init__(self):
        b, t = self.token_ids.shape
        if self.slot_index is None:
            self.slot_index = np.zeros((b, t), dtype=np.int32)
        if b == 0 or t == 0:
            raise ValueError("empty batch")
        if self.masked.any() and not (self.modality[self.masked] == IMAGE).all():
            raise ValueError("mask flags outside image positions")
        if ((self.span_id >= 0) != (self.modality == IMAGE)).any():
            raise ValueError("span ids must cover exactly the image positions")
        for row in range(b):
            ids = self.span_id[row]
            for s in np.unique(ids[ids >= 0]):
                where = np.flatnonzero(ids == s)
                if where[-1] - where[0] + 1 != len(where):
                    raise ValueError(f"image span {s} in row {row} is not contiguous")

    @property
    def shape(self):
        return self.token_ids.shape


def span_attention_mask(span_id: np.ndarray) -> np.ndarray:
    """(B,T,T) boolean from span ids; [b,i,j] true iff i may attend to j."""
    b, t = span_id.shape
    causal = np.tril(np.ones((t, t), dtype=bool))
    same_span = (span_id[:, :, None] == span_id[:, None, :]) & (span_id[:, :, None] >= 0)
    return causal[None] | same_span


def build_attention_mask(batch: SequenceBatch) -> np.ndarray:
    """Hybrid causal/full mask: text causal, image spans internally bidirectional."""
    return span_attention_mask(batch.span_id)


def _rotary_tables(t: int, head_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
    ang = np.arange(t, dtype=np.float64)[:, None] * inv
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1)
    return cos.astype(dtype), sin.astype(dtype)


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    # x: (B,H,T,dh); tables (T,dh) broadcast along leading dims
    return T.add(T.mul(x, Tensor(cos, dtype=x.dtype)),
                 T.mul(T.rotate_half(x), Tensor(sin, dtype=x.dtype)))


class Attention(nn.Module):
    def __init__(self, rng, cfg: BackboneConfig):
        d = cfg.dim
        self.wq = nn.Linear(rng, d, d, bias=False)
        self.wk = nn.Linear(rng, d, d, bias=False)
        self.wv = nn.Linear(rng, d, d, bias=False)
        self.wo = nn.Linear(rng, d, d, bias=False, scale=1.0 / math.sqrt(d * 2 * cfg.num_layers))
        self.q_gain = nn.ones_param((cfg.head_dim,)) if cfg.qknorm else None
        self.k_gain = nn.ones_param((cfg.head_dim,)) if cfg.qknorm else None
        self.cfg = cfg

    def __call__(self, x: Tensor, bias: np.ndarray) -> Tensor:
        cfg = self.cfg
        b, t, d = x.shape
        h, dh = cfg.num_heads, cfg.head_dim

        def split(y: Tensor) -> Tensor:
            return T.transpose(T.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        if cfg.qknorm:
            q = T.rmsnorm(q, self.q_gain)
            k = T.rmsnorm(k, self.k_gain)
        cos, sin = _rotary_tables(t, dh, x.dtype)
        q = apply_rotary(q, cos, sin)
        k = apply_rotary(k, cos, sin)
        full_bias = np.broadcast_to(bias[:, None], (b, h, t, t))
        out = T.scaled_dot_product_attention(q, k, v, mask_bias=full_bias)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, d))
        return self.wo(out)


class Block(nn.Module):
    def __init__(self, rng, cfg: BackboneConfig):
        d = cfg.dim
        self.attn_norm = nn.ones_param((d,))
        self.attn = Attention(rng, cfg)
        self.mlp_norm = nn.ones_param((d,))
        self.up = nn.Linear(rng, d, 4 * d)
        self.down = nn.Linear(rng, 4 * d, d, scale=1.0 / math.sqrt(4 * d * 2 * cfg.num_layers))

    def __call__(self, x: Tensor, bias: np.ndarray) -> Tensor:
        x = T.add(x, self.attn(T.rmsnorm(x, self.attn_norm), bias))
        return T.add(x, self.down(T.silu(self.up(T.rmsnorm(x, self.mlp_norm)))))


class Backbone(nn.Module):
    """Token embedding -> transformer blocks -> final norm; untied text head."""

    def __init__(self, rng, cfg: BackboneConfig):
        self.cfg = cfg
        self.token_emb = nn.param(rng, (cfg.vocab_size, cfg.dim), scale=0.02)
        self.blocks = [Block(rng, cfg) for _ in range(cfg.num_layers)]
        self.final_norm = nn.ones_param((cfg.dim,))
        self.text_head = nn.Linear(rng, cfg.dim, cfg.vocab_size, bias=False)

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        return T.gather(self.token_emb, ids.astype(np.int64), axis=0)

    def __call__(self, input_emb: Tensor, attn_mask: np.ndarray) -> Tensor:
        b, t, d = input_emb.shape
        if d != self.cfg.dim:
            raise T.ShapeError("backbone.forward", input_emb.shape, (b, t, self.cfg.dim))
        if t > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max {self.cfg.max_seq_len}")
        bias = np.where(attn_mask, 0.0, -1e9).astype(input_emb.dtype)
        x = input_emb
        for block in self.blocks:
            x = block(x, bias)
        return T.rmsnorm(x, self.final_norm)

    def logits(self, z: Tensor) -> Tensor:
        return self.text_head(z)

    def text_loss(self, logits: Tensor, targets: np.ndarray) -> tuple[Tensor, Tensor]:
        """Cross entropy plus z-loss over gathered target rows (N,V)."""
        ce = T.cross_entropy(logits, targets)
        if self.cfg.zloss_weight == 0.0:
            return ce, Tensor(np.zeros((), dtype=logits.dtype))
        lse = T.logsumexp(logits, axis=-1)
        zloss = T.mul(T.mean(T.mul(lse, lse)), self.cfg.zloss_weight)
        return ce, zloss
