"""Inference: greedy text decoding, MAR-style iterative image-token
generation under a cosine unmasking schedule, pixel decoding, and the
re-mask/regenerate refinement pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import toyworld as tw
from .backbone import span_attention_mask
from .model import UnifiedModel
from .tensor import Tensor


@dataclass(frozen=True)
class UnmaskSchedule:
    """Cosine mask-fraction decay f(s)=cos(pi/2 * s/S), committed via ceilings.

    remaining(s) is the masked-slot count after step s; it follows
    ceil(f(s) * G^2) clamped so every step commits at least one slot and the
    count reaches exactly zero at step S.
    """

    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if self.steps > tw.NUM_SLOTS:
            raise ValueError(f"more steps than slots ({self.steps} > {tw.NUM_SLOTS})")

    def fraction(self, s: int) -> float:
        return math.cos(math.pi / 2.0 * s / self.steps)

    def remaining(self) -> list[int]:
        out = [tw.NUM_SLOTS]
        for s in range(1, self.steps + 1):
            ideal = math.ceil(self.fraction(s) * tw.NUM_SLOTS)
            out.append(max(0, min(ideal, out[-1] - 1)))
        out[-1] = 0
        return out

    def commit_counts(self) -> list[int]:
        rem = self.remaining()
        return [rem[s - 1] - rem[s] for s in range(1, self.steps + 1)]


@dataclass
class RefineConfig:
    rounds: int = 1
    regenerate_fraction: float = 0.5
    order: str = "random"  # random: one parallel pass; original: ascending sequential

    def __post_init__(self):
        if not 0.0 <= self.regenerate_fraction <= 1.0:
            raise ValueError("regenerate_fraction must lie in [0, 1]")
        if self.order not in ("random", "original"):
            raise ValueError(f"unknown refine order {self.order!r}")


@dataclass
class GenState:
    """A prompt plus the image-slot lattice being filled in."""

    prompt_ids: list[int]                 # text tokens before the image span
    committed: np.ndarray                 # (G^2, D) slot input embeddings
    is_committed: np.ndarray              # (G^2,) bool
    z_slots: np.ndarray | None = None     # (G^2, D) hidden states, last forward
    trace: list = field(default_factory=list)


def _forward_slots(model: UnifiedModel, state: GenState) -> np.ndarray:
    """One forward over [prompt, BOI, slots, EOI]; returns z rows at the slots."""
    v = tw.VOCAB
    ids = list(state.prompt_ids) + [v.boi]
    n_text = len(ids)
    n = tw.NUM_SLOTS
    t_total = n_text + n + 1
    d = model.bb_cfg.dim
    dt = T.default_dtype()
    with T.no_grad():
        emb = np.zeros((1, t_total, d), dtype=dt)
        emb[0, :n_text] = model.backbone.token_emb.data[ids]
        emb[0, n_text + n] = model.backbone.token_emb.data[v.eoi]
        slot_emb = np.where(state.is_committed[:, None], state.committed,
                            model.mask_emb.data[None, :])
        emb[0, n_text:n_text + n] = slot_emb
        span = np.full((1, t_total), -1, dtype=np.int32)
        span[0, n_text:n_text + n] = 0
        z = model.backbone(Tensor(emb), span_attention_mask(span))
        return z.data[0, n_text:n_text + n].copy()


def _commit(model: UnifiedModel, state: GenState, slots: np.ndarray,
            z_rows: np.ndarray, rng) -> None:
    with T.no_grad():
        pred = model.predict_regression(Tensor(z_rows[slots]), rng)
        state.committed[slots] = model.prediction_to_embedding(pred)
    state.is_committed[slots] = True


def generate_image_semantic(model: UnifiedModel, prompt_ids,
                            schedule: UnmaskSchedule,
                            rng: np.random.Generator) -> GenState:
    """Iteratively unmask all image slots after the prompt, MAR style."""
    state = GenState(prompt_ids=list(prompt_ids),
                     committed=np.zeros((tw.NUM_SLOTS, model.bb_cfg.dim), dtype=np.float32),
                     is_committed=np.zeros(tw.NUM_SLOTS, dtype=bool))
    for count in schedule.commit_counts():
        z = _forward_slots(model, state)
        masked = np.flatnonzero(~state.is_committed)
        slots = rng.choice(masked, size=count, replace=False)
        _commit(model, state, slots, z, rng)
        state.trace.append({"committed": sorted(int(s) for s in slots),
                            "remaining": int((~state.is_committed).sum())})
    if not state.is_committed.all():
        raise RuntimeError("schedule finished with uncommitted slots")
    state.z_slots = _forward_slots(model, state)
    return state


def decode_image(model: UnifiedModel, z_slots: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """Sample each slot's pixel latent conditioned on its z; assemble a raster."""
    z_slots = np.asarray(z_slots)
    if z_slots.shape != (tw.NUM_SLOTS, model.bb_cfg.dim):
        raise ValueError(f"need {tw.NUM_SLOTS} slot states, got {z_slots.shape}")
    with T.no_grad():
        latents = model.diffusion.sample(Tensor(z_slots), rng)
    return np.clip(tw.decode_pixel(latents), 0.0, 1.0)


def _score_state(model: UnifiedModel, state: GenState, rng) -> float | None:
    """Attribute agreement between the decoded raster and the prompt caption."""
    scene = tw.parse_caption([i for i in state.prompt_ids if i != tw.VOCAB.bos])
    if scene is None:
        return None
    from .evals import pixel_quality
    raster = decode_image(model, state.z_slots, rng)
    return pixel_quality(scene, raster)["attribute_accuracy"]


def refine(model: UnifiedModel, state: GenState, cfg: RefineConfig,
           rng: np.random.Generator) -> GenState:
    """Re-mask a random slot subset and regenerate it, for cfg.rounds rounds."""
    if not state.is_committed.all():
        raise ValueError("refine needs a completed generation state")
    k = math.ceil(cfg.regenerate_fraction * tw.NUM_SLOTS)
    for _ in range(cfg.rounds):
        if k == 0:
            state.trace.append({"refine_score": _score_state(model, state, rng)})
            continue
        slots = np.sort(rng.choice(tw.NUM_SLOTS, size=k, replace=False))
        state.is_committed[slots] = False
        if cfg.order == "random":
            z = _forward_slots(model, state)
            _commit(model, state, slots, z, rng)
        else:
            for s in slots:
                z = _forward_slots(model, state)
                _commit(model, state, np.array([s]), z, rng)
        state.z_slots = _forward_slots(model, state)
        state.trace.append({"refined": [int(s) for s in slots],
                            "refine_score": _score_state(model, state, rng)})
    return state


def generate_text(model: UnifiedModel, prompt, max_len: int = 32,
                  temperature: float = 0.0,
                  rng: np.random.Generator | None = None,
                  stop_ids=None) -> list[int]:
    """Greedy (or sampled) continuation. `prompt` items are token ids or
    ("emb", vector) entries for pre-committed image slots; consecutive
    embedding entries form one image span."""
    v = tw.VOCAB
    stop = set(stop_ids) if stop_ids is not None else {v.eos}
    if temperature > 0 and rng is None:
        raise ValueError("sampling needs an rng")
    items = list(prompt)
    if items and not isinstance(items[-1], tuple) and items[-1] in stop:
        return []
    d = model.bb_cfg.dim
    out: list[int] = []
    with T.no_grad():
        for _ in range(max_len):
            t_total = len(items)
            emb = np.zeros((1, t_total, d), dtype=T.default_dtype())
            span = np.full((1, t_total), -1, dtype=np.int32)
            for i, item in enumerate(items):
                if isinstance(item, tuple):
                    emb[0, i] = item[1]
                    span[0, i] = 0
                else:
                    emb[0, i] = model.backbone.token_emb.data[item]
            z = model.backbone(Tensor(emb), span_attention_mask(span))
            logits = z.data[0, -1] @ model.backbone.text_head.w.data
            if temperature == 0.0:
                nxt = int(np.argmax(logits))
            else:
                p = np.exp((logits - logits.max()) / temperature)
                nxt = int(rng.choice(len(p), p=p / p.sum()))
            if nxt in stop:
                break
            out.append(nxt)
            items.append(nxt)
    return out


def roundtrip_caption(model: UnifiedModel, caption_ids,
                      schedule: UnmaskSchedule, rng: np.random.Generator,
                      max_len: int = 24) -> list[int]:
    """caption -> generated semantic slots -> regenerated caption."""
    v = tw.VOCAB
    state = generate_image_semantic(model, [v.bos] + list(caption_ids), schedule, rng)
    prompt = [v.bos, v.boi] + [("emb", e) for e in state.committed] + [v.eoi]
    return generate_text(model, prompt, max_len=max_len, temperature=0.0,
                         stop_ids={v.eos, v.q})
