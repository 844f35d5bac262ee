"""Training: batch construction with Gaussian mask rates, loss assembly,
the optimizer loop with periodic evaluation, metrics JSONL, checkpoints,
and the diffusion-head warm-up used by the warm-start spec."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import nn
from . import tensor as T
from . import toyworld as tw
from .backbone import IMAGE, PAD, TEXT, BackboneConfig, SequenceBatch
from .config import ExperimentSpec, TrainConfig
from .diffusion import DiffusionHeadConfig, warmup_pretrain
from .evals import attribute_preservation, qa_accuracy
from .inference import UnmaskSchedule, roundtrip_caption
from .model import UnifiedModel
from .tensor import Tensor


class TrainerError(RuntimeError):
    pass


def draw_mask_rate(cfg: TrainConfig, rng: np.random.Generator) -> float:
    lo, hi = cfg.mask_clamp
    return float(np.clip(rng.normal(cfg.mask_mean, cfg.mask_std), lo, hi))


def _understanding_layout(sample: tw.ToySample, cfg: TrainConfig, rng):
    v = tw.VOCAB
    keep_caption = rng.random() >= cfg.caption_drop
    q, a = sample.qa[int(rng.integers(len(sample.qa)))]
    text_tail = (list(sample.caption) if keep_caption else []) \
        + [v.q] + list(q) + [v.a, a, v.eos]
    tokens = [v.bos, v.boi] + [v.pad] * tw.NUM_SLOTS + [v.eoi] + text_tail
    img_start = 2
    eoi_pos = img_start + tw.NUM_SLOTS
    targets = {t: tokens[t + 1] for t in range(eoi_pos, len(tokens) - 1)}
    return tokens, img_start, np.array([], dtype=np.int64), targets


def _generation_layout(sample: tw.ToySample, cfg: TrainConfig, rng):
    v = tw.VOCAB
    r = draw_mask_rate(cfg, rng)
    k = math.ceil(r * tw.NUM_SLOTS)
    masked_cells = np.sort(rng.choice(tw.NUM_SLOTS, size=k, replace=False))
    tokens = [v.bos] + list(sample.caption) + [v.boi] \
        + [v.pad] * tw.NUM_SLOTS + [v.eoi, v.eos]
    boi_pos = 1 + len(sample.caption)
    img_start = boi_pos + 1
    eoi_pos = img_start + tw.NUM_SLOTS
    targets = {t: tokens[t + 1] for t in range(0, boi_pos)}
    targets[eoi_pos] = v.eos
    return tokens, img_start, masked_cells, targets


def make_batch(samples: list[tw.ToySample], cfg: TrainConfig,
               rng: np.random.Generator) -> SequenceBatch:
    """Assemble a padded batch; image order vs text order drawn per sample.

    Construction consumes rng identically regardless of any experiment spec,
    so batches are bit-identical across ablation rows at equal seeds.
    """
    if not samples:
        raise ValueError("empty batch")
    rows = []
    for sample in samples:
        if rng.random() < cfg.gen_fraction:
            rows.append((sample,) + _generation_layout(sample, cfg, rng))
        else:
            rows.append((sample,) + _understanding_layout(sample, cfg, rng))
    b = len(rows)
    t_max = max(len(r[1]) for r in rows)
    v = tw.VOCAB
    token_ids = np.full((b, t_max), v.pad, dtype=np.int64)
    modality = np.full((b, t_max), PAD, dtype=np.int8)
    span_id = np.full((b, t_max), -1, dtype=np.int32)
    masked = np.zeros((b, t_max), dtype=bool)
    feats = np.zeros((b, t_max, tw.DS), dtype=np.float32)
    pixels = np.zeros((b, t_max, tw.DP), dtype=np.float32)
    text_targets = np.full((b, t_max), -1, dtype=np.int64)
    slot_index = np.zeros((b, t_max), dtype=np.int32)
    for row, (sample, tokens, img_start, masked_cells, targets) in enumerate(rows):
        n = len(tokens)
        token_ids[row, :n] = tokens
        modality[row, :n] = TEXT
        sl = slice(img_start, img_start + tw.NUM_SLOTS)
        modality[row, sl] = IMAGE
        span_id[row, sl] = 0
        feats[row, sl] = sample.semantic
        slot_index[row, sl] = np.arange(tw.NUM_SLOTS)
        for cell in masked_cells:
            pos = img_start + int(cell)
            masked[row, pos] = True
            pixels[row, pos] = sample.pixel_latents[cell]
        for t, tgt in targets.items():
            text_targets[row, t] = tgt
    return SequenceBatch(token_ids=token_ids, modality=modality, span_id=span_id,
                         masked=masked, image_feats=feats, pixel_targets=pixels,
                         text_targets=text_targets, slot_index=slot_index)


def total_loss(components: dict, spec: ExperimentSpec, cfg: TrainConfig):
    """L = L_text + alpha * L_ploss + beta * L_diffu, with exact-zero switches."""
    loss = T.add(components["text"], components["zloss"])
    if spec.ploss_on:
        loss = T.add(loss, T.mul(components["ploss"], cfg.alpha))
    if spec.diffuloss_on:
        loss = T.add(loss, T.mul(components["diffu"], cfg.beta))
    for name in ("text", "zloss", "ploss", "diffu"):
        if not np.isfinite(components[name].data).all():
            raise TrainerError(f"non-finite loss component {name}")
    return loss


@dataclass
class MetricTimeline:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict):
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("metric steps must be strictly increasing")
        self.records.append(rec)

    def final(self) -> dict:
        return self.records[-1]


def _streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent per-purpose rngs; batch streams never depend on the spec."""
    root = np.random.SeedSequence(seed)
    names = ("init", "batch", "diffusion", "eval", "warmup")
    return {n: np.random.default_rng(s) for n, s in zip(names, root.spawn(len(names)))}


def shape_color_class(scene_obj: tw.Obj) -> int:
    return tw.SHAPES.index(scene_obj.shape) * len(tw.COLORS) + tw.COLORS.index(scene_obj.color)


def warmup_dataset(scenes: list[tw.Scene]) -> list[tuple[int, np.ndarray]]:
    """Per-object (class, occupied-cell latent) pairs for head pretraining."""
    out = []
    for scene in scenes:
        latents = tw.encode_pixel(tw.render(scene))
        for o in scene.objects:
            out.append((shape_color_class(o), latents[o.row * tw.GRID + o.col]))
    return out


def digest_for(spec: ExperimentSpec, cfg: TrainConfig, bb_cfg: BackboneConfig,
               head_cfg: DiffusionHeadConfig) -> bytes:
    from dataclasses import asdict
    return ckpt.config_digest({"spec": spec.to_dict(), "train": cfg.to_dict(),
                               "backbone": asdict(bb_cfg), "head": asdict(head_cfg),
                               "world": tw.world_digest()})


def evaluate(model: UnifiedModel, eval_samples, cfg: TrainConfig,
             seed: int, step: int, qa_limit: int | None = None) -> dict:
    """QA accuracy plus mean round-trip attribute preservation, deterministically."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, step, 0xE7A1)))
    qa = qa_accuracy(model, eval_samples, limit=qa_limit or cfg.eval_qa)
    scores = []
    schedule = UnmaskSchedule(4)
    for sample in eval_samples[:cfg.eval_roundtrips]:
        regen = roundtrip_caption(model, sample.caption, schedule, rng)
        scores.append(attribute_preservation(sample.caption, regen).aggregate)
    return {"qa_accuracy": qa,
            "attribute_preservation": float(np.mean(scores)) if scores else 0.0}


def train(spec: ExperimentSpec, cfg: TrainConfig, scenes: list[tw.Scene],
          run_dir, bb_cfg: BackboneConfig | None = None,
          head_cfg: DiffusionHeadConfig | None = None,
          warm_ckpt_path=None) -> MetricTimeline:
    """Full training run; writes metrics.jsonl, checkpoints/, timings.json."""
    if not scenes:
        raise TrainerError("corpus is empty")
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    bb_cfg = bb_cfg or BackboneConfig()
    head_cfg = head_cfg or DiffusionHeadConfig()
    streams = _streams(cfg.seed)
    model = UnifiedModel(streams["init"], spec, bb_cfg, head_cfg)
    digest = digest_for(spec, cfg, bb_cfg, head_cfg)

    if spec.warm_start_head:
        if warm_ckpt_path is not None:
            loaded = ckpt.load_checkpoint(warm_ckpt_path)
            ckpt.apply_tensors(model.diffusion.named_tensors(), loaded,
                               context="diffusion head warm start")
        else:
            warmup_pretrain(model.diffusion, warmup_dataset(scenes[:2000]),
                            cfg.warmup_steps, streams["warmup"],
                            num_classes=len(tw.SHAPES) * len(tw.COLORS))

    eval_scenes = tw.generate_corpus(cfg.eval_size, seed=cfg.seed + 0x5EED)
    eval_samples = [tw.make_sample(s) for s in eval_scenes]

    opt = nn.AdamW(model.named_params(), lr=cfg.lr, betas=cfg.betas,
                   weight_decay=cfg.weight_decay)
    steps = cfg.resolve_steps(len(scenes))
    timeline = MetricTimeline()
    metrics_path = run_dir / "metrics.jsonl"
    metrics_file = open(metrics_path, "w")
    last_ckpt = None
    t_start = time.monotonic()
    batch_rng, diff_rng = streams["batch"], streams["diffusion"]
    try:
        for step in range(steps):
            idx = batch_rng.integers(0, len(scenes), size=cfg.batch_size)
            batch = make_batch([tw.make_sample(scenes[i]) for i in idx], cfg, batch_rng)
            comps = model.forward_batch(batch, diff_rng)
            try:
                loss = total_loss(comps, spec, cfg)
            except TrainerError as e:
                T.tape().clear()
                raise TrainerError(f"{e} at step {step}; last checkpoint: {last_ckpt}")
            model.zero_grad()
            T.backward(loss)
            opt.step(nn.cosine_lr(step, steps, cfg.lr))
            model.update_target(cfg.ema_momentum)
            is_last = step == steps - 1
            if (step + 1) % cfg.eval_every == 0 or is_last:
                rec = {"step": step + 1,
                       "samples_seen": (step + 1) * cfg.batch_size,
                       "loss_text": round(float(comps["text"].data) + float(comps["zloss"].data), 6),
                       "loss_ploss": round(float(comps["ploss"].data), 6),
                       "loss_diffu": round(float(comps["diffu"].data), 6)}
                qa_limit = cfg.eval_qa_final if is_last else None
                rec.update(evaluate(model, eval_samples, cfg, cfg.seed, step + 1,
                                    qa_limit=qa_limit))
                rec["qa_accuracy"] = round(rec["qa_accuracy"], 6)
                rec["attribute_preservation"] = round(rec["attribute_preservation"], 6)
                timeline.append(rec)
                metrics_file.write(json.dumps(rec) + "\n")
                metrics_file.flush()
            if (cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0) or is_last:
                path = run_dir / "checkpoints" / f"step{step + 1:06d}.ckpt"
                ckpt.save_checkpoint(path, model.named_tensors(), digest)
                last_ckpt = path
    finally:
        metrics_file.close()
    (run_dir / "timings.json").write_text(json.dumps(
        {"wall_seconds": round(time.monotonic() - t_start, 3), "steps": steps}, indent=2))
    return timeline


def load_model(spec: ExperimentSpec, cfg: TrainConfig, ckpt_path,
               bb_cfg: BackboneConfig | None = None,
               head_cfg: DiffusionHeadConfig | None = None) -> UnifiedModel:
    """Rebuild a model and load checkpoint tensors, verifying the config digest."""
    bb_cfg = bb_cfg or BackboneConfig()
    head_cfg = head_cfg or DiffusionHeadConfig()
    digest = digest_for(spec, cfg, bb_cfg, head_cfg)
    loaded = ckpt.load_checkpoint(ckpt_path, expect_digest=digest)
    model = UnifiedModel(np.random.default_rng(0), spec, bb_cfg, head_cfg)
    ckpt.apply_tensors(model.named_tensors(), loaded, context="model load")
    return model
