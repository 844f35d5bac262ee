"""Experiment and training configuration dataclasses plus the ablation matrices."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from .projectors import (LOSS_COSINE, LOSS_MSE, TARGET_EMBED, TARGET_VISION,
                         TARGETS, VARIANT_DIFFUSION, VARIANT_EMA_MLP1,
                         VARIANT_MLP1, VARIANT_MLP3NORM, VARIANTS)

GATE_NONE = "none"
GATE_BLOCK_DIFFU = "block_diffu_to_backbone"

TARGET_MODE_EMA = "ema"
TARGET_MODE_STOPGRAD = "stopgrad"


@dataclass(frozen=True)
class ExperimentSpec:
    """One row of an ablation matrix: loss switches, gating, variant axes."""

    id: str
    ploss_on: bool
    diffuloss_on: bool
    gating: str = GATE_NONE
    warm_start_head: bool = False
    variant: str = VARIANT_EMA_MLP1
    regression_target: str = TARGET_EMBED
    regression_loss: str = LOSS_COSINE
    target_mode: str = TARGET_MODE_EMA

    def __post_init__(self):
        if self.gating not in (GATE_NONE, GATE_BLOCK_DIFFU):
            raise ValueError(f"unknown gating {self.gating!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown invert-projector variant {self.variant!r}")
        if self.regression_target not in TARGETS:
            raise ValueError(f"unknown regression target {self.regression_target!r}")
        if self.regression_loss not in (LOSS_COSINE, LOSS_MSE):
            raise ValueError(f"unknown regression loss {self.regression_loss!r}")
        if self.variant == VARIANT_DIFFUSION and self.regression_loss == LOSS_COSINE:
            raise ValueError("diffusion-head invert projector pairs with mse, not cosine")
        if self.target_mode not in (TARGET_MODE_EMA, TARGET_MODE_STOPGRAD):
            raise ValueError(f"unknown target mode {self.target_mode!r}")
        fixed = {"exp1": (False, False, GATE_NONE, False),
                 "exp2": (True, True, GATE_BLOCK_DIFFU, False),
                 "exp3": (True, True, GATE_NONE, False),
                 "exp4": (True, True, GATE_NONE, True)}
        if self.id in fixed:
            want = fixed[self.id]
            got = (self.ploss_on, self.diffuloss_on, self.gating, self.warm_start_head)
            if got != want:
                raise ValueError(f"{self.id} switches {got} violate the ablation matrix {want}")

    def to_dict(self) -> dict:
        return asdict(self)


def table1_specs() -> list[ExperimentSpec]:
    return [
        ExperimentSpec("exp1", ploss_on=False, diffuloss_on=False),
        ExperimentSpec("exp2", ploss_on=True, diffuloss_on=True, gating=GATE_BLOCK_DIFFU),
        ExperimentSpec("exp3", ploss_on=True, diffuloss_on=True),
        ExperimentSpec("exp4", ploss_on=True, diffuloss_on=True, warm_start_head=True),
    ]


def table2_specs() -> list[ExperimentSpec]:
    common = dict(ploss_on=True, diffuloss_on=True)
    return [
        ExperimentSpec("diffu-mse", variant=VARIANT_DIFFUSION,
                       regression_target=TARGET_VISION, regression_loss=LOSS_MSE, **common),
        ExperimentSpec("mlp-mse", variant=VARIANT_MLP1,
                       regression_target=TARGET_VISION, regression_loss=LOSS_MSE, **common),
        ExperimentSpec("mlp-cos", variant=VARIANT_MLP1,
                       regression_target=TARGET_VISION, regression_loss=LOSS_COSINE, **common),
        ExperimentSpec("norm-3-mlp-cos", variant=VARIANT_MLP3NORM,
                       regression_target=TARGET_VISION, regression_loss=LOSS_COSINE, **common),
        ExperimentSpec("ema-mlp-llm-cos", variant=VARIANT_EMA_MLP1,
                       regression_target=TARGET_EMBED, regression_loss=LOSS_COSINE, **common),
    ]


def spec_by_id(spec_id: str) -> ExperimentSpec:
    for s in table1_specs() + table2_specs():
        if s.id == spec_id:
            return s
    raise KeyError(f"unknown experiment id {spec_id!r}")


@dataclass
class TrainConfig:
    alpha: float = 10.0
    beta: float = 10.0
    mask_mean: float = 0.7
    mask_std: float = 0.15
    mask_clamp: tuple = (0.05, 1.0)
    lr: float = 3e-3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.95)
    batch_size: int = 32
    steps: int | None = None      # default: 3 * corpus / batch
    seed: int = 0
    gen_fraction: float = 0.5
    # chance an understanding sample omits its caption. Kept captions teach
    # image->caption decoding (the round-trip path); dropped ones keep the
    # caption-free QA prompt in distribution. 0.25 keeps caption-start the
    # argmax continuation after an image span, which greedy round-trip
    # decoding relies on; at 0.5 the question mark ties with it.
    caption_drop: float = 0.25
    ema_momentum: float = 0.99
    eval_every: int = 250
    ckpt_every: int = 0           # 0: final checkpoint only
    eval_qa: int = 256
    # question budget for the last eval only; the final row is the reported
    # number, so it can afford a lower-noise estimate than the periodic evals
    # that merely trace the timeline. None: same as eval_qa.
    eval_qa_final: int | None = None
    eval_roundtrips: int = 8
    eval_size: int = 512          # held-out scenes derived from the seed
    warmup_steps: int = 400       # diffusion-head warm-up for experiments that ask for it

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.mask_mean < 1.0:
            raise ValueError("mask_mean must lie in (0, 1)")
        if not 0.0 <= self.gen_fraction <= 1.0:
            raise ValueError("gen_fraction must lie in [0, 1]")
        self.betas = tuple(self.betas)
        self.mask_clamp = tuple(self.mask_clamp)

    def resolve_steps(self, corpus_size: int) -> int:
        if self.steps is not None:
            return self.steps
        return max(1, (3 * corpus_size + self.batch_size - 1) // self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)
