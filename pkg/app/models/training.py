from typing import ClassVar, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..config import config
from .model_config import RouterType

ArmName = Literal["dense_continue", "upcycle", "moe_scratch", "depth_tile"]
ARM_ORDER = ("dense_continue", "upcycle", "moe_scratch", "depth_tile")


class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    peak_lr: float = Field(default_factory=lambda: config.PEAK_LR, ge=0)
    warmup_steps: int = Field(default_factory=lambda: config.WARMUP_STEPS, ge=0)
    decay: Literal["inverse_sqrt_timescale", "inverse_sqrt_plain"] = "inverse_sqrt_timescale"
    timescale: int = Field(default_factory=lambda: config.DECAY_TIMESCALE, gt=0)
    cooldown_start: Optional[int] = Field(None, ge=0)
    cooldown_end: Optional[int] = Field(None, ge=0)
    weight_decay_head: float = Field(default_factory=lambda: config.WEIGHT_DECAY_HEAD, ge=0)
    weight_decay_body: float = Field(default_factory=lambda: config.WEIGHT_DECAY_BODY, ge=0)

    @model_validator(mode="after")
    def _check_cooldown(self) -> "ScheduleConfig":
        if (self.cooldown_start is None) != (self.cooldown_end is None):
            raise ValueError("cooldown_start and cooldown_end must be given together")
        if self.cooldown_start is not None and self.cooldown_end <= self.cooldown_start:
            raise ValueError("cooldown_end must come after cooldown_start")
        return self


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    decay_exponent: float = Field(default_factory=lambda: config.ADAFACTOR_DECAY_EXPONENT, gt=0)
    eps: float = Field(default_factory=lambda: config.ADAFACTOR_EPS, gt=0)
    clip_threshold: float = Field(default_factory=lambda: config.ADAFACTOR_CLIP_THRESHOLD, gt=0)
    beta1: Optional[float] = Field(None, ge=0, lt=1)


class TaskConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default_factory=lambda: config.DEFAULT_SEED, ge=0)
    num_clusters: int = Field(default_factory=lambda: config.NUM_CLUSTERS, ge=1)
    vocab_size: int = Field(default_factory=lambda: config.MODEL_VOCAB_SIZE, ge=3)
    seq_len: int = Field(default_factory=lambda: config.MODEL_SEQ_LEN, ge=1)
    mask_fraction: float = Field(default_factory=lambda: config.MASK_FRACTION, ge=0, lt=1)
    concentration: float = Field(default_factory=lambda: config.TRANSITION_CONCENTRATION, gt=0)
    uniform: bool = False
    eval_tokens: int = Field(default_factory=lambda: config.EVAL_TOKENS, ge=1)


class TrainConfig(BaseModel):
    """One training run: arm label, budget, data seed and evaluation cadence."""

    model_config = ConfigDict(extra="forbid")

    arm: str = "dense_continue"
    seed: int = Field(default_factory=lambda: config.DEFAULT_SEED, ge=0)
    steps: int = Field(default_factory=lambda: config.EXTRA_STEPS, ge=0)
    batch_size: int = Field(default_factory=lambda: config.BATCH_SIZE, ge=1)
    eval_every: int = Field(default_factory=lambda: config.EVAL_EVERY, ge=1)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)


class MetricsRow(BaseModel):
    arm: str
    seed: int
    step: int
    train_loss: Optional[float] = None
    eval_loss: float
    eval_acc: float
    cum_flops: float
    elapsed_seconds: float

    CSV_COLUMNS: ClassVar[Tuple[str, ...]] = ("arm", "seed", "step", "train_loss", "eval_loss", "eval_acc", "cum_flops", "elapsed_seconds")

    def csv_values(self) -> list:
        train_loss = "" if self.train_loss is None else f"{self.train_loss:.6f}"
        return [
            self.arm,
            self.seed,
            self.step,
            train_loss,
            f"{self.eval_loss:.6f}",
            f"{self.eval_acc:.6f}",
            f"{self.cum_flops:.0f}",
            f"{self.elapsed_seconds:.3f}",
        ]


class GridPoint(BaseModel):
    """One upcycling configuration evaluated without training."""

    model_config = ConfigDict(extra="forbid")

    router: RouterType = "expert_choice"
    capacity_factor: float = Field(default_factory=lambda: config.CAPACITY_FACTOR, gt=0)
    group_size: int = Field(default_factory=lambda: config.GROUP_SIZE, ge=1)
    num_experts: int = Field(default_factory=lambda: config.NUM_EXPERTS, ge=2)
    layer_strategy: str = "every-other"
    normalize_weights: bool = True
    k: int = Field(default_factory=lambda: config.TOP_K, ge=1)
