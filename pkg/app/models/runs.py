"""Resolved configuration of each CLI subcommand.

A run config is built from an optional YAML file overlaid with command-line
flags; unknown keys are rejected.
"""

from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..config import config
from .model_config import ModelConfig, RouterType
from .surgery import UpcycleConfig
from .training import ARM_ORDER, GridPoint, TaskConfig, TrainConfig


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    run_dir: Optional[str] = None


class TrainRun(RunConfig):
    checkpoint: Optional[str] = None
    fresh: bool = False
    out: str = "model.ckpt"
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    task: TaskConfig = Field(default_factory=TaskConfig)

    @model_validator(mode="after")
    def _one_start(self) -> "TrainRun":
        if self.fresh == (self.checkpoint is not None):
            raise ValueError("give exactly one of --checkpoint or --fresh")
        if self.model.is_sparse and self.fresh:
            raise ValueError("--fresh builds a dense model; moe_layers must be empty")
        return self


class UpcycleRun(RunConfig):
    checkpoint: str
    out: str = "upcycled.ckpt"
    upcycle: UpcycleConfig = Field(default_factory=UpcycleConfig)


class VerifyRun(RunConfig):
    dense: str
    sparse: str
    batches: int = Field(16, ge=1)
    batch_size: int = Field(default_factory=lambda: config.BATCH_SIZE, ge=1)
    seed: int = Field(default_factory=lambda: config.DEFAULT_SEED, ge=0)
    tolerance: float = Field(1e-5, gt=0)


class CompareRun(RunConfig):
    checkpoint: str
    extra_steps: int = Field(default_factory=lambda: config.EXTRA_STEPS, ge=0)
    arms: List[str] = Field(default_factory=lambda: list(config.COMPARISON_ARMS))
    seeds: List[int] = Field(default_factory=lambda: list(range(config.PROBE_SEEDS)))
    tile_layers: int = Field(default_factory=lambda: config.TILE_LAYERS, ge=1)
    budget_multiplier: Optional[int] = Field(None, ge=2)
    save_checkpoints: bool = False
    upcycle: UpcycleConfig = Field(default_factory=UpcycleConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    task: TaskConfig = Field(default_factory=TaskConfig)

    @model_validator(mode="after")
    def _known_arms(self) -> "CompareRun":
        unknown = [arm for arm in self.arms if arm not in ARM_ORDER]
        if unknown:
            raise ValueError(f"unknown arm(s) {unknown}; expected a subset of {list(ARM_ORDER)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        return self


class InitAnalysisRun(RunConfig):
    checkpoint: str
    grid: List[GridPoint] = Field(default_factory=list)
    batch_size: int = Field(default_factory=lambda: config.BATCH_SIZE, ge=1)
    seed: int = Field(default_factory=lambda: config.DEFAULT_SEED, ge=0)
    task: TaskConfig = Field(default_factory=TaskConfig)

    @model_validator(mode="after")
    def _non_empty(self) -> "InitAnalysisRun":
        if not self.grid:
            raise ValueError("the grid is empty; pass --grid with a preset name or list points in the config file")
        return self


class RouteStatsRun(RunConfig):
    router: RouterType = "expert_choice"
    capacity_factor: float = Field(default_factory=lambda: config.CAPACITY_FACTOR, gt=0)
    num_experts: int = Field(default_factory=lambda: config.NUM_EXPERTS, ge=1)
    num_tokens: int = Field(64, ge=1)
    group_size: Optional[int] = Field(None, ge=1)
    k: int = Field(1, ge=1)
    bpr: bool = False
    normalize_weights: bool = True
    seeds: int = Field(100, ge=1)
    logit_stddev: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _k_fits(self) -> "RouteStatsRun":
        if self.router == "top_k" and self.k > self.num_experts:
            raise ValueError(f"k={self.k} exceeds num_experts={self.num_experts}")
        return self


class ProbeRun(RunConfig):
    checkpoint: str
    l2: float = Field(default_factory=lambda: config.PROBE_L2, gt=0)
    seeds: int = Field(default_factory=lambda: config.PROBE_SEEDS, ge=1)
    sequences: int = Field(256, ge=2)
    task: TaskConfig = Field(default_factory=TaskConfig)


class InspectRun(RunConfig):
    checkpoint: str


class RunsRun(RunConfig):
    limit: int = Field(20, ge=1)
    subcommand: Optional[str] = None
    run_id: Optional[int] = Field(None, ge=1)
