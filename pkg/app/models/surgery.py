from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..config import config
from .model_config import RouterType


class LayerStrategy(BaseModel):
    """Which dense blocks become MoE blocks.

    Text forms: ``every-other`` (every other layer from the second),
    ``last:K``, ``first:K`` and ``list:1,3,5``.
    """

    kind: Literal["every_other_from_second", "last_k", "explicit"]
    k: int = 0
    layers: List[int] = Field(default_factory=list)

    @classmethod
    def parse(cls, text: str) -> "LayerStrategy":
        text = text.strip()
        name, _, argument = text.partition(":")
        name = name.replace("_", "-").lower()
        try:
            if name in ("every-other", "every-other-from-second"):
                return cls(kind="every_other_from_second")
            if name in ("last", "last-k"):
                return cls(kind="last_k", k=int(argument))
            if name in ("first", "first-k"):
                return cls(kind="explicit", layers=list(range(int(argument))))
            if name in ("list", "explicit"):
                layers = [int(item) for item in argument.split(",") if item.strip()]
                return cls(kind="explicit", layers=layers)
        except ValueError as e:
            raise ValueError(f"invalid layer strategy {text!r}: {e}") from e
        raise ValueError(f"unknown layer strategy {text!r}; expected every-other, last:K, first:K or list:I,J")

    @field_validator("k")
    @classmethod
    def _non_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError("k must be non-negative")
        return value

    def describe(self) -> str:
        if self.kind == "every_other_from_second":
            return "every-other"
        if self.kind == "last_k":
            return f"last:{self.k}"
        return "list:" + ",".join(str(layer) for layer in self.layers)


class UpcycleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layer_strategy: LayerStrategy = Field(default_factory=lambda: LayerStrategy(kind="every_other_from_second"))
    num_experts: int = Field(default_factory=lambda: config.NUM_EXPERTS, ge=1)
    router: RouterType = "expert_choice"
    k: int = Field(default_factory=lambda: config.TOP_K, ge=1)
    capacity_factor: float = Field(default_factory=lambda: config.CAPACITY_FACTOR, gt=0)
    group_size: int = Field(default_factory=lambda: config.GROUP_SIZE, ge=1)
    normalize_weights: bool = Field(default_factory=lambda: config.NORMALIZE_WEIGHTS)
    bpr: bool = Field(default_factory=lambda: config.BATCH_PRIORITIZED_ROUTING)
    aux_loss_factor: Optional[float] = Field(None, ge=0)
    router_init_stddev: float = Field(default_factory=lambda: config.ROUTER_INIT_STDDEV, ge=0)
    expert_noise_stddev: float = Field(0.0, ge=0)
    router_noise_stddev: float = Field(0.0, ge=0)
    resume_optimizer_state: bool = False
    load_experts: bool = True
    seed: int = Field(default_factory=lambda: config.DEFAULT_SEED, ge=0)
    test_mode: bool = False

    @field_validator("layer_strategy", mode="before")
    @classmethod
    def _parse_strategy(cls, value):
        if isinstance(value, str):
            return LayerStrategy.parse(value)
        return value

    @model_validator(mode="after")
    def _check_experts(self) -> "UpcycleConfig":
        if self.num_experts < 2 and not self.test_mode:
            raise ValueError("upcycling needs num_experts >= 2")
        if self.router == "top_k" and self.k > self.num_experts:
            raise ValueError(f"k={self.k} exceeds num_experts={self.num_experts}")
        return self


class SurgeryReport(BaseModel):
    layers_converted: List[int]
    params_before: int
    params_after: int
    tensors_copied: int
    tensors_created: int
    optimizer_slots_copied: int
    optimizer_slots_created: int
    num_experts: int
    router: RouterType
