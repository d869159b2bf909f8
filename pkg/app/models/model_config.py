from typing import List, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator

from ..config import config

RouterType = Literal["expert_choice", "top_k"]


def _model_default(key: str):
    return lambda: config.get_model_defaults()[key]


class ModelConfig(BaseModel):
    """Shape and routing knobs of the encoder.

    ``moe_layers`` empty means a dense model. Validating with
    ``context={"test_mode": True}`` allows a single expert.
    """

    model_config = ConfigDict(extra="forbid")

    num_layers: int = Field(default_factory=_model_default("num_layers"), ge=0)
    d_model: int = Field(default_factory=_model_default("d_model"), ge=1)
    d_ff: int = Field(default_factory=_model_default("d_ff"), ge=1)
    num_heads: int = Field(default_factory=_model_default("num_heads"), ge=1)
    vocab_size: int = Field(default_factory=_model_default("vocab_size"), ge=3)
    seq_len: int = Field(default_factory=_model_default("seq_len"), ge=1)
    moe_layers: List[int] = Field(default_factory=list)
    num_experts: int = Field(default_factory=_model_default("num_experts"), ge=1)
    router: RouterType = "expert_choice"
    k: int = Field(default_factory=_model_default("k"), ge=1)
    capacity_factor: float = Field(default_factory=_model_default("capacity_factor"), gt=0)
    group_size: int = Field(default_factory=_model_default("group_size"), ge=1)
    normalize_weights: bool = Field(default_factory=_model_default("normalize_weights"))
    bpr: bool = Field(default_factory=_model_default("bpr"))
    aux_loss_factor: float = Field(default_factory=_model_default("aux_loss_factor"), ge=0)

    @field_validator("moe_layers")
    @classmethod
    def _canonical_layers(cls, value: List[int]) -> List[int]:
        if len(set(value)) != len(value):
            raise ValueError(f"moe_layers contains duplicates: {value}")
        return sorted(value)

    @model_validator(mode="after")
    def _check_invariants(self, info: ValidationInfo) -> "ModelConfig":
        test_mode = bool(info.context and info.context.get("test_mode"))
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        outside = [layer for layer in self.moe_layers if not 0 <= layer < self.num_layers]
        if outside:
            raise ValueError(f"moe_layers {outside} outside [0, {self.num_layers})")
        if self.moe_layers and self.num_experts < 2 and not test_mode:
            raise ValueError("MoE layers need num_experts >= 2")
        if self.router == "top_k" and self.k > self.num_experts:
            raise ValueError(f"k={self.k} exceeds num_experts={self.num_experts}")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads

    @property
    def is_sparse(self) -> bool:
        return bool(self.moe_layers)

    @property
    def mask_token(self) -> int:
        """Sentinel id reserved for masked positions."""
        return self.vocab_size - 1

    def is_moe(self, layer: int) -> bool:
        return layer in self.moe_layers

    def mlp_param_count(self) -> int:
        return 2 * self.d_model * self.d_ff + self.d_ff + self.d_model

    def dense(self) -> "ModelConfig":
        return self.model_copy(update={"moe_layers": []})
