"""Pre-norm encoder-only Transformer whose MLP sub-layers can be MoE layers.

Parameter names follow the checkpoint scheme: ``embed/tokens``,
``embed/positions``, ``block{i}/ln1/*``, ``block{i}/attn/*``,
``block{i}/ln2/*``, ``block{i}/mlp/*`` for dense blocks, and
``block{i}/expert{e}/*`` plus ``block{i}/router/W_r`` for MoE blocks,
then ``final_ln/*`` and ``head/*``.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..models.model_config import ModelConfig
from . import functional as F
from .errors import ContractError, DimensionError
from .layers import LN_EPS, attention_block, mlp_block, scope
from .rng import RngState
from .routing import (
    RoutingDecision,
    combine_weights,
    dispatch_combine,
    expert_capacity,
    group_bounds,
    load_balancing_loss,
    normalize_combine_weights,
    route,
    router_probs,
    routing_stats,
)
from .tensor import Tensor

__all__ = [
    "MLP_TENSORS",
    "ForwardOutput",
    "Transformer",
    "param_shapes",
    "param_count",
    "init_params",
    "init_mlp",
    "init_router",
    "forward",
    "count_flops",
    "mlp_flops",
]

logger = logging.getLogger(__name__)

MLP_TENSORS = ("W_in", "b_in", "W_out", "b_out")
HEAD_PREFIX = "head/"


def _mlp_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    return {
        "W_in": (cfg.d_model, cfg.d_ff),
        "b_in": (cfg.d_ff,),
        "W_out": (cfg.d_ff, cfg.d_model),
        "b_out": (cfg.d_model,),
    }


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Canonical, ordered name → shape map of every parameter."""
    d = cfg.d_model
    shapes: Dict[str, Tuple[int, ...]] = {
        "embed/tokens": (cfg.vocab_size, d),
        "embed/positions": (cfg.seq_len, d),
    }
    for layer in range(cfg.num_layers):
        prefix = f"block{layer}/"
        shapes[prefix + "ln1/gain"] = (d,)
        shapes[prefix + "ln1/bias"] = (d,)
        for name in ("q", "k", "v", "o"):
            shapes[prefix + f"attn/W_{name}"] = (d, d)
            shapes[prefix + f"attn/b_{name}"] = (d,)
        shapes[prefix + "ln2/gain"] = (d,)
        shapes[prefix + "ln2/bias"] = (d,)
        if cfg.is_moe(layer):
            for expert in range(cfg.num_experts):
                for name, shape in _mlp_shapes(cfg).items():
                    shapes[prefix + f"expert{expert}/{name}"] = shape
            shapes[prefix + "router/W_r"] = (d, cfg.num_experts)
        else:
            for name, shape in _mlp_shapes(cfg).items():
                shapes[prefix + f"mlp/{name}"] = shape
    shapes["final_ln/gain"] = (d,)
    shapes["final_ln/bias"] = (d,)
    shapes["head/W"] = (d, cfg.vocab_size)
    shapes["head/b"] = (cfg.vocab_size,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(shape, dtype=np.int64) for shape in param_shapes(cfg).values()))


def _init_tensor(name: str, shape: Tuple[int, ...], rng: RngState, embed_stddev: float) -> np.ndarray:
    leaf = name.rsplit("/", 1)[-1]
    if leaf.startswith("b_") or leaf in ("bias", "b"):
        return np.zeros(shape, dtype=np.float32)
    if leaf == "gain":
        return np.ones(shape, dtype=np.float32)
    if name.startswith("embed/"):
        return rng.normal(shape, embed_stddev, "init", name)
    return rng.normal(shape, 1.0 / np.sqrt(shape[0]), "init", name)


def init_mlp(cfg: ModelConfig, prefix: str, rng: RngState) -> Dict[str, np.ndarray]:
    """Fresh MLP tensors named ``{prefix}{W_in,b_in,W_out,b_out}``."""
    return {
        prefix + name: _init_tensor(prefix + name, shape, rng, 0.0)
        for name, shape in _mlp_shapes(cfg).items()
    }


def init_router(cfg: ModelConfig, layer: int, rng: RngState, stddev: float) -> np.ndarray:
    return rng.normal((cfg.d_model, cfg.num_experts), stddev, "router", layer)


def init_params(cfg: ModelConfig, rng: RngState, router_stddev: float = 0.02, embed_stddev: float = 0.02) -> Dict[str, np.ndarray]:
    """Fresh parameters; each tensor draws from its own named stream."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("router/W_r"):
            layer = int(name.split("/")[0][len("block"):])
            params[name] = init_router(cfg, layer, rng, router_stddev)
        else:
            params[name] = _init_tensor(name, shape, rng, embed_stddev)
    return params


@dataclass
class LayerRouting:
    layer: int
    decision: RoutingDecision
    stats: Dict[str, object]


@dataclass
class ForwardOutput:
    logits: Tensor
    pooled: Tensor
    final_states: Tensor
    masked_logits: Optional[Tensor] = None
    aux_losses: List[Tensor] = field(default_factory=list)
    routing: List[LayerRouting] = field(default_factory=list)
    hidden: List[np.ndarray] = field(default_factory=list)


class Transformer:
    """A model configuration bound to a parameter map."""

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray]):
        expected = param_shapes(config)
        missing = [name for name in expected if name not in params]
        if missing:
            raise ContractError(f"missing parameters: {', '.join(missing[:5])}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise DimensionError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, rng: RngState, router_stddev: float = 0.02) -> "Transformer":
        return cls(config, init_params(config, rng, router_stddev))

    def tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {name: Tensor(value, requires_grad=requires_grad, name=name) for name, value in self.params.items()}

    def forward(
        self,
        tokens: np.ndarray,
        params: Optional[Dict[str, Tensor]] = None,
        positions: Optional[np.ndarray] = None,
        collect_hidden: bool = False,
    ) -> ForwardOutput:
        return forward(self.config, params if params is not None else self.tensors(), tokens, positions, collect_hidden)


def _moe_layer(cfg: ModelConfig, p: Dict[str, Tensor], flat: Tensor, layer: int):
    probs = router_probs(flat, p["router/W_r"])
    decision = route(probs.data, cfg.router, cfg.capacity_factor, cfg.group_size, cfg.k, cfg.bpr)
    weights = combine_weights(probs, decision, cfg.normalize_weights)
    if cfg.normalize_weights:
        decision = normalize_combine_weights(decision)
    experts = [scope(p, f"expert{e}/") for e in range(cfg.num_experts)]
    output = dispatch_combine(flat, decision, experts, weights)
    aux = load_balancing_loss(probs, decision) if cfg.router == "top_k" else None
    return output, aux, LayerRouting(layer, decision, routing_stats(decision))


def forward(
    cfg: ModelConfig,
    params: Dict[str, Tensor],
    tokens: np.ndarray,
    positions: Optional[np.ndarray] = None,
    collect_hidden: bool = False,
) -> ForwardOutput:
    """Embed, run the blocks, pool, apply the head.

    ``positions`` (flat indices into batch x seq) additionally produces
    per-token logits for those positions, used by the masked-token loss.
    One auxiliary loss is returned per Top-K MoE layer.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be batch x seq, got shape {tokens.shape}")
    batch, length = tokens.shape
    if length > cfg.seq_len:
        raise ContractError(f"sequence length {length} exceeds seq_len={cfg.seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ContractError(f"token id out of range [0, {cfg.vocab_size})")

    width = cfg.d_model
    x = F.reshape(F.gather_rows(params["embed/tokens"], tokens.reshape(-1)), (batch, length, width))
    x = F.add(x, F.gather_rows(params["embed/positions"], np.arange(length)))

    aux_losses: List[Tensor] = []
    routing: List[LayerRouting] = []
    hidden: List[np.ndarray] = []
    for layer in range(cfg.num_layers):
        p = scope(params, f"block{layer}/")
        x = attention_block(x, p, cfg.num_heads)
        flat = F.reshape(F.layer_norm(x, p["ln2/gain"], p["ln2/bias"], LN_EPS), (batch * length, width))
        if cfg.is_moe(layer):
            update, aux, layer_routing = _moe_layer(cfg, p, flat, layer)
            routing.append(layer_routing)
            if aux is not None:
                aux_losses.append(aux)
        else:
            update = mlp_block(flat, scope(p, "mlp/"))
        x = F.add(x, F.reshape(update, (batch, length, width)))
        if collect_hidden:
            hidden.append(x.data.copy())

    final = F.layer_norm(x, params["final_ln/gain"], params["final_ln/bias"], LN_EPS)
    pooled = F.mean(final, axis=1)
    logits = F.add(F.matmul(pooled, params["head/W"]), params["head/b"])

    masked_logits = None
    if positions is not None:
        picked = F.gather_rows(F.reshape(final, (batch * length, width)), positions)
        masked_logits = F.add(F.matmul(picked, params["head/W"]), params["head/b"])

    return ForwardOutput(
        logits=logits,
        pooled=pooled,
        final_states=final,
        masked_logits=masked_logits,
        aux_losses=aux_losses,
        routing=routing,
        hidden=hidden,
    )


def mlp_flops(cfg: ModelConfig, layer: int, batch_shape: Tuple[int, int]) -> float:
    """FLOPs of one MLP sub-layer (router included for MoE layers)."""
    batch, length = batch_shape
    num_tokens = batch * length
    dense = 4.0 * num_tokens * cfg.d_model * cfg.d_ff
    if not cfg.is_moe(layer):
        return dense
    router = 2.0 * num_tokens * cfg.d_model * cfg.num_experts
    processed = 0
    for start, stop in group_bounds(num_tokens, cfg.group_size):
        capacity = expert_capacity(cfg.capacity_factor, stop - start, cfg.num_experts)
        if cfg.router == "expert_choice":
            capacity = min(capacity, stop - start)
        processed += cfg.num_experts * capacity
    return router + 4.0 * processed * cfg.d_model * cfg.d_ff


def count_flops(cfg: ModelConfig, batch_shape: Tuple[int, int]) -> float:
    """Analytic forward FLOPs: 2·m·k·n per matmul, summed over layers.

    Expert FLOPs count every capacity slot, so an MoE layer costs about C
    times the dense MLP plus the router.
    """
    batch, length = batch_shape
    num_tokens = batch * length
    d = cfg.d_model
    total = 0.0
    for layer in range(cfg.num_layers):
        projections = 4 * 2.0 * num_tokens * d * d
        scores_and_mix = 2 * 2.0 * batch * length * length * d
        total += projections + scores_and_mix + mlp_flops(cfg, layer, batch_shape)
    total += 2.0 * num_tokens * d * cfg.vocab_size + 2.0 * batch * d * cfg.vocab_size
    return total
