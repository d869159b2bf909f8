"""Token-to-expert routing: router probabilities, Expert Choice and Top-K
assignment under a capacity budget, combine weights, dispatch and the
load-balancing loss.

Tokens are partitioned into contiguous groups of at most ``group_size``;
each group gets its own budget ``T = floor(C * n_group / E)``. Ties in every
top selection go to the lower token (or expert) index.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .errors import ConfigurationError, ContractError, DimensionError
from .layers import Params, mlp_block
from .tensor import Tensor

__all__ = [
    "RoutingDecision",
    "router_probs",
    "expert_capacity",
    "group_bounds",
    "expert_choice_route",
    "top_k_route",
    "route",
    "normalize_combine_weights",
    "combine_weights",
    "dispatch_combine",
    "load_balancing_loss",
    "routing_stats",
]


@dataclass
class RoutingDecision:
    router: str
    combine: np.ndarray
    assigned: np.ndarray
    expert_tokens: List[np.ndarray]
    capacities: List[int]
    groups: List[Tuple[int, int]]
    top1: Optional[np.ndarray] = None
    stats: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_tokens(self) -> int:
        return self.combine.shape[0]

    @property
    def num_experts(self) -> int:
        return self.combine.shape[1]

    @property
    def capacity(self) -> int:
        """Budget of the first (largest) group."""
        return self.capacities[0] if self.capacities else 0

    @property
    def dropped_mask(self) -> np.ndarray:
        return ~self.assigned.any(axis=1)

    def assignments(self, token: int) -> List[Tuple[int, float]]:
        experts = np.flatnonzero(self.assigned[token])
        return [(int(e), float(self.combine[token, e])) for e in experts]


def router_probs(x: Tensor, w_router: Tensor) -> Tensor:
    """Row-wise softmax(x W_r): one distribution over experts per token."""
    if x.ndim != 2 or w_router.ndim != 2 or x.shape[1] != w_router.shape[0]:
        raise DimensionError(f"router shapes {x.shape} x {w_router.shape} are inconsistent")
    return F.softmax(F.matmul(x, w_router))


def expert_capacity(capacity_factor: float, num_tokens: int, num_experts: int) -> int:
    # tolerance keeps exact products like 0.5 * 64 / 32 from flooring below 1
    return int(math.floor(capacity_factor * num_tokens / num_experts + 1e-9))


def group_bounds(num_tokens: int, group_size: int) -> List[Tuple[int, int]]:
    if group_size < 1:
        raise ConfigurationError(f"group size must be >= 1, got {group_size}")
    return [(start, min(start + group_size, num_tokens)) for start in range(0, num_tokens, group_size)]


def _as_array(probs) -> np.ndarray:
    array = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if array.ndim != 2:
        raise DimensionError(f"router probabilities must be n x E, got shape {array.shape}")
    return array


def _stats(probs: np.ndarray, assigned: np.ndarray, top1: Optional[np.ndarray]) -> Dict[str, np.ndarray]:
    num_tokens, num_experts = probs.shape
    if top1 is not None:
        load = np.bincount(top1, minlength=num_experts) / max(num_tokens, 1)
    else:
        counts = assigned.sum(axis=0)
        load = counts / max(counts.sum(), 1)
    return {"load_fraction": load.astype(np.float64), "mean_prob": probs.mean(axis=0).astype(np.float64)}


def expert_choice_route(probs, capacity_factor: float, group_size: int) -> RoutingDecision:
    """Each expert takes the T most probable tokens of every group."""
    probs = _as_array(probs)
    num_tokens, num_experts = probs.shape
    assigned = np.zeros(probs.shape, dtype=bool)
    selections: List[List[np.ndarray]] = [[] for _ in range(num_experts)]
    capacities, groups = [], group_bounds(num_tokens, group_size)

    for start, stop in groups:
        capacity = expert_capacity(capacity_factor, stop - start, num_experts)
        if capacity == 0:
            raise ConfigurationError(
                f"expert capacity is 0 (C={capacity_factor}, n={stop - start}, E={num_experts}); "
                f"increase the capacity factor or the group size"
            )
        capacity = min(capacity, stop - start)
        capacities.append(capacity)
        for expert in range(num_experts):
            chosen = np.argsort(-probs[start:stop, expert], kind="stable")[:capacity] + start
            assigned[chosen, expert] = True
            selections[expert].append(chosen)

    expert_tokens = [np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64) for parts in selections]
    return RoutingDecision(
        router="expert_choice",
        combine=np.where(assigned, probs, 0.0).astype(probs.dtype),
        assigned=assigned,
        expert_tokens=expert_tokens,
        capacities=capacities,
        groups=groups,
        stats=_stats(probs, assigned, None),
    )


def top_k_route(probs, k: int, capacity_factor: float, bpr: bool, group_size: int) -> RoutingDecision:
    """Tokens propose their K most probable experts into fixed-size buffers.

    All first choices are placed before any second choice. Within a rank,
    tokens go in index order, or by descending max probability with BPR.
    A proposal that finds its buffer full is dropped on its own.
    """
    probs = _as_array(probs)
    num_tokens, num_experts = probs.shape
    if k > num_experts:
        raise ConfigurationError(f"K={k} exceeds the number of experts E={num_experts}")
    if k < 1:
        raise ConfigurationError(f"K must be >= 1, got {k}")

    assigned = np.zeros(probs.shape, dtype=bool)
    selections: List[List[int]] = [[] for _ in range(num_experts)]
    top1 = np.zeros(num_tokens, dtype=np.int64)
    capacities, groups = [], group_bounds(num_tokens, group_size)

    for start, stop in groups:
        block = probs[start:stop]
        capacity = expert_capacity(capacity_factor, stop - start, num_experts)
        capacities.append(capacity)
        ranked = np.argsort(-block, axis=1, kind="stable")[:, :k]
        top1[start:stop] = ranked[:, 0]
        order = np.argsort(-block.max(axis=1), kind="stable") if bpr else np.arange(stop - start)
        fill = np.zeros(num_experts, dtype=np.int64)
        for rank in range(k):
            for token in order:
                expert = ranked[token, rank]
                if fill[expert] < capacity:
                    fill[expert] += 1
                    assigned[start + token, expert] = True
                    selections[expert].append(start + token)

    return RoutingDecision(
        router="top_k",
        combine=np.where(assigned, probs, 0.0).astype(probs.dtype),
        assigned=assigned,
        expert_tokens=[np.asarray(tokens, dtype=np.int64) for tokens in selections],
        capacities=capacities,
        groups=groups,
        top1=top1,
        stats=_stats(probs, assigned, top1),
    )


def route(probs, router: str, capacity_factor: float, group_size: int, k: int = 1, bpr: bool = False) -> RoutingDecision:
    if router == "expert_choice":
        return expert_choice_route(probs, capacity_factor, group_size)
    if router == "top_k":
        return top_k_route(probs, k, capacity_factor, bpr, group_size)
    raise ConfigurationError(f"unknown router type {router!r}")


def normalize_combine_weights(decision: RoutingDecision) -> RoutingDecision:
    """Scale each token's weights to sum to 1; unrouted tokens stay at 0."""
    totals = decision.combine.sum(axis=1, keepdims=True)
    safe = np.where(totals > 0, totals, 1.0)
    return replace(decision, combine=(decision.combine / safe).astype(decision.combine.dtype))


def combine_weights(probs: Tensor, decision: RoutingDecision, normalize: bool) -> Tensor:
    """Differentiable counterpart of ``decision.combine`` built from ``probs``."""
    mask = Tensor(decision.assigned.astype(probs.data.dtype))
    weights = F.mul(probs, mask)
    if not normalize:
        return weights
    totals = F.sum(weights, axis=-1, keepdims=True)
    guard = Tensor((totals.data == 0).astype(probs.data.dtype))
    return F.div(weights, F.add(totals, guard))


def dispatch_combine(
    x: Tensor,
    decision: RoutingDecision,
    experts: Sequence[Params],
    weights: Optional[Tensor] = None,
) -> Tensor:
    """y_i = sum over (e, w) assigned to token i of w * MLP_e(x_i); dropped rows are zero."""
    num_tokens = x.shape[0]
    if decision.num_tokens != num_tokens:
        raise DimensionError(f"decision covers {decision.num_tokens} tokens, input has {num_tokens}")
    if decision.num_experts > len(experts):
        raise DimensionError(f"decision references {decision.num_experts} experts, only {len(experts)} given")
    if weights is None:
        weights = Tensor(decision.combine)

    output = None
    for expert, tokens in enumerate(decision.expert_tokens):
        if tokens.size == 0:
            continue
        expert_out = mlp_block(F.gather_rows(x, tokens), experts[expert])
        token_weights = F.gather_elements(weights, tokens, np.full(tokens.size, expert))
        weighted = F.mul(expert_out, F.reshape(token_weights, (tokens.size, 1)))
        contribution = F.scatter_rows(weighted, tokens, num_tokens)
        output = contribution if output is None else F.add(output, contribution)
    if output is None:
        output = Tensor(np.zeros(x.shape, dtype=x.data.dtype))
    return output


def load_balancing_loss(probs: Tensor, decision: RoutingDecision) -> Tensor:
    """E * sum_e f_e * P_e with f_e the share of top-1 proposals sent to e."""
    if decision.router != "top_k" or decision.top1 is None:
        raise ContractError("the load-balancing loss applies to Top-K decisions only")
    num_tokens, num_experts = probs.shape
    fraction = np.bincount(decision.top1, minlength=num_experts) / num_tokens
    mean_prob = F.mean(probs, axis=0)
    return F.mul(F.sum(F.mul(mean_prob, Tensor(fraction))), float(num_experts))


def routing_stats(decision: RoutingDecision) -> Dict[str, object]:
    loads = decision.assigned.sum(axis=0).astype(np.int64)
    return {
        "drop_fraction": float(decision.dropped_mask.mean()) if decision.num_tokens else 0.0,
        "per_expert_load": loads.tolist(),
        "max_load": int(loads.max()) if loads.size else 0,
        "min_load": int(loads.min()) if loads.size else 0,
        "total_assignments": int(loads.sum()),
        "weight_mass": float(decision.combine.sum(axis=1).mean()) if decision.num_tokens else 0.0,
        "capacity": decision.capacity,
    }
