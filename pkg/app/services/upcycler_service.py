import logging
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from ..config import config
from ..core.checkpoint import Checkpoint
from ..core.errors import AlreadySparseError, ConfigurationError, ContractError, DimensionError
from ..core.optimizer import slot_names
from ..core.rng import RngState
from ..core.tensor import Tensor, no_grad
from ..core.transformer import MLP_TENSORS, forward, init_mlp, init_router, param_shapes
from ..models.model_config import ModelConfig
from ..models.surgery import LayerStrategy, SurgeryReport, UpcycleConfig

_SHAPE_FIELDS = ("d_model", "d_ff", "num_heads", "vocab_size", "seq_len")


class UpcyclerService:
    """Checkpoint surgery: dense to MoE expansion, depth tiling and
    function-preservation checks."""

    def __init__(self, config_obj=config):
        self.config = config_obj
        self.logger = logging.getLogger(self.__class__.__name__)

    def select_moe_layers(self, num_layers: int, strategy: LayerStrategy) -> List[int]:
        if strategy.kind == "every_other_from_second":
            return list(range(1, num_layers, 2))
        if strategy.kind == "last_k":
            if strategy.k > num_layers:
                raise ConfigurationError(f"last:{strategy.k} exceeds the {num_layers} available layers")
            return list(range(num_layers - strategy.k, num_layers))
        outside = [layer for layer in strategy.layers if not 0 <= layer < num_layers]
        if outside:
            raise ConfigurationError(f"layer indices {outside} outside [0, {num_layers})")
        if len(set(strategy.layers)) != len(strategy.layers):
            raise ConfigurationError(f"duplicate layer indices in {strategy.layers}")
        return sorted(strategy.layers)

    def sparse_config(self, dense: ModelConfig, cfg: UpcycleConfig) -> ModelConfig:
        """Model config of the upcycled (or from-scratch sparse) model."""
        layers = self.select_moe_layers(dense.num_layers, cfg.layer_strategy)
        fields = dense.model_dump()
        fields.update(
            moe_layers=layers,
            num_experts=cfg.num_experts,
            router=cfg.router,
            k=cfg.k,
            capacity_factor=cfg.capacity_factor,
            group_size=cfg.group_size,
            normalize_weights=cfg.normalize_weights,
            bpr=cfg.bpr,
        )
        if cfg.aux_loss_factor is not None:
            fields["aux_loss_factor"] = cfg.aux_loss_factor
        try:
            return ModelConfig.model_validate(fields, context={"test_mode": cfg.test_mode})
        except ValidationError as e:
            raise ConfigurationError(f"upcycled model config is invalid: {e}") from e

    @staticmethod
    def _expert_source(name: str) -> Optional[str]:
        """``block3/expert5/W_in`` → ``block3/mlp/W_in``."""
        parts = name.split("/")
        if len(parts) == 3 and parts[1].startswith("expert") and parts[2] in MLP_TENSORS:
            return f"{parts[0]}/mlp/{parts[2]}"
        return None

    def upcycle(self, dense: Checkpoint, cfg: UpcycleConfig) -> Tuple[Checkpoint, SurgeryReport]:
        """Replicate the selected dense MLPs into E experts and add fresh routers.

        Every other tensor is copied bit-exactly, and the step counter is kept so
        the learning-rate schedule continues where the dense run stopped.
        """
        if dense.config.is_sparse:
            raise AlreadySparseError()
        sparse_config = self.sparse_config(dense.config, cfg)
        layers = sparse_config.moe_layers
        rng = RngState(seed=cfg.seed)
        truncation = self.config.NOISE_TRUNCATION

        params: Dict[str, np.ndarray] = {}
        fresh_experts: Dict[str, np.ndarray] = {}
        copied = created = 0
        for name, shape in param_shapes(sparse_config).items():
            if name in dense.params:
                params[name] = np.array(dense.params[name], dtype=np.float32, copy=True)
                copied += 1
                continue
            source = self._expert_source(name)
            if source is not None:
                layer, expert, tensor = name.split("/")
                if not cfg.load_experts:
                    if name not in fresh_experts:
                        fresh_experts.update(init_mlp(sparse_config, f"{layer}/{expert}/", rng))
                    params[name] = fresh_experts[name]
                    created += 1
                    continue
                value = np.array(dense.params[source], dtype=np.float32, copy=True)
                if cfg.expert_noise_stddev > 0:
                    value = value + rng.truncated_normal(
                        shape, cfg.expert_noise_stddev, "expert_noise", layer, expert, tensor, bound=truncation
                    )
                params[name] = value.astype(np.float32)
                copied += 1
            elif name.endswith("router/W_r"):
                layer = int(name.split("/")[0][len("block"):])
                router = init_router(sparse_config, layer, rng, cfg.router_init_stddev)
                if cfg.router_noise_stddev > 0:
                    router = router + rng.truncated_normal(
                        shape, cfg.router_noise_stddev, "router_noise", layer, bound=truncation
                    )
                params[name] = router.astype(np.float32)
                created += 1
            else:
                raise ContractError(f"no source for parameter {name}")

        slots, slots_copied, slots_created = self._carry_slots(dense, params, cfg.resume_optimizer_state)

        report = SurgeryReport(
            layers_converted=layers,
            params_before=dense.param_count(),
            params_after=int(sum(value.size for value in params.values())),
            tensors_copied=copied,
            tensors_created=created,
            optimizer_slots_copied=slots_copied,
            optimizer_slots_created=slots_created,
            num_experts=cfg.num_experts,
            router=cfg.router,
        )
        meta = dict(dense.meta)
        meta.update(
            surgery=report.model_dump(mode="json"),
            upcycle_config=cfg.model_dump(mode="json"),
            test_mode=cfg.test_mode,
        )
        meta["upcycle_config"]["layer_strategy"] = cfg.layer_strategy.describe()
        sparse = Checkpoint(
            config=sparse_config, params=params, opt_slots=slots, step=dense.step, rng=dense.rng, meta=meta
        )
        self.logger.info(
            f"Upcycled layers {layers} into {cfg.num_experts} experts ({cfg.router}); "
            f"params {report.params_before} -> {report.params_after}"
        )
        return sparse, report

    def _carry_slots(
        self, dense: Checkpoint, params: Dict[str, np.ndarray], resume: bool
    ) -> Tuple[Dict[str, np.ndarray], int, int]:
        momentum = any(name.endswith("/momentum") for name in dense.opt_slots)
        slots: Dict[str, np.ndarray] = {}
        copied = created = 0
        for name, value in params.items():
            source = self._expert_source(name) or name
            for slot, shape in slot_names(name, value.shape, momentum).items():
                source_slot = source + slot[len(name):]
                if resume and source_slot in dense.opt_slots and not name.endswith("router/W_r"):
                    slots[slot] = np.array(dense.opt_slots[source_slot], dtype=np.float32, copy=True)
                    copied += 1
                else:
                    slots[slot] = np.zeros(shape, dtype=np.float32)
                    created += 1
        return slots, copied, created

    def depth_tile(self, dense: Checkpoint, target_layers: int) -> Checkpoint:
        """Repeat the block stack [0..L-1, 0..L-1, ...] up to ``target_layers``."""
        source_layers = dense.config.num_layers
        if dense.config.is_sparse:
            raise ContractError("depth tiling expects a dense checkpoint")
        if target_layers < source_layers:
            raise ConfigurationError(f"target depth {target_layers} is below the source depth {source_layers}")
        if source_layers == 0 and target_layers > 0:
            raise ConfigurationError("cannot tile a model without blocks")

        tiled_config = dense.config.model_copy(update={"num_layers": target_layers})
        params: Dict[str, np.ndarray] = {}
        for name in param_shapes(tiled_config):
            if name.startswith("block"):
                block, rest = name.split("/", 1)
                source = f"block{int(block[len('block'):]) % source_layers}/{rest}"
            else:
                source = name
            params[name] = np.array(dense.params[source], dtype=np.float32, copy=True)

        meta = dict(dense.meta)
        meta["depth_tile"] = {"source_layers": source_layers, "target_layers": target_layers}
        self.logger.info(f"Depth-tiled {source_layers} -> {target_layers} blocks")
        return Checkpoint(config=tiled_config, params=params, opt_slots={}, step=dense.step, rng=dense.rng, meta=meta)

    def verify_function_preservation(
        self, dense: Checkpoint, sparse: Checkpoint, batches: Iterable[np.ndarray]
    ) -> Dict[str, object]:
        """Compare both models on ``batches``.

        Relative differences are scaled by the largest magnitude of the dense
        reference. Hidden-state diffs only cover tokens that every MoE layer
        routed to at least one expert.
        """
        mismatched = [
            field for field in _SHAPE_FIELDS + ("num_layers",)
            if getattr(dense.config, field) != getattr(sparse.config, field)
        ]
        if mismatched:
            raise DimensionError(f"checkpoints differ in {', '.join(mismatched)}")

        num_layers = dense.config.num_layers
        layer_abs = np.zeros(num_layers)
        layer_scale = np.zeros(num_layers)
        layer_drops: List[List[float]] = [[] for _ in range(num_layers)]
        logit_abs = logit_scale = 0.0
        selected_rel = 0.0
        dropped_total = tokens_total = 0

        dense_params = _as_tensors(dense)
        sparse_params = _as_tensors(sparse)
        with no_grad():
            for tokens in batches:
                ref = forward(dense.config, dense_params, tokens, collect_hidden=True)
                out = forward(sparse.config, sparse_params, tokens, collect_hidden=True)
                dropped = np.zeros(tokens.size, dtype=bool)
                for routing in out.routing:
                    dropped |= routing.decision.dropped_mask
                    layer_drops[routing.layer].append(float(routing.decision.dropped_mask.mean()))
                keep = ~dropped
                dropped_total += int(dropped.sum())
                tokens_total += tokens.size

                width = dense.config.d_model
                for layer in range(num_layers):
                    ref_h = ref.hidden[layer].reshape(-1, width)[keep]
                    out_h = out.hidden[layer].reshape(-1, width)[keep]
                    if ref_h.size:
                        layer_abs[layer] = max(layer_abs[layer], float(np.abs(out_h - ref_h).max()))
                        layer_scale[layer] = max(layer_scale[layer], float(np.abs(ref_h).max()))

                logit_abs = max(logit_abs, float(np.abs(out.logits.data - ref.logits.data).max()))
                logit_scale = max(logit_scale, float(np.abs(ref.logits.data).max()))

        per_layer = []
        for layer in range(num_layers):
            rel = layer_abs[layer] / layer_scale[layer] if layer_scale[layer] > 0 else 0.0
            selected_rel = max(selected_rel, rel)
            per_layer.append({
                "layer": layer,
                "moe": sparse.config.is_moe(layer),
                "max_abs_diff": float(layer_abs[layer]),
                "max_rel_diff": float(rel),
                "drop_fraction": float(np.mean(layer_drops[layer])) if layer_drops[layer] else None,
            })
        logit_rel = logit_abs / logit_scale if logit_scale > 0 else 0.0
        if dropped_total == 0:
            selected_rel = max(selected_rel, logit_rel)

        return {
            "max_rel_diff_selected": float(selected_rel),
            "max_abs_logit_diff": float(logit_abs),
            "max_rel_logit_diff": float(logit_rel),
            "drop_fraction": dropped_total / tokens_total if tokens_total else 0.0,
            "per_layer_diffs": per_layer,
        }


def _as_tensors(ckpt: Checkpoint) -> Dict[str, Tensor]:
    return {name: Tensor(value, name=name) for name, value in ckpt.params.items()}
