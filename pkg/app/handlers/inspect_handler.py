import argparse
from pathlib import Path
from typing import Any, Dict

from ..core.checkpoint import Checkpoint
from ..core.optimizer import lr_at
from ..core.transformer import count_flops, param_count
from ..models.runs import InspectRun
from ..models.training import ScheduleConfig
from ..utils.metrics_writer import write_json
from .base_handler import BaseHandler


def describe(ckpt: Checkpoint) -> Dict[str, Any]:
    """Summary of a checkpoint: layer map, parameter totals and schedule position."""
    cfg = ckpt.config
    dense_params = param_count(cfg.model_copy(update={"moe_layers": []}))
    layers = [
        {"layer": i, "kind": "moe" if cfg.is_moe(i) else "dense", "experts": cfg.num_experts if cfg.is_moe(i) else 1}
        for i in range(cfg.num_layers)
    ]
    summary: Dict[str, Any] = {
        "blocks": cfg.num_layers,
        "moe_blocks": len(cfg.moe_layers),
        "moe_layers": list(cfg.moe_layers),
        "layers": layers,
        "params": ckpt.param_count(),
        "analytic_params": param_count(cfg),
        "dense_params": dense_params,
        "sparse_to_dense_ratio": param_count(cfg) / dense_params,
        "opt_slot_values": ckpt.slot_count(),
        "step": ckpt.step,
        "rng": {"seed": ckpt.rng.seed, "counter": ckpt.rng.counter},
        "flops_per_sequence": count_flops(cfg, (1, cfg.seq_len)),
        "origin": ckpt.meta.get("origin"),
    }
    if cfg.is_sparse:
        summary["routing"] = {
            "router": cfg.router,
            "capacity_factor": cfg.capacity_factor,
            "group_size": cfg.group_size,
            "k": cfg.k,
            "normalize_weights": cfg.normalize_weights,
        }
    if "schedule" in ckpt.meta:
        schedule = ScheduleConfig.model_validate(ckpt.meta["schedule"])
        summary["schedule"] = {"lr_at_step": lr_at(ckpt.step, schedule), **schedule.model_dump(mode="json")}
    return summary


class InspectHandler(BaseHandler):
    name = "inspect"
    help = "Print the layer map, parameter totals and training position of a checkpoint"
    run_model = InspectRun

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("checkpoint", nargs="?", default=None, help="checkpoint file")
        parser.add_argument("--checkpoint", "--in", dest="checkpoint_flag", help="checkpoint file")

    def overrides(self, args: argparse.Namespace) -> Dict[str, Any]:
        values = super().overrides(args)
        flag = values.pop("checkpoint_flag", None)
        if values.get("checkpoint") is None:
            values["checkpoint"] = flag
        return values

    def run(self, resolved: InspectRun, run_dir: Path) -> int:
        ckpt = self.load_checkpoint(resolved.checkpoint)
        summary = describe(ckpt)
        write_json(run_dir / "inspect.json", summary)

        self.console.print(
            f"{summary['blocks']} blocks, {summary['moe_blocks']} MoE, {summary['params']} params "
            f"(analytic {summary['analytic_params']}, {summary['sparse_to_dense_ratio']:.3f}x the dense model), "
            f"step {summary['step']}"
        )
        self.console.table(
            "Layer map", ("layer", "kind", "experts"),
            [(row["layer"], row["kind"], row["experts"]) for row in summary["layers"]],
        )
        if "routing" in summary:
            self.console.mapping("Routing", summary["routing"])
        if "schedule" in summary:
            self.console.info(f"Schedule position: step {ckpt.step}, lr {summary['schedule']['lr_at_step']:.6g}")
        if summary["params"] != summary["analytic_params"]:
            self.console.warning("Stored parameter count differs from the analytic count")
        return 0
