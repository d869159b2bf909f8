import argparse
import asyncio
from pathlib import Path
from typing import Any, Dict

from ..core.checkpoint import save
from ..models.runs import CompareRun
from ..services.comparison_service import ComparisonService
from ..services.task_service import SyntheticTask
from ..utils.metrics_writer import MetricsWriter, write_json
from .base_handler import BaseHandler, int_list, str_list
from .train_handler import add_schedule_arguments, add_task_arguments
from .upcycle_handler import add_upcycle_arguments, preset_values


class CompareHandler(BaseHandler):
    name = "compare"
    help = "Run dense continuation, upcycling, MoE-from-scratch and depth tiling from one dense base"
    run_model = CompareRun

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.comparison = ComparisonService(self.config)

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--checkpoint", "--base", dest="checkpoint", help="trained dense base checkpoint")
        parser.add_argument("--extra-steps", dest="extra_steps", type=int, help="steps trained by every arm")
        parser.add_argument("--arms", dest="arms", type=str_list,
                            help="comma-separated subset of dense_continue,upcycle,moe_scratch,depth_tile")
        parser.add_argument("--seeds", dest="seeds", type=int_list, help="comma-separated seeds")
        parser.add_argument("--tile-layers", dest="tile_layers", type=int, help="depth of the depth_tile arm")
        parser.add_argument("--budget-multiplier", dest="budget_multiplier", type=int,
                            help="also run upcycle and moe_scratch at this many times the budget")
        parser.add_argument("--save-checkpoints", action="store_true", default=None,
                            help="keep the final checkpoint of every arm")
        add_upcycle_arguments(parser)
        add_schedule_arguments(parser, "train")
        add_task_arguments(parser)

    def base_values(self, args: argparse.Namespace) -> Dict[str, Any]:
        return preset_values(args)

    def overrides(self, args: argparse.Namespace) -> Dict[str, Any]:
        values = super().overrides(args)
        values.pop("preset", None)
        return values

    def run(self, resolved: CompareRun, run_dir: Path) -> int:
        base = self.load_checkpoint(resolved.checkpoint)
        task = SyntheticTask(self.task_for(resolved.task, base))
        result = asyncio.run(
            self.comparison.run_comparison(
                base,
                resolved.extra_steps,
                resolved.arms,
                resolved.seeds,
                task,
                resolved.upcycle,
                resolved.train,
                tile_layers=resolved.tile_layers,
                budget_multiplier=resolved.budget_multiplier,
            )
        )
        MetricsWriter(run_dir / "metrics.csv").append(result.rows)
        write_json(run_dir / "summary.json", result.summary)
        if resolved.save_checkpoints:
            for item in result.results:
                save(item.final, run_dir / "checkpoints" / f"{item.job.label}-seed{item.job.seed}.ckpt")

        self.console.table(
            "Final evaluation (mean over seeds)",
            ("arm", "eval_loss", "eval_acc", "probe_accuracy"),
            [(arm, f"{m['eval_loss']:.4f}", f"{m['eval_acc']:.4f}", f"{m['probe_accuracy']:.4f}")
             for arm, m in result.summary["means"].items()],
        )
        self.console.info(f"Wins: {result.summary['wins']}")
        return 0
