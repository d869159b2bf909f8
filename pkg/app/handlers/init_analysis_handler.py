import argparse
import asyncio
import itertools
from pathlib import Path
from typing import Any, Dict

from ..core.errors import ConfigurationError
from ..models.runs import InitAnalysisRun
from ..services.comparison_service import ComparisonService
from ..services.task_service import SyntheticTask
from ..utils.metrics_writer import write_csv
from ..utils.run_config import load_presets
from .base_handler import BaseHandler, float_list, int_list, router_type, str_list
from .train_handler import add_task_arguments

COLUMNS = (
    "index", "router", "capacity_factor", "group_size", "num_experts", "layer_strategy", "layers",
    "normalize_weights", "k", "eval_loss", "eval_acc", "drop_fraction", "dense_eval_loss",
)


class InitAnalysisHandler(BaseHandler):
    name = "init-analysis"
    help = "Upcycle a dense checkpoint over a grid of routing settings and record the step-0 quality drop"
    run_model = InitAnalysisRun

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.comparison = ComparisonService(self.config)

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--checkpoint", "--base", dest="checkpoint", help="dense checkpoint")
        parser.add_argument("--grid", dest="grid_preset", help="named grid from presets.yml")
        parser.add_argument("--router", dest="routers", type=lambda v: [router_type(x) for x in str_list(v)],
                            help="comma-separated routers for a product grid")
        parser.add_argument("--capacities", dest="capacities", type=float_list, help="capacity factors C for a product grid")
        parser.add_argument("--experts", dest="experts", type=int_list, help="expert counts E for a product grid")
        parser.add_argument("--group-sizes", dest="group_sizes", type=int_list, help="group sizes G for a product grid")
        parser.add_argument("--placements", dest="placements", type=str_list,
                            help="layer placements for a product grid, e.g. every-other,first:2,last:2")
        parser.add_argument("--normalize", dest="normalize", action=argparse.BooleanOptionalAction, default=None,
                            help="normalise combine weights in every grid point")
        parser.add_argument("--batch-size", dest="batch_size", type=int)
        parser.add_argument("--seed", dest="seed", type=int, help="router seed")
        add_task_arguments(parser)

    def base_values(self, args: argparse.Namespace) -> Dict[str, Any]:
        if args.grid_preset:
            grids = load_presets().get("grids", {})
            if args.grid_preset not in grids:
                raise ConfigurationError(f"--grid: unknown grid {args.grid_preset!r}; available: {', '.join(sorted(grids))}")
            return {"grid": list(grids[args.grid_preset])}
        axes = {
            "router": args.routers,
            "capacity_factor": args.capacities,
            "num_experts": args.experts,
            "group_size": args.group_sizes,
            "layer_strategy": args.placements,
        }
        given = {key: values for key, values in axes.items() if values}
        if not given:
            return {}
        keys = list(given)
        grid = [dict(zip(keys, combo)) for combo in itertools.product(*(given[key] for key in keys))]
        if args.normalize is not None:
            for point in grid:
                point["normalize_weights"] = args.normalize
        return {"grid": grid}

    def overrides(self, args: argparse.Namespace) -> Dict[str, Any]:
        values = super().overrides(args)
        for key in ("grid_preset", "routers", "capacities", "experts", "group_sizes", "placements", "normalize"):
            values.pop(key, None)
        return values

    def run(self, resolved: InitAnalysisRun, run_dir: Path) -> int:
        base = self.load_checkpoint(resolved.checkpoint)
        task = SyntheticTask(self.task_for(resolved.task, base))
        rows = asyncio.run(
            self.comparison.init_analysis(base, resolved.grid, task, batch_size=resolved.batch_size, seed=resolved.seed)
        )
        path = write_csv(run_dir / "init_analysis.csv", COLUMNS, rows)
        self.console.table(
            "Step-0 evaluation after upcycling",
            ("router", "C", "E", "G", "placement", "eval_loss", "drop"),
            [(r["router"], r["capacity_factor"], r["num_experts"], r["group_size"], r["layer_strategy"],
              f"{r['eval_loss']:.4f}", f"{r['drop_fraction']:.3f}") for r in rows],
        )
        self.console.info(f"Wrote {path}")
        return 0
