import argparse
from pathlib import Path
from typing import Any, Dict

from ..core.checkpoint import save
from ..core.errors import ConfigurationError
from ..models.runs import UpcycleRun
from ..services.upcycler_service import UpcyclerService
from ..utils.metrics_writer import write_json
from ..utils.run_config import load_presets
from .base_handler import BaseHandler, router_type


def add_upcycle_arguments(parser: argparse.ArgumentParser, prefix: str = "upcycle") -> None:
    group = parser.add_argument_group("upcycling")
    group.add_argument("--preset", dest="preset", help="named upcycling preset from presets.yml")
    group.add_argument("--layers", dest=f"{prefix}.layer_strategy",
                       help="MoE placement: every-other, last:K, first:K or list:I,J,...")
    group.add_argument("--experts", dest=f"{prefix}.num_experts", type=int, help="number of experts E")
    group.add_argument("--router", dest=f"{prefix}.router", type=router_type, help="ec (Expert Choice) or topk (Top-K)")
    group.add_argument("--k", dest=f"{prefix}.k", type=int, help="experts per token for topk (1 = Switch)")
    group.add_argument("--capacity", dest=f"{prefix}.capacity_factor", type=float, help="capacity factor C; T = C*n/E")
    group.add_argument("--group-size", dest=f"{prefix}.group_size", type=int, help="tokens routed jointly (G)")
    group.add_argument("--normalize", dest=f"{prefix}.normalize_weights", action=argparse.BooleanOptionalAction,
                       default=None, help="renormalise each token's combine weights to sum to 1")
    group.add_argument("--bpr", dest=f"{prefix}.bpr", action=argparse.BooleanOptionalAction, default=None,
                       help="batch prioritized routing for topk")
    group.add_argument("--aux-loss-factor", dest=f"{prefix}.aux_loss_factor", type=float,
                       help="load-balancing loss weight for topk (default 0.01)")
    group.add_argument("--router-init-std", dest=f"{prefix}.router_init_stddev", type=float,
                       help="router weight init stddev (default 0.02)")
    group.add_argument("--noise-std", dest=f"{prefix}.expert_noise_stddev", type=float,
                       help="truncated Gaussian noise added to each expert copy")
    group.add_argument("--router-noise-std", dest=f"{prefix}.router_noise_stddev", type=float,
                       help="truncated Gaussian noise added to the router")
    group.add_argument("--resume-opt", dest=f"{prefix}.resume_optimizer_state", action=argparse.BooleanOptionalAction,
                       default=None, help="carry the dense optimizer state into the upcycled model")
    group.add_argument("--load-experts", dest=f"{prefix}.load_experts", action=argparse.BooleanOptionalAction,
                       default=None, help="copy the dense MLP into the experts (off: fresh experts)")
    group.add_argument("--test-mode", dest=f"{prefix}.test_mode", action=argparse.BooleanOptionalAction,
                       default=None, help="allow degenerate settings such as a single expert")


def preset_values(args: argparse.Namespace, prefix: str = "upcycle") -> Dict[str, Any]:
    name = getattr(args, "preset", None)
    if not name:
        return {}
    presets = load_presets().get("upcycle", {})
    if name not in presets:
        raise ConfigurationError(f"--preset: unknown preset {name!r}; available: {', '.join(sorted(presets))}")
    return {prefix: dict(presets[name])}


class UpcycleHandler(BaseHandler):
    name = "upcycle"
    help = "Convert a dense checkpoint into an MoE checkpoint"
    run_model = UpcycleRun

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.upcycler = UpcyclerService(self.config)

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--checkpoint", "--in", dest="checkpoint", help="dense checkpoint")
        parser.add_argument("--out", dest="out", help="upcycled checkpoint, relative to the run directory")
        parser.add_argument("--seed", dest="upcycle.seed", type=int, help="router and noise seed")
        add_upcycle_arguments(parser)

    def base_values(self, args: argparse.Namespace) -> Dict[str, Any]:
        return preset_values(args)

    def overrides(self, args: argparse.Namespace) -> Dict[str, Any]:
        values = super().overrides(args)
        values.pop("preset", None)
        return values

    def run(self, resolved: UpcycleRun, run_dir: Path) -> int:
        dense = self.load_checkpoint(resolved.checkpoint)
        sparse, report = self.upcycler.upcycle(dense, resolved.upcycle)
        out = self.output_path(run_dir, resolved.out)
        save(sparse, out)
        write_json(run_dir / "surgery_report.json", report.model_dump(mode="json"))
        self.console.mapping("Surgery report", report.model_dump())
        self.console.info(f"Saved {out}")
        return 0
