import argparse
from pathlib import Path

from ..models.runs import ProbeRun
from ..services.probe_service import ProbeService
from ..services.task_service import SyntheticTask
from ..utils.metrics_writer import write_json
from .base_handler import BaseHandler
from .train_handler import add_task_arguments


class ProbeHandler(BaseHandler):
    name = "probe"
    help = "Few-shot ridge probe of pooled representations on cluster labels"
    run_model = ProbeRun

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.probe = ProbeService(self.config)

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--checkpoint", "--in", dest="checkpoint")
        parser.add_argument("--l2", dest="l2", type=float, help="ridge regularisation (default 1024)")
        parser.add_argument("--seeds", dest="seeds", type=int, help="random train/test splits averaged")
        parser.add_argument("--sequences", dest="sequences", type=int, help="probe set size")
        add_task_arguments(parser)

    def run(self, resolved: ProbeRun, run_dir: Path) -> int:
        ckpt = self.load_checkpoint(resolved.checkpoint)
        task = SyntheticTask(self.task_for(resolved.task, ckpt))
        reps, labels = self.probe.representations(ckpt, task, resolved.sequences)
        accuracy = self.probe.linear_probe_eval(reps, labels, resolved.l2, resolved.seeds)
        write_json(run_dir / "probe.json", {
            "checkpoint": resolved.checkpoint,
            "accuracy": accuracy,
            "l2": resolved.l2,
            "seeds": resolved.seeds,
            "sequences": resolved.sequences,
            "classes": int(len(set(labels.tolist()))),
        })
        self.console.info(f"Probe accuracy {accuracy:.4f} (l2={resolved.l2:g}, {resolved.seeds} splits)")
        return 0
