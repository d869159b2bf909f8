import argparse
from pathlib import Path

from ..core.rng import RngState
from ..models.runs import VerifyRun
from ..services.upcycler_service import UpcyclerService
from ..utils.metrics_writer import write_json
from .base_handler import BaseHandler


class VerifyHandler(BaseHandler):
    name = "verify"
    help = "Check that an upcycled checkpoint reproduces its dense source on random batches"
    run_model = VerifyRun

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.upcycler = UpcyclerService(self.config)

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--dense", dest="dense", help="dense source checkpoint")
        parser.add_argument("--sparse", dest="sparse", help="upcycled checkpoint")
        parser.add_argument("--batches", dest="batches", type=int, help="number of random batches (default 16)")
        parser.add_argument("--batch-size", dest="batch_size", type=int, help="sequences per batch")
        parser.add_argument("--seed", dest="seed", type=int, help="seed of the random token batches")
        parser.add_argument("--tolerance", dest="tolerance", type=float, help="pass threshold on max_rel_diff_selected")

    def run(self, resolved: VerifyRun, run_dir: Path) -> int:
        dense = self.load_checkpoint(resolved.dense)
        sparse = self.load_checkpoint(resolved.sparse)
        shape = (resolved.batch_size, dense.config.seq_len)
        rng = RngState(seed=resolved.seed)
        batches = [
            rng.generator("verify", index).integers(0, dense.config.vocab_size, size=shape)
            for index in range(resolved.batches)
        ]
        report = self.upcycler.verify_function_preservation(dense, sparse, batches)
        report["within_tolerance"] = report["max_rel_diff_selected"] <= resolved.tolerance
        write_json(run_dir / "verify_report.json", report)

        self.console.table(
            "Per-layer differences",
            ("layer", "moe", "max_abs_diff", "max_rel_diff", "drop_fraction"),
            [(d["layer"], d["moe"], f"{d['max_abs_diff']:.3e}", f"{d['max_rel_diff']:.3e}", d["drop_fraction"])
             for d in report["per_layer_diffs"]],
        )
        summary = (
            f"max_rel_diff={report['max_rel_diff_selected']:.3e} "
            f"max_abs_logit_diff={report['max_abs_logit_diff']:.3e} drop_fraction={report['drop_fraction']:.4f}"
        )
        if report["within_tolerance"]:
            self.console.info(summary)
        else:
            self.console.warning(f"{summary} (above tolerance {resolved.tolerance:g})")
        return 0
