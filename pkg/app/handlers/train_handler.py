import argparse
from pathlib import Path
from typing import Any, Dict

from ..core.checkpoint import save
from ..core.errors import TrainingDivergedError
from ..models.runs import TrainRun
from ..services.task_service import SyntheticTask
from ..services.training_service import TrainingService
from ..utils.metrics_writer import MetricsWriter
from .base_handler import BaseHandler


def add_schedule_arguments(parser: argparse.ArgumentParser, prefix: str) -> None:
    group = parser.add_argument_group("schedule and optimizer")
    group.add_argument("--steps", dest=f"{prefix}.steps", type=int, help="training steps in this run")
    group.add_argument("--batch-size", dest=f"{prefix}.batch_size", type=int, help="sequences per step")
    group.add_argument("--eval-every", dest=f"{prefix}.eval_every", type=int, help="steps between held-out evaluations")
    group.add_argument("--peak-lr", dest=f"{prefix}.schedule.peak_lr", type=float, help="peak learning rate (default 0.01)")
    group.add_argument("--warmup", dest=f"{prefix}.schedule.warmup_steps", type=int, help="linear warmup steps")
    group.add_argument("--decay", dest=f"{prefix}.schedule.decay",
                       choices=["inverse_sqrt_timescale", "inverse_sqrt_plain"], help="decay after warmup")
    group.add_argument("--timescale", dest=f"{prefix}.schedule.timescale", type=int, help="inverse square root timescale tau")
    group.add_argument("--cooldown-start", dest=f"{prefix}.schedule.cooldown_start", type=int, help="first step of the linear cooldown")
    group.add_argument("--cooldown-end", dest=f"{prefix}.schedule.cooldown_end", type=int, help="step at which the lr reaches 0")
    group.add_argument("--wd-head", dest=f"{prefix}.schedule.weight_decay_head", type=float, help="decoupled weight decay on head tensors")
    group.add_argument("--wd-body", dest=f"{prefix}.schedule.weight_decay_body", type=float, help="decoupled weight decay on all other tensors")
    group.add_argument("--beta1", dest=f"{prefix}.optimizer.beta1", type=float, help="enable Adafactor momentum with this beta1")


def add_task_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("synthetic task")
    group.add_argument("--task-seed", dest="task.seed", type=int, help="seed of the Markov chains and the held-out set")
    group.add_argument("--clusters", dest="task.num_clusters", type=int, help="number of Markov chains")
    group.add_argument("--mask-fraction", dest="task.mask_fraction", type=float, help="fraction of positions masked")
    group.add_argument("--concentration", dest="task.concentration", type=float, help="Dirichlet concentration of transition rows")


class TrainHandler(BaseHandler):
    name = "train"
    help = "Train a checkpoint (or a fresh dense model) on the synthetic masked-token task"
    run_model = TrainRun

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.training = TrainingService(self.config)

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--checkpoint", "--in", dest="checkpoint", help="checkpoint to continue from")
        parser.add_argument("--fresh", action="store_true", default=None, help="start from a fresh dense initialisation")
        parser.add_argument("--out", dest="out", help="output checkpoint, relative to the run directory")
        parser.add_argument("--arm", dest="train.arm", help="label written to the metrics rows")
        parser.add_argument("--seed", dest="train.seed", type=int, help="data order and initialisation seed")
        model = parser.add_argument_group("fresh model shape")
        model.add_argument("--num-layers", dest="model.num_layers", type=int)
        model.add_argument("--d-model", dest="model.d_model", type=int)
        model.add_argument("--d-ff", dest="model.d_ff", type=int)
        model.add_argument("--heads", dest="model.num_heads", type=int)
        model.add_argument("--seq-len", dest="model.seq_len", type=int)
        model.add_argument("--vocab", dest="model.vocab_size", type=int)
        add_schedule_arguments(parser, "train")
        add_task_arguments(parser)

    def base_values(self, args: argparse.Namespace) -> Dict[str, Any]:
        # a fresh start is pretraining
        return {"train": {"steps": self.config.PRETRAIN_STEPS}} if args.fresh else {}

    def run(self, resolved: TrainRun, run_dir: Path) -> int:
        if resolved.fresh:
            start = self.training.fresh_checkpoint(resolved.model, resolved.train.seed)
        else:
            start = self.load_checkpoint(resolved.checkpoint)
        task = SyntheticTask(self.task_for(resolved.task, start))

        writer = MetricsWriter(run_dir / "metrics.csv")
        try:
            final, rows = self.training.train(start, resolved.train, task, on_row=lambda row: writer.append([row]))
        except TrainingDivergedError as e:
            if e.checkpoint is not None:
                save(e.checkpoint, run_dir / "last_good.ckpt")
                self.console.warning(f"Last good checkpoint saved to {run_dir / 'last_good.ckpt'}")
            raise

        meta = dict(final.meta)
        meta["schedule"] = resolved.train.schedule.model_dump(mode="json")
        final = final.with_updates(meta=meta) if resolved.train.steps else final
        out = self.output_path(run_dir, resolved.out)
        save(final, out)

        last = rows[-1]
        self.console.info(
            f"Trained {resolved.train.steps} steps ({resolved.train.arm}); "
            f"eval_loss={last.eval_loss:.4f} eval_acc={last.eval_acc:.4f}; saved {out}"
        )
        return 0
