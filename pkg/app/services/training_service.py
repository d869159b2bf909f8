import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..config import config
from ..core import functional as F
from ..core.checkpoint import Checkpoint
from ..core.errors import NumericalError, TrainingDivergedError
from ..core.optimizer import Adafactor
from ..core.rng import RngState
from ..core.tensor import Tensor, no_grad
from ..core.transformer import count_flops, forward, init_params
from ..models.model_config import ModelConfig
from ..models.training import MetricsRow, TrainConfig
from .task_service import Batch, SyntheticTask

# backward costs about twice the forward pass
TRAIN_FLOPS_MULTIPLIER = 3.0

MetricsCallback = Callable[[MetricsRow], None]


@dataclass
class Evaluation:
    loss: float
    accuracy: float
    drop_fraction: float
    num_targets: int


@dataclass
class LossParts:
    total: Tensor
    mlm: Tensor
    aux: Optional[Tensor]


def compute_loss(cfg: ModelConfig, params: Dict[str, Tensor], batch: Batch) -> LossParts:
    """Masked-token cross-entropy plus aux_loss_factor · Σ aux for Top-K layers."""
    out = forward(cfg, params, batch.tokens, positions=batch.positions)
    mlm = F.cross_entropy(out.masked_logits, batch.targets)
    if not out.aux_losses:
        return LossParts(total=mlm, mlm=mlm, aux=None)
    aux = out.aux_losses[0]
    for term in out.aux_losses[1:]:
        aux = F.add(aux, term)
    return LossParts(total=F.add(mlm, F.mul(aux, cfg.aux_loss_factor)), mlm=mlm, aux=aux)


class TrainingService:
    """Runs Adafactor training on the synthetic task and evaluates checkpoints."""

    def __init__(self, config_obj=config):
        self.config = config_obj
        self.logger = logging.getLogger(self.__class__.__name__)

    def evaluate(self, ckpt: Checkpoint, batches: List[Batch]) -> Evaluation:
        params = {name: Tensor(value, name=name) for name, value in ckpt.params.items()}
        nll = correct = count = 0
        drops: List[float] = []
        with no_grad():
            for batch in batches:
                out = forward(ckpt.config, params, batch.tokens, positions=batch.positions)
                drops.extend(float(r.decision.dropped_mask.mean()) for r in out.routing)
                if batch.num_targets == 0:
                    continue
                log_probs = F.log_softmax(out.masked_logits).data.astype(np.float64)
                rows = np.arange(batch.num_targets)
                nll += float(-log_probs[rows, batch.targets].sum())
                correct += int((log_probs.argmax(axis=1) == batch.targets).sum())
                count += batch.num_targets
        return Evaluation(
            loss=nll / count if count else 0.0,
            accuracy=correct / count if count else 0.0,
            drop_fraction=float(np.mean(drops)) if drops else 0.0,
            num_targets=count,
        )

    def fresh_checkpoint(self, model_cfg: ModelConfig, seed: int, router_stddev: Optional[float] = None) -> Checkpoint:
        stddev = self.config.ROUTER_INIT_STDDEV if router_stddev is None else router_stddev
        params = init_params(model_cfg, RngState(seed=seed), router_stddev=stddev, embed_stddev=self.config.MODEL_INIT_STDDEV)
        return Checkpoint(config=model_cfg, params=params, step=0, rng=RngState(seed=seed), meta={"origin": "fresh"})

    def train(
        self,
        start: Checkpoint,
        train_cfg: TrainConfig,
        task: SyntheticTask,
        on_row: Optional[MetricsCallback] = None,
    ) -> Tuple[Checkpoint, List[MetricsRow]]:
        """Train ``train_cfg.steps`` steps from ``start``.

        The schedule position continues from ``start.step``. Rows are emitted
        at step 0, every ``eval_every`` steps and after the last step. A
        non-finite loss raises ``TrainingDivergedError`` holding the last
        good checkpoint.
        """
        cfg = start.config
        eval_batches = task.eval_set(train_cfg.batch_size)
        flops_per_step = TRAIN_FLOPS_MULTIPLIER * count_flops(cfg, (train_cfg.batch_size, task.cfg.seq_len))
        optimizer = Adafactor(train_cfg.schedule, train_cfg.optimizer)
        rows: List[MetricsRow] = []
        started = time.perf_counter()

        def record(step: int, train_loss: Optional[float], ckpt: Checkpoint) -> None:
            result = self.evaluate(ckpt, eval_batches)
            row = MetricsRow(
                arm=train_cfg.arm,
                seed=train_cfg.seed,
                step=step,
                train_loss=train_loss,
                eval_loss=result.loss,
                eval_acc=result.accuracy,
                cum_flops=step * flops_per_step,
                elapsed_seconds=time.perf_counter() - started,
            )
            rows.append(row)
            if on_row:
                on_row(row)
            self.logger.info(
                f"[{train_cfg.arm} seed={train_cfg.seed}] step {step}: eval_loss={result.loss:.4f} eval_acc={result.accuracy:.4f}"
            )

        record(0, None, start)
        if train_cfg.steps == 0:
            return start, rows

        params = dict(start.params)
        slots = optimizer.ensure_slots(params, start.opt_slots)
        last_good = start
        train_loss = None
        for step in range(1, train_cfg.steps + 1):
            schedule_step = start.step + step - 1
            batch = task.train_batch(train_cfg.batch_size, train_cfg.seed, schedule_step)
            try:
                leaves = {name: Tensor(value, requires_grad=True, name=name) for name, value in params.items()}
                loss = compute_loss(cfg, leaves, batch)
                train_loss = loss.total.item()
                if not np.isfinite(train_loss):
                    raise NumericalError(f"loss is {train_loss}")
                loss.total.backward()
                grads = {name: leaf.grad for name, leaf in leaves.items() if leaf.grad is not None}
                params, slots, _ = optimizer.step(params, grads, slots, schedule_step)
                overflowed = [name for name, value in params.items() if not np.isfinite(value).all()]
                if overflowed:
                    raise NumericalError(f"update overflowed {', '.join(overflowed[:3])}")
            except NumericalError as e:
                self.logger.error(f"[{train_cfg.arm} seed={train_cfg.seed}] diverged at step {step}: {e}")
                raise TrainingDivergedError(
                    f"training diverged at step {step}: {e.message}", checkpoint=last_good, metrics=rows
                ) from e

            last_good = start.with_updates(
                params=params, opt_slots=slots, step=start.step + step, rng=start.rng.advance(step)
            )
            if step % train_cfg.eval_every == 0 or step == train_cfg.steps:
                record(step, train_loss, last_good)
        return last_good, rows

    def pretrain(self, model_cfg: ModelConfig, train_cfg: TrainConfig, task: SyntheticTask) -> Tuple[Checkpoint, List[MetricsRow]]:
        """Dense base model from a fresh initialisation."""
        return self.train(self.fresh_checkpoint(model_cfg, train_cfg.seed), train_cfg, task)
