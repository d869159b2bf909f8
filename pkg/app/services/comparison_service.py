import asyncio
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from ..config import config
from ..core.checkpoint import Checkpoint
from ..core.errors import ConfigurationError
from ..models.surgery import UpcycleConfig
from ..models.training import ARM_ORDER, GridPoint, MetricsRow, TrainConfig
from .probe_service import ProbeService
from .task_service import SyntheticTask
from .training_service import TrainingService
from .upcycler_service import UpcyclerService


@dataclass
class ArmJob:
    index: int
    arm: str
    seed: int
    steps: int
    label: str


@dataclass
class ArmResult:
    job: ArmJob
    rows: List[MetricsRow]
    final: Checkpoint
    probe_accuracy: float


@dataclass
class ComparisonResult:
    rows: List[MetricsRow]
    results: List[ArmResult]
    summary: Dict[str, Any] = field(default_factory=dict)


class ComparisonService:
    """Runs the experiment arms and the step-0 initialisation grid.

    Jobs go through an asyncio queue; at most ``MAX_CONCURRENT_RUNS`` of them
    run at once, each in a worker thread. Results are re-ordered by job index,
    so outputs do not depend on scheduling.
    """

    def __init__(
        self,
        config_obj=config,
        training: Optional[TrainingService] = None,
        upcycler: Optional[UpcyclerService] = None,
        probe: Optional[ProbeService] = None,
        max_concurrent: Optional[int] = None,
    ):
        self.config = config_obj
        self.training = training or TrainingService(config_obj)
        self.upcycler = upcycler or UpcyclerService(config_obj)
        self.probe = probe or ProbeService(config_obj)
        self.max_concurrent = max_concurrent or config_obj.MAX_CONCURRENT_RUNS
        self.logger = logging.getLogger(self.__class__.__name__)

    async def _run_queue(self, jobs: Sequence[Any], work: Callable[[Any], Any]) -> List[Any]:
        queue: asyncio.Queue = asyncio.Queue()
        for position, job in enumerate(jobs):
            queue.put_nowait((position, job))
        semaphore = asyncio.Semaphore(self.max_concurrent)
        results: Dict[int, Any] = {}

        async def worker() -> None:
            while True:
                try:
                    position, job = queue.get_nowait()
                except asyncio.QueueEmpty:
                    return
                try:
                    async with semaphore:
                        results[position] = await asyncio.to_thread(work, job)
                finally:
                    queue.task_done()

        workers = [asyncio.create_task(worker()) for _ in range(min(self.max_concurrent, max(len(jobs), 1)))]
        try:
            await asyncio.gather(*workers)
        except Exception:
            for task in workers:
                task.cancel()
            raise
        return [results[position] for position in range(len(jobs))]

    def _start_checkpoint(self, arm: str, base: Checkpoint, seed: int, upcycle_cfg: UpcycleConfig, tile_layers: int) -> Checkpoint:
        if arm == "dense_continue":
            return base
        if arm == "upcycle":
            sparse, _ = self.upcycler.upcycle(base, upcycle_cfg.model_copy(update={"seed": seed}))
            return sparse
        if arm == "moe_scratch":
            sparse_config = self.upcycler.sparse_config(base.config, upcycle_cfg)
            return self.training.fresh_checkpoint(sparse_config, seed, upcycle_cfg.router_init_stddev)
        if arm == "depth_tile":
            return self.upcycler.depth_tile(base, tile_layers)
        raise ConfigurationError(f"unknown arm {arm!r}; expected one of {', '.join(ARM_ORDER)}")

    async def run_comparison(
        self,
        base: Checkpoint,
        extra_steps: int,
        arms: Sequence[str],
        seeds: Sequence[int],
        task: SyntheticTask,
        upcycle_cfg: UpcycleConfig,
        train_template: TrainConfig,
        tile_layers: Optional[int] = None,
        budget_multiplier: Optional[int] = None,
    ) -> ComparisonResult:
        """Train every (seed, arm) for ``extra_steps`` and collect metric rows.

        ``budget_multiplier`` adds upcycle and moe_scratch runs at that many
        times the budget, labelled ``{arm}@{M}x``.
        """
        unknown = [arm for arm in arms if arm not in ARM_ORDER]
        if unknown:
            raise ConfigurationError(f"unknown arm(s) {unknown}; expected a subset of {', '.join(ARM_ORDER)}")
        if base.config.is_sparse:
            raise ConfigurationError("the comparison base must be a dense checkpoint")
        tile_layers = tile_layers or self.config.TILE_LAYERS
        ordered_arms = [arm for arm in ARM_ORDER if arm in arms]

        jobs: List[ArmJob] = []
        for seed in seeds:
            for arm in ordered_arms:
                jobs.append(ArmJob(len(jobs), arm, seed, extra_steps, arm))
            if budget_multiplier and budget_multiplier > 1:
                for arm in ("upcycle", "moe_scratch"):
                    if arm in ordered_arms:
                        jobs.append(ArmJob(len(jobs), arm, seed, extra_steps * budget_multiplier, f"{arm}@{budget_multiplier}x"))

        def work(job: ArmJob) -> ArmResult:
            start = self._start_checkpoint(job.arm, base, job.seed, upcycle_cfg, tile_layers)
            train_cfg = train_template.model_copy(update={"arm": job.label, "seed": job.seed, "steps": job.steps})
            final, rows = self.training.train(start, train_cfg, task)
            return ArmResult(job, rows, final, self.probe.probe_checkpoint(final, task))

        self.logger.info(f"Running {len(jobs)} arm jobs with up to {self.max_concurrent} concurrent")
        results = await self._run_queue(jobs, work)
        rows = [row for result in results for row in result.rows]
        return ComparisonResult(rows=rows, results=results, summary=self.summarize(results, list(seeds), budget_multiplier))

    def summarize(self, results: List[ArmResult], seeds: List[int], budget_multiplier: Optional[int] = None) -> Dict[str, Any]:
        finals = []
        by_label: Dict[Tuple[str, int], ArmResult] = {}
        for result in results:
            last = result.rows[-1]
            by_label[(result.job.label, result.job.seed)] = result
            finals.append({
                "arm": result.job.label,
                "seed": result.job.seed,
                "steps": result.job.steps,
                "eval_loss": last.eval_loss,
                "eval_acc": last.eval_acc,
                "probe_accuracy": result.probe_accuracy,
                "cum_flops": last.cum_flops,
            })

        means: Dict[str, Dict[str, float]] = {}
        for label in dict.fromkeys(result.job.label for result in results):
            picked = [item for item in finals if item["arm"] == label]
            means[label] = {
                key: float(np.mean([item[key] for item in picked]))
                for key in ("eval_loss", "eval_acc", "probe_accuracy")
            }

        def final_loss(label: str, seed: int) -> Optional[float]:
            result = by_label.get((label, seed))
            return result.rows[-1].eval_loss if result else None

        def wins(better: str, worse: str) -> Optional[int]:
            pairs = [(final_loss(better, s), final_loss(worse, s)) for s in seeds]
            pairs = [(a, b) for a, b in pairs if a is not None and b is not None]
            return sum(a < b for a, b in pairs) if pairs else None

        def mean_gap(scratch: str, upcycled: str) -> Optional[float]:
            gaps = [final_loss(scratch, s) - final_loss(upcycled, s) for s in seeds
                    if final_loss(scratch, s) is not None and final_loss(upcycled, s) is not None]
            return float(np.mean(gaps)) if gaps else None

        summary: Dict[str, Any] = {
            "seeds": seeds,
            "finals": finals,
            "means": means,
            "wins": {
                "upcycle_beats_dense_continue": wins("upcycle", "dense_continue"),
                "upcycle_beats_moe_scratch": wins("upcycle", "moe_scratch"),
                "upcycle_beats_depth_tile": wins("upcycle", "depth_tile"),
            },
            "scratch_gap": {"1x": mean_gap("moe_scratch", "upcycle")},
        }
        if budget_multiplier and budget_multiplier > 1:
            suffix = f"@{budget_multiplier}x"
            summary["scratch_gap"][f"{budget_multiplier}x"] = mean_gap("moe_scratch" + suffix, "upcycle" + suffix)
        return summary

    async def init_analysis(
        self,
        base: Checkpoint,
        grid: Sequence[GridPoint],
        task: SyntheticTask,
        batch_size: Optional[int] = None,
        seed: int = 0,
    ) -> List[Dict[str, Any]]:
        """Upcycle ``base`` at every grid point and evaluate it at step 0."""
        if base.config.is_sparse:
            raise ConfigurationError("init-analysis needs a dense checkpoint")
        batch_size = batch_size or self.config.BATCH_SIZE
        batches = task.eval_set(batch_size)
        dense_eval = self.training.evaluate(base, batches)

        def work(item: Tuple[int, GridPoint]) -> Dict[str, Any]:
            index, point = item
            try:
                upcycle_cfg = UpcycleConfig(
                    layer_strategy=point.layer_strategy,
                    num_experts=point.num_experts,
                    router=point.router,
                    k=point.k,
                    capacity_factor=point.capacity_factor,
                    group_size=point.group_size,
                    normalize_weights=point.normalize_weights,
                    seed=seed,
                )
            except ValidationError as e:
                raise ConfigurationError(f"grid point {index} is invalid: {e}") from e
            sparse, _ = self.upcycler.upcycle(base, upcycle_cfg)
            result = self.training.evaluate(sparse, batches)
            return {
                "index": index,
                **point.model_dump(),
                "layers": ",".join(str(layer) for layer in sparse.config.moe_layers),
                "eval_loss": result.loss,
                "eval_acc": result.accuracy,
                "drop_fraction": result.drop_fraction,
                "dense_eval_loss": dense_eval.loss,
            }

        self.logger.info(f"Evaluating {len(grid)} grid points at step 0")
        return await self._run_queue(list(enumerate(grid)), work)
