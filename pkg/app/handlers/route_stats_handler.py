import argparse
from pathlib import Path

import numpy as np

from ..core.rng import RngState
from ..core.routing import normalize_combine_weights, route, routing_stats
from ..models.runs import RouteStatsRun
from ..utils.metrics_writer import write_csv
from .base_handler import BaseHandler, router_type

SETTINGS = ("router", "C", "K", "E", "G", "n")
STATS = ("drop_fraction", "max_load", "min_load", "total_assignments", "weight_mass", "capacity")
COLUMNS = (*SETTINGS, "seed", *STATS)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


class RouteStatsHandler(BaseHandler):
    name = "route-stats"
    help = "Routing statistics (loads, drops) over random routers"
    run_model = RouteStatsRun

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--router", dest="router", type=router_type, help="ec (Expert Choice) or topk (Top-K)")
        parser.add_argument("--C", "--capacity", dest="capacity_factor", type=float, help="capacity factor C")
        parser.add_argument("--E", "--experts", dest="num_experts", type=int, help="number of experts E")
        parser.add_argument("--n", "--tokens", dest="num_tokens", type=int, help="tokens per routing call")
        parser.add_argument("--G", "--group-size", dest="group_size", type=int, help="group size (default: all tokens)")
        parser.add_argument("--k", dest="k", type=int, help="experts per token for topk")
        parser.add_argument("--bpr", dest="bpr", action=argparse.BooleanOptionalAction, default=None,
                            help="batch prioritized routing for topk")
        parser.add_argument("--normalize", dest="normalize_weights", action=argparse.BooleanOptionalAction, default=None)
        parser.add_argument("--seeds", dest="seeds", type=int, help="number of random routers")
        parser.add_argument("--logit-std", dest="logit_stddev", type=float, help="stddev of the random router logits")

    def run(self, resolved: RouteStatsRun, run_dir: Path) -> int:
        group_size = resolved.group_size or resolved.num_tokens
        settings = dict(zip(SETTINGS, (resolved.router, resolved.capacity_factor, resolved.k,
                                       resolved.num_experts, group_size, resolved.num_tokens)))
        rows = []
        for seed in range(resolved.seeds):
            logits = RngState(seed=seed).normal(
                (resolved.num_tokens, resolved.num_experts), resolved.logit_stddev, "route_stats"
            ).astype(np.float64)
            decision = route(softmax_rows(logits), resolved.router, resolved.capacity_factor, group_size,
                             resolved.k, resolved.bpr)
            if resolved.normalize_weights:
                decision = normalize_combine_weights(decision)
            stats = routing_stats(decision)
            rows.append({**settings, "seed": seed, **{key: stats[key] for key in STATS}})

        path = write_csv(run_dir / "route_stats.csv", COLUMNS, rows)
        mean_drop = float(np.mean([row["drop_fraction"] for row in rows]))
        self.console.info(
            f"{resolved.seeds} routers: mean drop_fraction={mean_drop:.4f}, "
            f"loads in [{min(r['min_load'] for r in rows)}, {max(r['max_load'] for r in rows)}]; wrote {path}"
        )
        return 0
