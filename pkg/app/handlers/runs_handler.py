import argparse
import json
from pathlib import Path
from typing import Any, Dict

from ..core.errors import ConfigurationError
from ..models.runs import RunsRun
from ..services.db_service import DatabaseService, RunRecord
from ..utils.metrics_writer import write_json
from .base_handler import BaseHandler


def record_summary(record: RunRecord, with_config: bool = False) -> Dict[str, Any]:
    summary = {
        "id": record.id,
        "subcommand": record.subcommand,
        "status": record.status,
        "exit_code": record.exit_code,
        "run_dir": record.run_dir,
        "created_at": record.created_at.isoformat() if record.created_at else None,
        "completed_at": record.completed_at.isoformat() if record.completed_at else None,
        "error_message": record.error_message,
    }
    if with_config:
        summary["resolved_config"] = json.loads(record.resolved_config) if record.resolved_config else None
    return summary


class RunsHandler(BaseHandler):
    name = "runs"
    help = "List recorded runs from the run registry, or show one run in full"
    run_model = RunsRun

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--limit", dest="limit", type=int, help="number of runs to list (newest first)")
        parser.add_argument("--command", dest="subcommand", help="only runs of this subcommand")
        parser.add_argument("--id", dest="run_id", type=int, help="show one run with its resolved config")

    def run(self, resolved: RunsRun, run_dir: Path) -> int:
        if not self.config.DATABASE_URL:
            raise ConfigurationError("the run registry is disabled; set DATABASE_URL to list runs")
        registry = DatabaseService(self.config.DATABASE_URL)

        if resolved.run_id is not None:
            record = registry.get_run(resolved.run_id)
            if record is None:
                raise ConfigurationError(f"no run with id {resolved.run_id}")
            summary = record_summary(record, with_config=True)
            write_json(run_dir / "runs.json", [summary])
            self.console.mapping(f"Run {record.id}", {k: v for k, v in summary.items() if k != "resolved_config"})
            return 0

        records = [record_summary(record) for record in registry.recent_runs(resolved.limit, resolved.subcommand)]
        path = write_json(run_dir / "runs.json", records)
        self.console.table(
            "Recent runs", ("id", "subcommand", "status", "exit", "created", "run dir"),
            [(r["id"], r["subcommand"], r["status"], r["exit_code"], r["created_at"], r["run_dir"]) for r in records],
        )
        self.logger.info(f"Listed {len(records)} runs; wrote {path}")
        return 0
