import argparse
import importlib
import inspect
import json
import logging
import sys
from datetime import datetime
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from .config import config
from .core.errors import (
    AlreadySparseError,
    CheckpointFormatError,
    ConfigurationError,
    ContractError,
    DimensionError,
)
from .handlers.base_handler import BaseHandler
from .services.db_service import DatabaseService
from .utils.console import ColorfulConsole
from .utils.run_config import write_resolved

logger = logging.getLogger(__name__)

# failures that are the caller's fault: exit 1
VALIDATION_ERRORS = (
    ConfigurationError,
    ContractError,
    CheckpointFormatError,
    AlreadySparseError,
    DimensionError,
    ValidationError,
)


def setup_logging() -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    try:
        Path(config.LOG_FILE).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(
            RotatingFileHandler(config.LOG_FILE, maxBytes=config.LOG_MAX_BYTES, backupCount=config.LOG_BACKUP_COUNT)
        )
    except OSError as e:
        print(f"Log file {config.LOG_FILE} unavailable: {e}", file=sys.stderr)
    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
    )


class UsageError(ConfigurationError):
    pass


class CliParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors follow the exit-code contract."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def describe_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "config"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


class UpcyclingWorkbench:
    """Command-line front end: discovers the subcommand handlers and runs one."""

    def __init__(self, console: Optional[ColorfulConsole] = None):
        self.config = config
        self.logger = logger
        self.console = console or ColorfulConsole(stderr=False)
        self.handlers = self._discover_handlers()
        self.parser = self._build_parser()
        self.db_service: Optional[DatabaseService] = None

    def _discover_handlers(self) -> Dict[str, BaseHandler]:
        """Scan app/handlers/ and register every ``*_handler.py`` subcommand."""
        handlers: Dict[str, BaseHandler] = {}
        handlers_dir = Path(__file__).parent / "handlers"
        for handler_file in sorted(handlers_dir.glob("*_handler.py")):
            if handler_file.name == "base_handler.py":
                continue
            module = importlib.import_module(f"{__package__}.handlers.{handler_file.stem}")
            for name, obj in inspect.getmembers(module, inspect.isclass):
                if issubclass(obj, BaseHandler) and obj is not BaseHandler and obj.__module__ == module.__name__:
                    instance = obj(console=self.console)
                    handlers[instance.name] = instance
                    self.logger.debug(f"Registered subcommand: {instance.name} -> {name}")
        return handlers

    def _build_parser(self) -> CliParser:
        parser = CliParser(prog="upcycle", description="Sparse upcycling workbench")
        subparsers = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)
        for name in sorted(self.handlers):
            self.handlers[name].register(subparsers)
        return parser

    def _run_dir(self, command: str, requested: Optional[str]) -> Path:
        if requested:
            return Path(requested)
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        return Path(self.config.RUNS_PATH) / f"{command}-{stamp}"

    def _open_registry(self) -> Optional[DatabaseService]:
        if not self.config.DATABASE_URL:
            return None
        try:
            if self.config.DATABASE_URL.startswith("sqlite:///"):
                db_path = Path(self.config.DATABASE_URL[len("sqlite:///"):])
                if str(db_path) != ":memory:":
                    db_path.parent.mkdir(parents=True, exist_ok=True)
            return DatabaseService(self.config.DATABASE_URL)
        except Exception as e:
            self.logger.warning(f"Run registry unavailable: {e}")
            return None

    def dispatch(self, argv: Sequence[str]) -> int:
        record_id = None
        try:
            args = self.parser.parse_args(list(argv))
        except SystemExit as e:
            # --help and --version
            return int(e.code or 0)
        except UsageError as e:
            self.console.error(e.message)
            return 1

        handler: BaseHandler = args.handler
        try:
            resolved = handler.resolve(args)
            run_dir = self._run_dir(handler.name, resolved.run_dir)
            resolved = resolved.model_copy(update={"run_dir": str(run_dir)})
            write_resolved(run_dir, handler.name, resolved)

            self.db_service = self._open_registry()
            if self.db_service:
                record_id = self.db_service.create_run_record(
                    handler.name, str(run_dir), json.dumps(resolved.model_dump(mode="json"), sort_keys=True)
                )

            self.logger.info(f"Running {handler.name} in {run_dir}")
            code = handler.run(resolved, run_dir)
            self._finish(record_id, "completed" if code == 0 else "failed", code)
            return code

        except ValidationError as e:
            message = describe_validation_error(e)
            self.console.error(f"{handler.name}: invalid configuration: {message}")
            self._finish(record_id, "failed", 1, message)
            return 1
        except VALIDATION_ERRORS as e:
            self.console.error(f"{handler.name}: {e}")
            self._finish(record_id, "failed", 1, str(e))
            return 1
        except Exception as e:
            self.logger.error(f"{handler.name} failed: {e}", exc_info=True)
            self.console.error(f"{handler.name} failed: {e}")
            self._finish(record_id, "failed", 2, str(e))
            return 2

    def _finish(self, record_id: Optional[int], status: str, code: int, error: Optional[str] = None) -> None:
        if self.db_service is None or record_id is None:
            return
        try:
            self.db_service.update_run_record(record_id, status, exit_code=code, error_message=error)
        except Exception as e:
            self.logger.warning(f"Could not update run record {record_id}: {e}")


def dispatch(argv: Sequence[str]) -> int:
    return UpcyclingWorkbench().dispatch(argv)


def main() -> None:
    setup_logging()
    try:
        sys.exit(dispatch(sys.argv[1:]))
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        sys.exit(2)


if __name__ == "__main__":
    main()
