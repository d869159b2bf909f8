import argparse
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Optional, Type

from pydantic import BaseModel

from ..config import config
from ..core.checkpoint import Checkpoint, load
from ..models.runs import RunConfig
from ..models.training import TaskConfig
from ..utils.console import ColorfulConsole
from ..utils.run_config import resolve

# argparse destinations that are not config keys
RESERVED_DESTS = ("command", "config", "handler")

ROUTER_ALIASES = {
    "ec": "expert_choice",
    "expert_choice": "expert_choice",
    "expert-choice": "expert_choice",
    "topk": "top_k",
    "top_k": "top_k",
    "top-k": "top_k",
    "switch": "top_k",
}


def router_type(value: str) -> str:
    try:
        return ROUTER_ALIASES[value.lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"unknown router {value!r}; use ec or topk") from None


def int_list(value: str):
    try:
        return [int(item) for item in value.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def float_list(value: str):
    try:
        return [float(item) for item in value.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from None


def str_list(value: str):
    return [item.strip() for item in value.split(",") if item.strip()]


class BaseHandler(ABC):
    """One CLI subcommand: its flags, its resolved config and its work.

    Flag destinations are dotted config paths (``train.schedule.peak_lr``), so
    a YAML config file and the flags describe the same keys.
    """

    name: str = ""
    help: str = ""
    run_model: Type[RunConfig] = RunConfig

    def __init__(self, console: Optional[ColorfulConsole] = None):
        self.config = config
        self.console = console or ColorfulConsole()
        self.logger = logging.getLogger(self.__class__.__name__)

    def register(self, subparsers) -> argparse.ArgumentParser:
        parser = subparsers.add_parser(self.name, help=self.help, description=self.help)
        parser.add_argument("--config", help="YAML file with the run configuration; flags override its keys")
        parser.add_argument("--run-dir", dest="run_dir", help="output directory (default: RUNS_PATH/<command>-<time>)")
        self.add_arguments(parser)
        parser.set_defaults(handler=self)
        return parser

    @abstractmethod
    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        pass

    def base_values(self, args: argparse.Namespace) -> Dict[str, Any]:
        """Values layered under the config file, e.g. a named preset."""
        return {}

    def overrides(self, args: argparse.Namespace) -> Dict[str, Any]:
        return {key: value for key, value in vars(args).items() if key not in RESERVED_DESTS}

    def resolve(self, args: argparse.Namespace) -> BaseModel:
        return resolve(self.run_model, args.config, self.overrides(args), self.base_values(args))

    @abstractmethod
    def run(self, resolved: BaseModel, run_dir: Path) -> int:
        pass

    # shared helpers

    def load_checkpoint(self, path: str) -> Checkpoint:
        self.logger.info(f"Loading checkpoint {path}")
        return load(path)

    @staticmethod
    def output_path(run_dir: Path, name: str) -> Path:
        path = Path(name)
        return path if path.is_absolute() else run_dir / path

    @staticmethod
    def task_for(task: TaskConfig, ckpt: Checkpoint) -> TaskConfig:
        """The task must speak the model's vocabulary and sequence length."""
        return task.model_copy(update={"vocab_size": ckpt.config.vocab_size, "seq_len": ckpt.config.seq_len})
