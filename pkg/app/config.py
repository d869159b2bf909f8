import os
from typing import Dict, Any, List
from pathlib import Path
from dotenv import load_dotenv
import logging

# Load environment variables
load_dotenv()

class Config:
    """Centralized configuration management loading all parameters from .env"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

        # Storage Configuration
        self.DATABASE_URL = os.getenv("DATABASE_URL", "sqlite:///./data/runs.db")
        self.RUNS_PATH = os.getenv("RUNS_PATH", "./runs")
        self.PRESETS_FILE = os.getenv("PRESETS_FILE", "./data/presets.yml")
        self.MAX_CONCURRENT_RUNS = int(os.getenv("MAX_CONCURRENT_RUNS", "1"))
        self.DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "0"))

        # Toy Model Configuration
        self.MODEL_NUM_LAYERS = int(os.getenv("MODEL_NUM_LAYERS", "8"))
        self.MODEL_D_MODEL = int(os.getenv("MODEL_D_MODEL", "64"))
        self.MODEL_D_FF = int(os.getenv("MODEL_D_FF", "256"))
        self.MODEL_NUM_HEADS = int(os.getenv("MODEL_NUM_HEADS", "4"))
        self.MODEL_SEQ_LEN = int(os.getenv("MODEL_SEQ_LEN", "32"))
        self.MODEL_VOCAB_SIZE = int(os.getenv("MODEL_VOCAB_SIZE", "64"))
        self.MODEL_INIT_STDDEV = self._parse_float("MODEL_INIT_STDDEV", 0.02)

        # Routing Configuration
        self.NUM_EXPERTS = int(os.getenv("NUM_EXPERTS", "8"))
        self.CAPACITY_FACTOR = self._parse_float("CAPACITY_FACTOR", 2.0)
        self.GROUP_SIZE = int(os.getenv("GROUP_SIZE", "4096"))
        self.TOP_K = int(os.getenv("TOP_K", "2"))
        self.ROUTER_INIT_STDDEV = self._parse_float("ROUTER_INIT_STDDEV", 0.02)
        self.AUX_LOSS_FACTOR = self._parse_float("AUX_LOSS_FACTOR", 0.01)
        self.NORMALIZE_WEIGHTS = self._parse_bool("NORMALIZE_WEIGHTS", True)
        self.BATCH_PRIORITIZED_ROUTING = self._parse_bool("BATCH_PRIORITIZED_ROUTING", True)
        self.NOISE_TRUNCATION = self._parse_float("NOISE_TRUNCATION", 2.0)

        # Optimizer and Schedule Configuration
        self.PEAK_LR = self._parse_float("PEAK_LR", 0.01)
        self.WARMUP_STEPS = int(os.getenv("WARMUP_STEPS", "200"))
        self.DECAY_TIMESCALE = int(os.getenv("DECAY_TIMESCALE", "1000"))
        self.WEIGHT_DECAY_HEAD = self._parse_float("WEIGHT_DECAY_HEAD", 0.03)
        self.WEIGHT_DECAY_BODY = self._parse_float("WEIGHT_DECAY_BODY", 0.0003)
        self.ADAFACTOR_DECAY_EXPONENT = self._parse_float("ADAFACTOR_DECAY_EXPONENT", 0.8)
        self.ADAFACTOR_EPS = self._parse_float("ADAFACTOR_EPS", 1e-30)
        self.ADAFACTOR_CLIP_THRESHOLD = self._parse_float("ADAFACTOR_CLIP_THRESHOLD", 1.0)

        # Harness Configuration
        self.BATCH_SIZE = int(os.getenv("BATCH_SIZE", "32"))
        self.NUM_CLUSTERS = int(os.getenv("NUM_CLUSTERS", "8"))
        self.MASK_FRACTION = self._parse_float("MASK_FRACTION", 0.15)
        self.TRANSITION_CONCENTRATION = self._parse_float("TRANSITION_CONCENTRATION", 0.1)
        self.EVAL_EVERY = int(os.getenv("EVAL_EVERY", "100"))
        self.EVAL_TOKENS = int(os.getenv("EVAL_TOKENS", "2048"))
        self.PRETRAIN_STEPS = int(os.getenv("PRETRAIN_STEPS", "4000"))
        self.EXTRA_STEPS = int(os.getenv("EXTRA_STEPS", "2000"))
        self.TILE_LAYERS = int(os.getenv("TILE_LAYERS", "12"))
        self.PROBE_L2 = self._parse_float("PROBE_L2", 1024.0)
        self.PROBE_SEEDS = int(os.getenv("PROBE_SEEDS", "5"))
        self.COMPARISON_ARMS = self._parse_list(
            "COMPARISON_ARMS", ["dense_continue", "upcycle", "moe_scratch", "depth_tile"]
        )

        # Logging Configuration
        self.LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
        self.LOG_FILE = os.getenv("LOG_FILE", "./logs/upcycle.log")
        self.LOG_MAX_BYTES = int(os.getenv("LOG_MAX_BYTES", "10485760"))  # 10MB
        self.LOG_BACKUP_COUNT = int(os.getenv("LOG_BACKUP_COUNT", "5"))

        # Validate configuration
        self._validate_config()

        self.logger.debug("Configuration loaded successfully")

    def _parse_bool(self, key: str, default: bool = False) -> bool:
        """Parse boolean value from environment variable"""
        value = os.getenv(key, "").lower()
        if value in ("true", "1", "yes", "on"):
            return True
        elif value in ("false", "0", "no", "off"):
            return False
        return default

    def _parse_float(self, key: str, default: float) -> float:
        """Parse float value from environment variable"""
        value = os.getenv(key)
        if not value:
            return default
        try:
            return float(value)
        except ValueError:
            self.logger.warning(f"Invalid float for {key}: {value!r}, using {default}")
            return default

    def _parse_list(self, key: str, default: List[str] = None) -> List[str]:
        """Parse comma-separated list from environment variable"""
        if default is None:
            default = []

        value = os.getenv(key)
        if value:
            return [item.strip() for item in value.split(",") if item.strip()]
        return default

    def get_model_defaults(self) -> Dict[str, Any]:
        """Toy dense model configuration"""
        return {
            "num_layers": self.MODEL_NUM_LAYERS,
            "d_model": self.MODEL_D_MODEL,
            "d_ff": self.MODEL_D_FF,
            "num_heads": self.MODEL_NUM_HEADS,
            "vocab_size": self.MODEL_VOCAB_SIZE,
            "seq_len": self.MODEL_SEQ_LEN,
            "num_experts": self.NUM_EXPERTS,
            "capacity_factor": self.CAPACITY_FACTOR,
            "group_size": self.GROUP_SIZE,
            "k": self.TOP_K,
            "normalize_weights": self.NORMALIZE_WEIGHTS,
            "bpr": self.BATCH_PRIORITIZED_ROUTING,
            "aux_loss_factor": self.AUX_LOSS_FACTOR,
        }

    def _validate_config(self):
        """Validate configuration ranges"""
        positive_fields = {
            "MODEL_NUM_LAYERS": self.MODEL_NUM_LAYERS,
            "MODEL_D_MODEL": self.MODEL_D_MODEL,
            "MODEL_D_FF": self.MODEL_D_FF,
            "MODEL_NUM_HEADS": self.MODEL_NUM_HEADS,
            "MODEL_SEQ_LEN": self.MODEL_SEQ_LEN,
            "GROUP_SIZE": self.GROUP_SIZE,
            "BATCH_SIZE": self.BATCH_SIZE,
            "MAX_CONCURRENT_RUNS": self.MAX_CONCURRENT_RUNS,
            "CAPACITY_FACTOR": self.CAPACITY_FACTOR,
        }

        invalid_fields = [field for field, value in positive_fields.items() if value <= 0]

        if invalid_fields:
            raise ValueError(f"Configuration values must be positive: {', '.join(invalid_fields)}")

        if not 0.0 <= self.MASK_FRACTION < 1.0:
            raise ValueError(f"MASK_FRACTION must lie in [0, 1), got {self.MASK_FRACTION}")

        # Validate paths
        Path(self.LOG_FILE).parent.mkdir(parents=True, exist_ok=True)

# Global config instance
config = Config()
