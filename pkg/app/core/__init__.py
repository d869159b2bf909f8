"""Numerical engine: autodiff tensors, Transformer blocks, MoE routing,
Adafactor and the checkpoint format."""

from .checkpoint import Checkpoint, load, save
from .errors import (
    AlreadySparseError,
    CheckpointFormatError,
    ConfigurationError,
    ContractError,
    DimensionError,
    NumericalError,
    TrainingDivergedError,
    UpcycleError,
)
from .optimizer import Adafactor, init_slots, lr_at
from .rng import RngState
from .tensor import Tensor, no_grad, precision
from .transformer import Transformer, count_flops, forward, param_count, param_shapes
