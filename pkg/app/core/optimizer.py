"""Adafactor with factored second moments, decoupled weight decay and the
warmup / inverse-square-root / cooldown learning-rate schedule.

Slots are a flat ``{"{param}/{slot}": array}`` map so they can be stored in a
checkpoint under ``opt/``. Matrices keep ``row`` and ``col`` accumulators,
vectors keep a ``full`` accumulator, and ``momentum`` appears only when
``beta1`` is set.
"""

import logging
import math
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from ..models.training import OptimizerConfig, ScheduleConfig
from .errors import ContractError, DimensionError, NumericalError

__all__ = [
    "HEAD_PREFIX",
    "lr_at",
    "init_slots",
    "slot_names",
    "factored_second_moment",
    "adafactor_update",
    "Adafactor",
]

logger = logging.getLogger(__name__)

HEAD_PREFIX = "head/"


def _decay_factor(step: int, s: ScheduleConfig) -> float:
    if s.decay == "inverse_sqrt_timescale":
        return math.sqrt(s.timescale / max(step, s.timescale))
    if s.warmup_steps > 0:
        return math.sqrt(s.warmup_steps / max(step, s.warmup_steps))
    return 1.0 / math.sqrt(max(step, 1))


def _base_lr(step: int, s: ScheduleConfig) -> float:
    warm = step / s.warmup_steps if s.warmup_steps > 0 else 1.0
    return s.peak_lr * min(warm, _decay_factor(step, s))


def lr_at(step: int, s: ScheduleConfig) -> float:
    """peak · min(step/warmup, decay(step)), then a linear ramp to 0 over the cooldown window."""
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if s.cooldown_start is not None and step >= s.cooldown_start:
        if step >= s.cooldown_end:
            return 0.0
        start_value = _base_lr(s.cooldown_start, s)
        return start_value * (s.cooldown_end - step) / (s.cooldown_end - s.cooldown_start)
    return _base_lr(step, s)


def slot_names(name: str, shape: Tuple[int, ...], momentum: bool = False) -> Dict[str, Tuple[int, ...]]:
    if len(shape) == 2:
        slots = {f"{name}/row": (shape[0],), f"{name}/col": (shape[1],)}
    else:
        slots = {f"{name}/full": tuple(shape)}
    if momentum:
        slots[f"{name}/momentum"] = tuple(shape)
    return slots


def init_slots(params: Mapping[str, np.ndarray], momentum: bool = False) -> Dict[str, np.ndarray]:
    """Zero accumulators for every parameter."""
    slots = {}
    for name, value in params.items():
        for slot, shape in slot_names(name, value.shape, momentum).items():
            slots[slot] = np.zeros(shape, dtype=np.float32)
    return slots


def factored_second_moment(row: np.ndarray, col: np.ndarray) -> np.ndarray:
    """V̂ = outer(R, C) / sum(R)."""
    total = row.sum()
    if total <= 0:
        return np.zeros((row.size, col.size), dtype=np.float64)
    return np.outer(row, col) / total


def adafactor_update(
    param: np.ndarray,
    grad: np.ndarray,
    slots: Dict[str, np.ndarray],
    lr: float,
    weight_decay: float,
    step: int,
    options: Optional[OptimizerConfig] = None,
) -> Tuple[np.ndarray, Dict[str, np.ndarray], np.ndarray]:
    """One update of a single parameter.

    ``slots`` uses the short names ``row``/``col``/``full``/``momentum``;
    ``step`` is the 1-based update count that drives β₂ = 1 − step^(−decay).
    Returns the new parameter, the new slots and the clipped update.
    """
    options = options or OptimizerConfig()
    if grad.shape != param.shape:
        raise DimensionError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    if not np.isfinite(grad).all():
        raise NumericalError("non-finite gradient; step rejected")
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")

    g = grad.astype(np.float64)
    beta2 = 1.0 - max(step, 1) ** (-options.decay_exponent)
    squared = g * g + options.eps
    updated: Dict[str, np.ndarray] = {}

    if param.ndim == 2:
        row = beta2 * slots["row"].astype(np.float64) + (1.0 - beta2) * squared.sum(axis=1)
        col = beta2 * slots["col"].astype(np.float64) + (1.0 - beta2) * squared.sum(axis=0)
        second_moment = factored_second_moment(row, col)
        updated["row"], updated["col"] = row, col
    else:
        second_moment = beta2 * slots["full"].astype(np.float64) + (1.0 - beta2) * squared
        updated["full"] = second_moment

    update = g / np.sqrt(second_moment)
    rms = math.sqrt(float(np.mean(update * update))) if update.size else 0.0
    update = update / max(1.0, rms / options.clip_threshold)

    if options.beta1 is not None:
        momentum = options.beta1 * slots["momentum"].astype(np.float64) + (1.0 - options.beta1) * update
        updated["momentum"] = momentum
        update = momentum

    source = param.astype(np.float64)
    new_param = source - lr * update - lr * weight_decay * source
    new_slots = {key: value.astype(np.float32) for key, value in updated.items()}
    return new_param.astype(np.float32), new_slots, update


class Adafactor:
    """Applies ``adafactor_update`` to every parameter of a model.

    The ``head/`` tensors use the head weight decay, everything else the
    body weight decay.
    """

    def __init__(self, schedule: ScheduleConfig, options: Optional[OptimizerConfig] = None):
        self.schedule = schedule
        self.options = options or OptimizerConfig()
        self.logger = logging.getLogger(self.__class__.__name__)

    @property
    def uses_momentum(self) -> bool:
        return self.options.beta1 is not None

    def init_slots(self, params: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        return init_slots(params, self.uses_momentum)

    def weight_decay_for(self, name: str) -> float:
        if name.startswith(HEAD_PREFIX):
            return self.schedule.weight_decay_head
        return self.schedule.weight_decay_body

    def ensure_slots(self, params: Mapping[str, np.ndarray], slots: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Fill in zero slots for parameters that have none yet."""
        completed = dict(slots)
        for name, value in params.items():
            for slot, shape in slot_names(name, value.shape, self.uses_momentum).items():
                if slot not in completed:
                    completed[slot] = np.zeros(shape, dtype=np.float32)
                elif completed[slot].shape != shape:
                    raise DimensionError(f"slot {slot} has shape {completed[slot].shape}, expected {shape}")
        return completed

    def step(
        self,
        params: Dict[str, np.ndarray],
        grads: Mapping[str, np.ndarray],
        slots: Dict[str, np.ndarray],
        step: int,
    ) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray], float]:
        """Update taken at schedule position ``step`` (0-based). Returns params, slots and the lr used."""
        lr = lr_at(step, self.schedule)
        bad = [name for name, grad in grads.items() if not np.isfinite(grad).all()]
        if bad:
            raise NumericalError(f"non-finite gradient in {', '.join(bad[:3])}; step rejected")

        new_params = dict(params)
        new_slots = self.ensure_slots(params, slots)
        for name, value in params.items():
            grad = grads.get(name)
            if grad is None:
                grad = np.zeros_like(value)
            prefix = name + "/"
            own = {key[len(prefix):]: new_slots[key] for key in slot_names(name, value.shape, self.uses_momentum)}
            new_params[name], updated, _ = adafactor_update(
                value, grad, own, lr, self.weight_decay_for(name), step + 1, self.options
            )
            for key, array in updated.items():
                new_slots[prefix + key] = array
        return new_params, new_slots, lr
