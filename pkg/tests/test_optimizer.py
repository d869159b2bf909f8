import math

import numpy as np
import pytest

from app.core.errors import ContractError, NumericalError
from app.core.optimizer import (
    Adafactor,
    adafactor_update,
    factored_second_moment,
    init_slots,
    lr_at,
)
from app.core.transformer import param_count
from app.models.training import OptimizerConfig, ScheduleConfig


def test_lr_reaches_peak_at_end_of_warmup():
    schedule = ScheduleConfig(peak_lr=0.01, warmup_steps=100, timescale=100)
    assert lr_at(100, schedule) == pytest.approx(0.01)
    assert lr_at(50, schedule) == pytest.approx(0.005)
    assert lr_at(0, schedule) == 0.0


@pytest.mark.parametrize("decay,timescale", [
    ("inverse_sqrt_timescale", 100), ("inverse_sqrt_timescale", 1000), ("inverse_sqrt_plain", 100),
])
def test_lr_is_continuous_at_the_warmup_handover(decay, timescale):
    schedule = ScheduleConfig(peak_lr=0.01, warmup_steps=100, decay=decay, timescale=timescale)
    before, at, after = (lr_at(step, schedule) for step in (99, 100, 101))
    assert at == pytest.approx(0.01)
    assert before < at and after <= at
    assert at - before <= 0.01 / 100 + 1e-12
    assert at - after <= 0.01 / 100 + 1e-12
    values = [lr_at(step, schedule) for step in range(500)]
    assert max(abs(b - a) for a, b in zip(values, values[1:])) <= 0.01 / 100 + 1e-12


def test_lr_timescale_decay():
    schedule = ScheduleConfig(peak_lr=0.01, warmup_steps=10_000, timescale=100_000)
    assert lr_at(400_000, schedule) == pytest.approx(0.005)


def test_lr_plain_decay():
    schedule = ScheduleConfig(peak_lr=1.0, warmup_steps=100, decay="inverse_sqrt_plain")
    assert lr_at(400, schedule) == pytest.approx(0.5)


def test_lr_cooldown_ramps_to_zero():
    schedule = ScheduleConfig(peak_lr=1.0, warmup_steps=10, timescale=10, cooldown_start=100, cooldown_end=200)
    start = lr_at(100, schedule)
    assert start == pytest.approx(math.sqrt(10 / 100))
    assert lr_at(150, schedule) == pytest.approx(start / 2)
    assert lr_at(200, schedule) == 0.0
    assert lr_at(500, schedule) == 0.0


def test_lr_rejects_negative_step():
    with pytest.raises(ContractError):
        lr_at(-1, ScheduleConfig())


def test_cooldown_bounds_are_validated():
    with pytest.raises(ValueError):
        ScheduleConfig(cooldown_start=10)
    with pytest.raises(ValueError):
        ScheduleConfig(cooldown_start=10, cooldown_end=5)


def test_init_slots_shapes_and_count(tiny_config):
    from app.core.rng import RngState
    from app.core.transformer import init_params

    params = init_params(tiny_config, RngState(seed=0))
    slots = init_slots(params)
    assert all(not value.any() for value in slots.values())
    assert slots["head/W/row"].shape == (tiny_config.d_model,)
    assert slots["head/W/col"].shape == (tiny_config.vocab_size,)
    assert slots["head/b/full"].shape == (tiny_config.vocab_size,)
    expected = sum(
        value.shape[0] + value.shape[1] if value.ndim == 2 else value.size for value in params.values()
    )
    assert sum(value.size for value in slots.values()) == expected
    assert expected < param_count(tiny_config)


def test_zero_gradient_and_decay_leave_params_unchanged():
    param = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    slots = {"row": np.zeros(3, dtype=np.float32), "col": np.zeros(4, dtype=np.float32)}
    new_param, _, _ = adafactor_update(param, np.zeros_like(param), slots, lr=0.1, weight_decay=0.0, step=1)
    np.testing.assert_allclose(new_param, param, atol=1e-6)


@pytest.mark.parametrize("seed", range(100))
def test_factored_moment_is_exact_for_rank_one(seed):
    rng = np.random.default_rng(seed)
    rows, cols = rng.integers(1, 9, size=2)
    a, b = rng.uniform(0.01, 3.0, size=rows), rng.uniform(0.01, 3.0, size=cols)
    full = np.outer(a, b)
    estimate = factored_second_moment(full.sum(axis=1), full.sum(axis=0))
    np.testing.assert_allclose(estimate, full, rtol=1e-6)


def test_scalar_path_matches_rmsprop_oracle():
    options = OptimizerConfig(eps=1e-30, clip_threshold=1.0, decay_exponent=0.8)
    param = np.array([0.5, -0.25], dtype=np.float32)
    slots = {"full": np.zeros(2, dtype=np.float32)}
    grads = [np.array([0.1, -0.3]), np.array([0.2, 0.05]), np.array([-0.4, 0.1])]

    expected = param.astype(np.float64)
    v = np.zeros(2)
    for t, grad in enumerate(grads, start=1):
        param, slots, _ = adafactor_update(param, grad.astype(np.float32), slots, 0.01, 0.0, t, options)
        beta2 = 1.0 - t ** -0.8
        v = beta2 * v + (1.0 - beta2) * (grad.astype(np.float32).astype(np.float64) ** 2 + 1e-30)
        update = grad.astype(np.float32) / np.sqrt(v)
        update = update / max(1.0, np.sqrt(np.mean(update ** 2)))
        expected = expected - 0.01 * update
    np.testing.assert_allclose(param, expected, rtol=1e-5)


def test_update_rms_is_clipped():
    rng = np.random.default_rng(1)
    param = rng.normal(size=(6, 5)).astype(np.float32)
    slots = {"row": np.zeros(6, dtype=np.float32), "col": np.zeros(5, dtype=np.float32)}
    for alpha in (1e-3, 1.0, 1e3):
        grad = (alpha * rng.normal(size=(6, 5))).astype(np.float32)
        _, _, update = adafactor_update(param, grad, slots, 0.1, 0.0, 1)
        assert math.sqrt(float(np.mean(update ** 2))) <= 1.0 + 1e-6


def test_weight_decay_contracts_parameters():
    param = np.full((2, 2), 2.0, dtype=np.float32)
    slots = {"row": np.zeros(2, dtype=np.float32), "col": np.zeros(2, dtype=np.float32)}
    new_param, _, _ = adafactor_update(param, np.zeros_like(param), slots, lr=0.5, weight_decay=0.1, step=1)
    np.testing.assert_allclose(new_param, 2.0 * (1 - 0.05), rtol=1e-6)


def test_non_finite_gradient_is_rejected():
    slots = {"full": np.zeros(2, dtype=np.float32)}
    with pytest.raises(NumericalError):
        adafactor_update(np.zeros(2, dtype=np.float32), np.array([np.nan, 0.0]), slots, 0.1, 0.0, 1)


def test_adafactor_uses_head_weight_decay_and_momentum():
    schedule = ScheduleConfig(peak_lr=0.1, warmup_steps=0, timescale=1, weight_decay_head=0.5, weight_decay_body=0.0)
    optimizer = Adafactor(schedule, OptimizerConfig(beta1=0.9))
    params = {"head/b": np.ones(3, dtype=np.float32), "block0/ln1/bias": np.ones(3, dtype=np.float32)}
    slots = optimizer.init_slots(params)
    assert "head/b/momentum" in slots
    zero = {name: np.zeros(3, dtype=np.float32) for name in params}
    new_params, new_slots, lr = optimizer.step(params, zero, slots, 0)
    assert lr == pytest.approx(0.1)
    np.testing.assert_allclose(new_params["head/b"], 1.0 - 0.1 * 0.5)
    np.testing.assert_allclose(new_params["block0/ln1/bias"], 1.0)
    assert set(new_slots) == set(slots)
