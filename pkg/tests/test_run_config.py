import pytest
from pydantic import ValidationError

from app.core.errors import ConfigurationError
from app.models.runs import CompareRun, RouteStatsRun, TrainRun, UpcycleRun
from app.utils.run_config import DEFAULT_PRESETS, load_presets, load_yaml_file, merge, resolve, set_path


def test_set_path_builds_nested_mappings():
    values = {}
    set_path(values, "train.schedule.peak_lr", 0.1)
    set_path(values, "train.steps", 5)
    assert values == {"train": {"schedule": {"peak_lr": 0.1}, "steps": 5}}
    with pytest.raises(ConfigurationError):
        set_path({"train": 3}, "train.steps", 1)


def test_merge_is_deep_and_does_not_mutate():
    base = {"upcycle": {"num_experts": 8, "router": "expert_choice"}}
    merged = merge(base, {"upcycle": {"num_experts": 4}})
    assert merged == {"upcycle": {"num_experts": 4, "router": "expert_choice"}}
    assert base["upcycle"]["num_experts"] == 8


def test_flags_override_file_over_presets(tmp_path):
    path = tmp_path / "run.yml"
    path.write_text("checkpoint: a.ckpt\nupcycle:\n  num_experts: 4\n  capacity_factor: 1.0\n")
    resolved = resolve(
        UpcycleRun, str(path),
        {"upcycle.capacity_factor": 2.0, "upcycle.k": None},
        {"upcycle": {"num_experts": 16, "layer_strategy": "last:1"}},
    )
    assert resolved.upcycle.num_experts == 4
    assert resolved.upcycle.capacity_factor == 2.0
    assert resolved.upcycle.layer_strategy.describe() == "last:1"


def test_unknown_keys_are_rejected():
    with pytest.raises(ValidationError):
        resolve(UpcycleRun, None, {"checkpoint": "a.ckpt", "upcycle.num_expert": 4})


def test_bad_yaml_files(tmp_path):
    with pytest.raises(ConfigurationError):
        load_yaml_file(str(tmp_path / "missing.yml"))
    listing = tmp_path / "list.yml"
    listing.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigurationError):
        load_yaml_file(str(listing))
    broken = tmp_path / "broken.yml"
    broken.write_text("a: [1, 2\n")
    with pytest.raises(ConfigurationError):
        load_yaml_file(str(broken))


def test_presets_fall_back_to_defaults(tmp_path):
    assert load_presets(str(tmp_path / "absent.yml")) == DEFAULT_PRESETS
    shipped = load_presets("data/presets.yml")
    assert "default" in shipped["upcycle"]
    assert shipped["upcycle"]["identity"]["num_experts"] == 1


def test_run_model_checks():
    with pytest.raises(ValidationError):
        TrainRun(fresh=True, checkpoint="a.ckpt")
    with pytest.raises(ValidationError):
        CompareRun(checkpoint="a.ckpt", arms=["distill"])
    with pytest.raises(ValidationError):
        RouteStatsRun(router="top_k", k=3, num_experts=2)
