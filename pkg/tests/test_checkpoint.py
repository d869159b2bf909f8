import json
import struct

import numpy as np
import pytest

from app.core.checkpoint import MAGIC, Checkpoint, load, read_manifest, save
from app.core.errors import CheckpointFormatError, NumericalError
from app.core.optimizer import init_slots
from app.core.rng import RngState
from app.models.surgery import UpcycleConfig
from app.services.upcycler_service import UpcyclerService
from tests.conftest import dense_checkpoint, tiny_model


def _split(path):
    raw = path.read_bytes()
    (length,) = struct.unpack("<Q", raw[8:16])
    return json.loads(raw[16:16 + length]), raw[16 + length:]


def _rewrite(path, manifest, payload):
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header + payload)


def test_round_trip_is_exact(tmp_path, dense_ckpt):
    ckpt = dense_ckpt.with_updates(opt_slots=init_slots(dense_ckpt.params), step=7, rng=RngState(seed=3, counter=7))
    save(ckpt, tmp_path / "a.ckpt")
    loaded = load(tmp_path / "a.ckpt")
    assert loaded.step == 7
    assert loaded.rng == ckpt.rng
    assert loaded.config == ckpt.config
    assert set(loaded.params) == set(ckpt.params)
    assert all(np.array_equal(loaded.params[name], ckpt.params[name]) for name in ckpt.params)
    assert set(loaded.opt_slots) == set(ckpt.opt_slots)


def test_saves_are_byte_stable(tmp_path, dense_ckpt):
    save(dense_ckpt, tmp_path / "a.ckpt")
    save(dense_ckpt, tmp_path / "b.ckpt")
    save(load(tmp_path / "a.ckpt"), tmp_path / "c.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "c.ckpt").read_bytes()


def test_layout_is_sorted_and_contiguous(tmp_path, dense_ckpt):
    save(dense_ckpt.with_updates(opt_slots=init_slots(dense_ckpt.params)), tmp_path / "a.ckpt")
    manifest = read_manifest(tmp_path / "a.ckpt")
    names = [entry["name"] for entry in manifest["entries"]]
    assert names == sorted(names)
    assert any(name.startswith("opt/") for name in names)
    offset = 0
    for entry in manifest["entries"]:
        assert entry["byte_offset"] == offset
        offset += entry["byte_length"]


def test_model_without_blocks_parses(tmp_path):
    cfg = tiny_model(num_layers=0)
    save(dense_checkpoint(cfg), tmp_path / "empty.ckpt")
    assert load(tmp_path / "empty.ckpt").config.num_layers == 0


def test_truncated_payload(tmp_path, dense_ckpt):
    path = tmp_path / "a.ckpt"
    save(dense_ckpt, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointFormatError) as excinfo:
        load(path)
    assert excinfo.value.invariant == "payload_size"


def test_shape_and_length_disagree(tmp_path, dense_ckpt):
    path = tmp_path / "a.ckpt"
    save(dense_ckpt, path)
    manifest, payload = _split(path)
    manifest["entries"][0]["shape"] = [1]
    _rewrite(path, manifest, payload)
    with pytest.raises(CheckpointFormatError) as excinfo:
        load(path)
    assert excinfo.value.invariant == "shape_size"


def test_overlapping_offsets(tmp_path, dense_ckpt):
    path = tmp_path / "a.ckpt"
    save(dense_ckpt, path)
    manifest, payload = _split(path)
    manifest["entries"][1]["byte_offset"] = 0
    _rewrite(path, manifest, payload)
    with pytest.raises(CheckpointFormatError) as excinfo:
        load(path)
    assert excinfo.value.invariant == "offsets"


def test_bad_magic_and_version(tmp_path, dense_ckpt):
    path = tmp_path / "a.ckpt"
    save(dense_ckpt, path)
    manifest, payload = _split(path)
    manifest["format_version"] = 99
    _rewrite(path, manifest, payload)
    with pytest.raises(CheckpointFormatError) as excinfo:
        load(path)
    assert excinfo.value.invariant == "format_version"

    path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(CheckpointFormatError) as excinfo:
        load(path)
    assert excinfo.value.invariant == "magic"


def test_missing_parameter_is_rejected(tmp_path, dense_ckpt):
    params = dict(dense_ckpt.params)
    del params["head/b"]
    save(Checkpoint(config=dense_ckpt.config, params=params), tmp_path / "a.ckpt")
    with pytest.raises(CheckpointFormatError) as excinfo:
        load(tmp_path / "a.ckpt")
    assert excinfo.value.invariant == "parameters"


def test_non_finite_values_are_not_saved(tmp_path, dense_ckpt):
    params = dict(dense_ckpt.params)
    params["head/b"] = np.full_like(params["head/b"], np.nan)
    with pytest.raises(NumericalError):
        save(dense_ckpt.with_updates(params=params), tmp_path / "a.ckpt")


def test_surgery_report_survives_round_trip(tmp_path):
    dense = dense_checkpoint(tiny_model(num_layers=4))
    sparse, report = UpcyclerService().upcycle(dense, UpcycleConfig(num_experts=4, capacity_factor=4.0))
    save(sparse, tmp_path / "sparse.ckpt")
    loaded = load(tmp_path / "sparse.ckpt")
    assert loaded.meta["surgery"]["params_after"] == report.params_after == loaded.param_count()
    assert loaded.config.moe_layers == [1, 3]
