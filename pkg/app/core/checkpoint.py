"""Checkpoint file format.

Layout: 8-byte magic ``MOEUPCK1``, 8-byte little-endian header length, the
UTF-8 JSON manifest, then the raw little-endian float32 payload. Entries are
written in sorted name order with ascending, contiguous offsets, and the
manifest is serialised with sorted keys, so equal states give equal files.
"""

import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..models.model_config import ModelConfig
from .errors import CheckpointFormatError, NumericalError
from .rng import RngState
from .transformer import param_shapes

__all__ = ["MAGIC", "FORMAT_VERSION", "OPT_PREFIX", "Checkpoint", "save", "load", "read_manifest"]

logger = logging.getLogger(__name__)

MAGIC = b"MOEUPCK1"
FORMAT_VERSION = 1
OPT_PREFIX = "opt/"
_LENGTH = struct.Struct("<Q")
_F32 = np.dtype("<f4")

PathLike = Union[str, os.PathLike]


class Checkpoint(BaseModel):
    """Parameters, optimizer slots, step counter, RNG state and config."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: ModelConfig
    params: Dict[str, np.ndarray]
    opt_slots: Dict[str, np.ndarray] = Field(default_factory=dict)
    step: int = Field(0, ge=0)
    rng: RngState = Field(default_factory=RngState)
    meta: Dict[str, Any] = Field(default_factory=dict)

    def tensors(self) -> Dict[str, np.ndarray]:
        """Every stored tensor under its file name."""
        named = dict(self.params)
        for name, value in self.opt_slots.items():
            named[OPT_PREFIX + name] = value
        return named

    def param_count(self) -> int:
        return int(sum(value.size for value in self.params.values()))

    def slot_count(self) -> int:
        return int(sum(value.size for value in self.opt_slots.values()))

    def with_updates(self, **changes) -> "Checkpoint":
        return self.model_copy(update=changes)


def _entry_list(tensors: Dict[str, np.ndarray]) -> List[Dict[str, Any]]:
    entries, offset = [], 0
    for name in sorted(tensors):
        length = int(tensors[name].size) * _F32.itemsize
        entries.append({
            "name": name,
            "dtype": "f32",
            "shape": list(tensors[name].shape),
            "byte_offset": offset,
            "byte_length": length,
        })
        offset += length
    return entries


def save(ckpt: Checkpoint, path: PathLike) -> None:
    tensors = ckpt.tensors()
    for name, value in tensors.items():
        if not np.isfinite(value).all():
            raise NumericalError(f"refusing to save non-finite tensor {name}")

    entries = _entry_list(tensors)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.model_dump(mode="json"),
        "step": ckpt.step,
        "rng": ckpt.rng.model_dump(mode="json"),
        "meta": ckpt.meta,
        "entries": entries,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(_LENGTH.pack(len(header)))
        handle.write(header)
        for entry in entries:
            handle.write(np.ascontiguousarray(tensors[entry["name"]], dtype=_F32).tobytes())
    logger.debug(f"Saved checkpoint {path} ({len(entries)} tensors, step {ckpt.step})")


def read_manifest(path: PathLike) -> Dict[str, Any]:
    """Validated manifest plus ``_payload_offset``; the payload is not read."""
    path = Path(path)
    file_size = path.stat().st_size
    with open(path, "rb") as handle:
        magic = handle.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointFormatError("magic", f"expected {MAGIC!r}, found {magic!r}")
        raw_length = handle.read(_LENGTH.size)
        if len(raw_length) != _LENGTH.size:
            raise CheckpointFormatError("header_length", "file ends inside the header length field")
        (header_length,) = _LENGTH.unpack(raw_length)
        payload_offset = len(MAGIC) + _LENGTH.size + header_length
        if payload_offset > file_size:
            raise CheckpointFormatError(
                "header_length", f"header length {header_length} exceeds file size {file_size}"
            )
        try:
            manifest = json.loads(handle.read(header_length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError("manifest_json", f"manifest is not valid UTF-8 JSON: {e}") from e

    if not isinstance(manifest, dict):
        raise CheckpointFormatError("manifest_json", "manifest must be a JSON object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError("format_version", f"unsupported format version {version!r}")
    for key in ("config", "step", "rng", "entries"):
        if key not in manifest:
            raise CheckpointFormatError("manifest_fields", f"manifest lacks '{key}'")

    _check_entries(manifest["entries"], file_size - payload_offset)
    manifest["_payload_offset"] = payload_offset
    return manifest


def _check_entries(entries: Any, payload_size: int) -> None:
    if not isinstance(entries, list):
        raise CheckpointFormatError("entries", "entries must be a list")
    seen, expected_offset = set(), 0
    for entry in entries:
        try:
            name = entry["name"]
            shape = [int(dim) for dim in entry["shape"]]
            offset = int(entry["byte_offset"])
            length = int(entry["byte_length"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointFormatError("entry_fields", f"malformed entry {entry!r}: {e}") from e
        if name in seen:
            raise CheckpointFormatError("unique_names", f"duplicate tensor name {name}")
        seen.add(name)
        if entry.get("dtype") != "f32":
            raise CheckpointFormatError("dtype", f"{name}: unsupported dtype {entry.get('dtype')!r}")
        if any(dim < 0 for dim in shape):
            raise CheckpointFormatError("shape", f"{name}: negative dimension in {shape}")
        if int(np.prod(shape, dtype=np.int64)) * _F32.itemsize != length:
            raise CheckpointFormatError(
                "shape_size", f"{name}: shape {shape} needs {int(np.prod(shape, dtype=np.int64)) * 4} bytes, byte_length is {length}"
            )
        if offset < expected_offset:
            raise CheckpointFormatError("offsets", f"{name}: offset {offset} overlaps the previous entry")
        if offset != expected_offset:
            raise CheckpointFormatError("offsets", f"{name}: offset {offset} leaves a gap, expected {expected_offset}")
        expected_offset = offset + length
    if expected_offset != payload_size:
        raise CheckpointFormatError(
            "payload_size", f"entries describe {expected_offset} payload bytes, file holds {payload_size}"
        )


def load(path: PathLike) -> Checkpoint:
    manifest = read_manifest(path)
    payload_offset = manifest["_payload_offset"]
    with open(path, "rb") as handle:
        handle.seek(payload_offset)
        payload = handle.read()

    params: Dict[str, np.ndarray] = {}
    slots: Dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        start, stop = entry["byte_offset"], entry["byte_offset"] + entry["byte_length"]
        value = np.frombuffer(payload[start:stop], dtype=_F32).astype(np.float32).reshape(entry["shape"])
        if not np.isfinite(value).all():
            raise CheckpointFormatError("finite", f"{entry['name']} holds non-finite values")
        if entry["name"].startswith(OPT_PREFIX):
            slots[entry["name"][len(OPT_PREFIX):]] = value
        else:
            params[entry["name"]] = value

    try:
        model = ModelConfig.model_validate(
            manifest["config"], context={"test_mode": manifest.get("meta", {}).get("test_mode", False)}
        )
        rng = RngState.model_validate(manifest["rng"])
    except ValidationError as e:
        raise CheckpointFormatError("config", f"invalid stored config: {e}") from e
    if not isinstance(manifest["step"], int) or manifest["step"] < 0:
        raise CheckpointFormatError("step", f"invalid step {manifest['step']!r}")

    expected = param_shapes(model)
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointFormatError("parameters", f"missing parameter {name}")
        if params[name].shape != shape:
            raise CheckpointFormatError("parameters", f"{name} has shape {params[name].shape}, config implies {shape}")
    extra = sorted(set(params) - set(expected))
    if extra:
        raise CheckpointFormatError("parameters", f"unexpected parameters: {', '.join(extra[:5])}")

    return Checkpoint(
        config=model,
        params=params,
        opt_slots=slots,
        step=manifest["step"],
        rng=rng,
        meta=manifest.get("meta", {}),
    )
