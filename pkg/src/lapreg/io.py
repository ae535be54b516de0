"""Volume ingestion, preprocessing, and checkpoint persistence.

Volumes and label maps travel as single-file NIfTI-1 (``.nii``/``.nii.gz``)
with array axes (h, w, l) and spacing from the header. Displacement
fields use 4D NIfTI with the vector component last.

Checkpoints are a single-file container, independent of any framework
serialization: an 8-byte magic, one format-version byte, a JSON manifest
(step, config snapshot, tensor directory), then raw little-endian tensor
bytes. Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointVersionError,
    ValidationError,
    VolumeDimensionError,
)
from .grid import DisplacementField, Volume
from .metrics import LabelMap
from .nifti import read_nifti, write_nifti

__all__ = [
    "load_volume", "save_volume", "load_labels", "save_labels",
    "load_field", "save_field",
    "PreprocessSpec", "preprocess", "preprocess_labels",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"LAPREGCP"
CHECKPOINT_VERSION = 1


def load_volume(path) -> Volume:
    """Read a 3D scalar volume; rejects non-3D files and non-finite data."""
    data, spacing = read_nifti(path)
    if data.ndim != 3:
        raise VolumeDimensionError(f"{path}: expected 3D volume, got {data.ndim}D {data.shape}")
    return Volume(data, spacing)


def save_volume(vol: Volume, path) -> None:
    write_nifti(path, vol.data, vol.spacing)


def load_labels(path) -> LabelMap:
    """Read a 3D integer label map (float-typed files must hold integers)."""
    data, _spacing = read_nifti(path)
    if data.ndim != 3:
        raise VolumeDimensionError(f"{path}: expected 3D label map, got {data.ndim}D")
    if not np.issubdtype(data.dtype, np.integer):
        rounded = np.rint(data)
        if not np.array_equal(rounded, data):
            raise ValidationError(f"{path}: label map holds non-integer values")
        data = rounded.astype(np.int32)
    return LabelMap(data)


def save_labels(labels: LabelMap, path, spacing=(1.0, 1.0, 1.0)) -> None:
    write_nifti(path, labels.data, spacing)


def load_field(path) -> DisplacementField:
    """Read a displacement field stored as 4D NIfTI with trailing 3-vector."""
    data, spacing = read_nifti(path)
    if data.ndim != 4 or data.shape[-1] != 3:
        raise VolumeDimensionError(f"{path}: expected (h, w, l, 3) field, got {data.shape}")
    return DisplacementField(np.ascontiguousarray(data), spacing)


def save_field(field: DisplacementField, path) -> None:
    write_nifti(path, field.data, field.spacing)


@dataclass(frozen=True)
class PreprocessSpec:
    """Target grid and normalization for network-ready volumes."""

    target_shape: tuple[int, int, int]
    normalize: bool = True

    def __post_init__(self):
        shape = tuple(int(s) for s in self.target_shape)
        if len(shape) != 3 or any(s < 16 or s % 16 != 0 for s in shape):
            raise ValidationError(
                f"target shape must be three dims divisible by 16, got {self.target_shape}"
            )
        object.__setattr__(self, "target_shape", shape)


def _crop_or_pad(data: np.ndarray, target, pad_value) -> np.ndarray:
    """Center crop/pad each axis to the target extent."""
    for axis, tgt in enumerate(target):
        src = data.shape[axis]
        if src > tgt:
            start = (src - tgt) // 2
            data = np.take(data, np.arange(start, start + tgt), axis=axis)
        elif src < tgt:
            before = (tgt - src) // 2
            widths = [(0, 0)] * data.ndim
            widths[axis] = (before, tgt - src - before)
            data = np.pad(data, widths, mode="constant", constant_values=pad_value)
    return data


def preprocess(vol: Volume, spec: PreprocessSpec) -> Volume:
    """Center crop/pad to the spec's shape, then min-max normalize to [0, 1].

    Padding uses the volume minimum so it does not disturb the intensity
    range; constant volumes normalize to all zeros. Idempotent.
    """
    data = _crop_or_pad(vol.data, spec.target_shape, float(vol.data.min()))
    if spec.normalize:
        lo, hi = float(data.min()), float(data.max())
        if hi - lo < 1e-12:
            data = np.zeros_like(data)
        else:
            data = (data - lo) / (hi - lo)
    return Volume(data, vol.spacing)


def preprocess_labels(labels: LabelMap, spec: PreprocessSpec) -> LabelMap:
    """Center crop/pad a label map to the spec's shape (background fill)."""
    return LabelMap(_crop_or_pad(labels.data, spec.target_shape, 0))


def _tensor_payload(name: str, arr: np.ndarray, offset: int):
    arr = np.ascontiguousarray(arr)
    blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    entry = {
        "name": name,
        "dtype": arr.dtype.str.lstrip("<>=|"),
        "shape": list(arr.shape),
        "offset": offset,
        "nbytes": len(blob),
    }
    return entry, blob


def save_checkpoint(state: dict, path) -> None:
    """Persist a training state dict; every tensor round-trips bit-exactly.

    ``state`` holds ``step`` (int), ``config`` (JSON-safe dict), ``params``
    (name -> ndarray), and optionally ``optimizer`` with ``step`` plus
    ``exp_avg``/``exp_avg_sq`` moment dicts mirroring ``params``.
    """
    path = Path(path)
    tensors = []
    blobs = []
    offset = 0
    groups = {"params": state["params"]}
    optimizer = state.get("optimizer")
    if optimizer is not None:
        groups["optimizer.exp_avg"] = optimizer["exp_avg"]
        groups["optimizer.exp_avg_sq"] = optimizer["exp_avg_sq"]
    for group, tensor_map in groups.items():
        for name in sorted(tensor_map):
            entry, blob = _tensor_payload(f"{group}/{name}", tensor_map[name], offset)
            tensors.append(entry)
            blobs.append(blob)
            offset += len(blob)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "step": int(state["step"]),
        "config": state.get("config", {}),
        "optimizer_step": None if optimizer is None else int(optimizer["step"]),
        "tensors": tensors,
        "payload_nbytes": offset,
    }
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    """Load a checkpoint container written by :func:`save_checkpoint`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    head = len(CHECKPOINT_MAGIC) + 1 + 8
    if len(raw) < head or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a lapreg checkpoint")
    version = raw[len(CHECKPOINT_MAGIC)]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} != supported {CHECKPOINT_VERSION}"
        )
    (manifest_len,) = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC) + 1)
    if len(raw) < head + manifest_len:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[head : head + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    payload = raw[head + manifest_len :]
    if len(payload) < manifest["payload_nbytes"]:
        raise CheckpointError(f"{path}: truncated tensor payload")

    groups: dict[str, dict[str, np.ndarray]] = {}
    for entry in manifest["tensors"]:
        group, name = entry["name"].split("/", 1)
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(
            payload, dtype=dtype, count=int(np.prod(entry["shape"], dtype=np.int64)),
            offset=entry["offset"],
        ).reshape(entry["shape"]).astype(dtype.newbyteorder("="), copy=True)
        groups.setdefault(group, {})[name] = arr
    state = {
        "step": manifest["step"],
        "config": manifest["config"],
        "params": groups.get("params", {}),
        "optimizer": None,
    }
    if manifest.get("optimizer_step") is not None:
        state["optimizer"] = {
            "step": manifest["optimizer_step"],
            "exp_avg": groups.get("optimizer.exp_avg", {}),
            "exp_avg_sq": groups.get("optimizer.exp_avg_sq", {}),
        }
    return state
