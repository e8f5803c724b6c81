"""Checkpoint format: manifest.json + tensors.bin.

The manifest is a JSON list of {name, shape, dtype:"f32", byte_offset,
byte_len}; tensors.bin is the concatenation of the raw little-endian
float32 payloads in manifest order. Values stored at higher precision are
downcast on save.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "tensors.bin"


def save_checkpoint(directory, named_tensors: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    with open(directory / PAYLOAD_NAME, "wb") as payload:
        for name, value in named_tensors.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            manifest.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "dtype": "f32",
                    "byte_offset": offset,
                    "byte_len": len(raw),
                }
            )
            payload.write(raw)
            offset += len(raw)
    with open(directory / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    payload_path = directory / PAYLOAD_NAME
    if not manifest_path.exists() or not payload_path.exists():
        raise CheckpointError(f"checkpoint at {directory} is missing {MANIFEST_NAME} or {PAYLOAD_NAME}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest in {directory}: {exc}") from exc
    payload_size = os.path.getsize(payload_path)
    out: dict[str, np.ndarray] = {}
    with open(payload_path, "rb") as fh:
        for entry in manifest:
            name, shape = entry["name"], tuple(entry["shape"])
            if entry.get("dtype") != "f32":
                raise CheckpointError(f"tensor {name!r}: unsupported dtype {entry.get('dtype')!r}")
            n_expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
            if entry["byte_len"] != n_expected:
                raise CheckpointError(
                    f"tensor {name!r}: byte_len {entry['byte_len']} does not match shape {shape}"
                )
            if entry["byte_offset"] + entry["byte_len"] > payload_size:
                raise CheckpointError(
                    f"tensor {name!r}: payload truncated at byte {payload_size} "
                    f"(needs {entry['byte_offset'] + entry['byte_len']})"
                )
            fh.seek(entry["byte_offset"])
            raw = fh.read(entry["byte_len"])
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return out


def load_into(params: dict[str, Tensor], loaded: dict[str, np.ndarray], strict: bool = True) -> dict:
    """Copy loaded arrays into matching parameters.

    Returns a report {"loaded": [...], "skipped": [...], "missing": [...]}
    where `skipped` are checkpoint names with no matching parameter and
    `missing` are parameters absent from the checkpoint. Under `strict`,
    any skipped or missing name is an error.
    """
    report = {"loaded": [], "skipped": [], "missing": []}
    for name, param in params.items():
        if name not in loaded:
            report["missing"].append(name)
            continue
        arr = loaded[name]
        if tuple(arr.shape) != tuple(param.data.shape):
            raise CheckpointError(
                f"tensor {name!r}: checkpoint shape {tuple(arr.shape)} vs parameter shape {tuple(param.data.shape)}"
            )
        param.data[...] = arr.astype(param.data.dtype)
        report["loaded"].append(name)
    report["skipped"] = [n for n in loaded if n not in params]
    if strict and (report["missing"] or report["skipped"]):
        raise CheckpointError(
            f"strict load failed: missing={report['missing']} skipped={report['skipped']}"
        )
    return report
