"""Versioned binary checkpoint container.

Layout: 4 magic bytes, a little-endian uint16 format version, a uint64
header length, a canonical JSON header (sorted keys, fixed separators),
then the raw tensor payload.  Canonical JSON plus deterministic payload
order makes save -> load -> save byte-identical.

The header carries an arbitrary JSON-safe ``meta`` blob (run config,
optimizer hyperparameters) and one entry per tensor with name, dtype,
shape, and offset into the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

MAGIC = b"LQCG"
FORMAT_VERSION = 1

_HEADER_PREFIX = struct.Struct("<4sHQ")


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(checkpoint.tensors):
        tensor = checkpoint.tensors[name]
        # torch .contiguous() preserves 0-d shape; np.ascontiguousarray would
        # promote scalars to 1-d and break byte-identical round-trips.
        array = tensor.detach().cpu().contiguous().numpy()
        entries.append(
            {
                "name": name,
                "dtype": str(array.dtype),
                "shape": list(array.shape),
                "offset": len(payload),
                "nbytes": array.nbytes,
            }
        )
        payload += array.tobytes()
    header = json.dumps(
        {"meta": checkpoint.meta, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(_HEADER_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        handle.write(header)
        handle.write(payload)


def load_checkpoint(path: str, expected_shapes: Optional[dict[str, tuple[int, ...]]] = None) -> Checkpoint:
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < _HEADER_PREFIX.size:
        raise CorruptCheckpointError(f"{path}: file shorter than the fixed prefix")
    magic, version, header_len = _HEADER_PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body_start = _HEADER_PREFIX.size
    if len(blob) < body_start + header_len:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[body_start:body_start + header_len])
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc
    payload = blob[body_start + header_len:]
    tensors: dict[str, torch.Tensor] = {}
    for entry in header.get("tensors", []):
        offset, nbytes = entry["offset"], entry["nbytes"]
        if offset + nbytes > len(payload):
            raise CorruptCheckpointError(f"{path}: truncated payload at tensor {entry['name']!r}")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        dtype = np.dtype(entry["dtype"])
        if count * dtype.itemsize != nbytes:
            raise CorruptCheckpointError(f"{path}: tensor {entry['name']!r} shape and byte count disagree")
        array = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        array = array.reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(array)
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in tensors:
                raise ShapeMismatchError(f"{path}: missing tensor {name!r}")
            got = tuple(tensors[name].shape)
            if got != tuple(shape):
                raise ShapeMismatchError(f"{path}: tensor {name!r} has shape {got}, expected {tuple(shape)}")
    return Checkpoint(tensors, header.get("meta", {}))


# --------------------------------------------------------------------------
# Model / optimizer state plumbing

_MODEL_PREFIX = "model."
_OPTIM_PREFIX = "optim.state."


def checkpoint_from_states(
    model_state: dict[str, torch.Tensor],
    meta: Optional[dict] = None,
    optimizer_state: Optional[dict] = None,
) -> Checkpoint:
    tensors = {_MODEL_PREFIX + k: v for k, v in model_state.items()}
    meta = dict(meta or {})
    if optimizer_state is not None:
        for idx, slots in optimizer_state.get("state", {}).items():
            for key, value in slots.items():
                name = f"{_OPTIM_PREFIX}{idx}.{key}"
                if torch.is_tensor(value):
                    tensors[name] = value
                else:
                    tensors[name] = torch.tensor(float(value), dtype=torch.float64)
        meta["optimizer_param_groups"] = [
            {k: v for k, v in group.items() if k != "params"} | {"params": group["params"]}
            for group in optimizer_state.get("param_groups", [])
        ]
    return Checkpoint(tensors, meta)


def model_state_from_checkpoint(checkpoint: Checkpoint) -> dict[str, torch.Tensor]:
    return {
        name[len(_MODEL_PREFIX):]: tensor
        for name, tensor in checkpoint.tensors.items()
        if name.startswith(_MODEL_PREFIX)
    }


def optimizer_state_from_checkpoint(checkpoint: Checkpoint) -> Optional[dict]:
    groups = checkpoint.meta.get("optimizer_param_groups")
    if groups is None:
        return None
    state: dict[int, dict] = {}
    for name, tensor in checkpoint.tensors.items():
        if not name.startswith(_OPTIM_PREFIX):
            continue
        idx_str, key = name[len(_OPTIM_PREFIX):].split(".", 1)
        slots = state.setdefault(int(idx_str), {})
        # Adam's step counter round-trips through a 0-d tensor.
        slots[key] = tensor if tensor.dim() > 0 else tensor
    return {"state": state, "param_groups": groups}
