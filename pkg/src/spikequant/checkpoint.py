"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"QSVC"                      magic
    uint32   version             currently 1
    uint64   header length
    bytes    header              UTF-8 JSON: architecture, layer list, tensor shapes
    bytes    payload             float32 LE tensors in header order

The header lists for every tensor its shape and byte count; both are checked
against the payload on load.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    MagicMismatchError,
    MissingArtifactError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .model import LayerDescriptor, ModelConfig, NetworkModel

MAGIC = b"QSVC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_F32 = np.dtype("<f4")


def _tensor_entry(name: str, arr: np.ndarray) -> dict:
    return {"name": name, "shape": list(arr.shape), "nbytes": int(arr.size) * 4}


def header_dict(model: NetworkModel) -> dict:
    layers = []
    for layer in model.layers:
        tensors = [_tensor_entry(n, w) for n, w in zip(layer.weight_names, layer.weights)]
        if layer.bias is not None:
            tensors.append(_tensor_entry("bias", layer.bias))
        layers.append(
            {
                "id": layer.id,
                "kind": layer.kind.value,
                "stage": layer.stage,
                "block_label": layer.block_label,
                "name": layer.name,
                "stride": layer.stride,
                "bit": model.precision_map[layer.id],
                "tensors": tensors,
            }
        )
    head = []
    if model.head_weight is not None:
        head.append(_tensor_entry("W", model.head_weight))
    if model.head_bias is not None:
        head.append(_tensor_entry("bias", model.head_bias))
    return {
        "config": model.config.to_dict() if model.config is not None else None,
        "timesteps": model.timesteps,
        "dataset": model.dataset_tag,
        "layers": layers,
        "head": head,
    }


def to_bytes(model: NetworkModel) -> bytes:
    arrays = []
    for name, a in model.tensors():
        if not np.all(np.isfinite(a)):
            raise CheckpointError(f"tensor {name} has non-finite values; refusing to persist")
        arrays.append(a)
    header = json.dumps(header_dict(model), sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype=_F32).tobytes() for a in arrays)
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload


def save_checkpoint(model: NetworkModel, path) -> Path:
    path = Path(path)
    data = to_bytes(model)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def from_bytes(data: bytes, source: str = "<bytes>") -> NetworkModel:
    if len(data) < _PREFIX.size:
        if data[:4] != MAGIC[: len(data[:4])]:
            raise MagicMismatchError(f"{source}: not a checkpoint (bad magic)")
        raise TruncatedPayloadError(f"{source}: file ends inside the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise MagicMismatchError(f"{source}: expected magic {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: checkpoint version {version} is not supported (want {VERSION})")
    start = _PREFIX.size
    if start + hlen > len(data):
        raise TruncatedPayloadError(f"{source}: file ends inside the header")
    try:
        header = json.loads(data[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header: {exc}") from exc

    payload = memoryview(data)[start + hlen :]
    offset = 0

    def read(entry, owner):
        nonlocal offset
        shape = tuple(entry["shape"])
        nbytes = entry["nbytes"]
        if int(np.prod(shape, dtype=np.int64)) * 4 != nbytes:
            raise ShapeMismatchError(
                f"{source}: {owner} tensor {entry['name']} declares shape {shape} but {nbytes} bytes"
            )
        if offset + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"{source}: payload truncated inside {owner} tensor {entry['name']} "
                f"(needs {nbytes} bytes at offset {offset}, {len(payload) - offset} left)",
                layer=owner,
            )
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=_F32).reshape(shape).astype(np.float32)
        offset += nbytes
        return arr

    layers, precision = [], {}
    for entry in header["layers"]:
        owner = f"layer {entry['id']} ({entry['block_label']}.{entry['name']})"
        arrs = {t["name"]: read(t, owner) for t in entry["tensors"]}
        bias = arrs.pop("bias", None)
        layers.append(
            LayerDescriptor(
                id=entry["id"],
                kind=entry["kind"],
                weights=tuple(arrs.values()),
                stage=entry["stage"],
                block_label=entry["block_label"],
                name=entry["name"],
                bias=bias,
                stride=entry["stride"],
            )
        )
        precision[entry["id"]] = entry["bit"]
    head = {t["name"]: read(t, "head") for t in header["head"]}
    if offset != len(payload):
        raise ShapeMismatchError(
            f"{source}: payload holds {len(payload)} bytes but the header accounts for {offset}"
        )
    cfg = header.get("config")
    return NetworkModel(
        layers=tuple(layers),
        head_weight=head.get("W"),
        head_bias=head.get("bias"),
        config=ModelConfig.from_dict(cfg) if cfg is not None else None,
        precision_map=precision,
        dataset_tag=header.get("dataset", ""),
        timesteps=header.get("timesteps", 4),
    )


def load_checkpoint(path) -> NetworkModel:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no checkpoint at {path}")
    return from_bytes(path.read_bytes(), str(path))
