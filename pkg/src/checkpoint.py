#!/usr/bin/env python3
"""
Versioned tensor container used for model checkpoints and poison tensors.

Layout:
    8 bytes   magic b"FATCKPT\\x00"
    4 bytes   format version (little-endian)
    8 bytes   header length in bytes (little-endian)
    header    UTF-8 JSON: metadata plus one entry per tensor
              {name, kind, tensor, shape, offset, count}
    payload   row-major little-endian float32 values, entries back to back
"""
import os
import json
from collections import OrderedDict
from dataclasses import asdict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from .nn_core import LayerSpec, ModelState
from .utils import FormatError, log

CONTAINER_MAGIC = b"FATCKPT\x00"
CONTAINER_VERSION = 1
PREAMBLE_SIZE_BYTES = len(CONTAINER_MAGIC) + 4 + 8

# (layer name, tensor name) -> (kind, array)
TensorTable = Dict[Tuple[str, str], Tuple[str, np.ndarray]]


def write_container(path: str, metadata: Dict[str, Any], tensors: TensorTable) -> None:
    """
    Writes metadata and float32 tensors to path.

    Args:
        path: Destination file
        metadata: JSON-serializable metadata
        tensors: Ordered mapping (owner, tensor name) -> (kind, array)
    """
    entries: List[Dict[str, Any]] = []
    payloads: List[bytes] = []
    offset = 0
    for (owner, tensor_name), (kind, array) in tensors.items():
        data = np.ascontiguousarray(array, dtype="<f4").tobytes(order="C")
        entries.append({
            "name": owner,
            "kind": kind,
            "tensor": tensor_name,
            "shape": list(array.shape),
            "offset": offset,
            "count": int(array.size),
        })
        payloads.append(data)
        offset += len(data)
    header = json.dumps({"meta": metadata, "entries": entries}, sort_keys=True).encode("utf-8")

    out_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(out_dir, exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f_out:
        f_out.write(CONTAINER_MAGIC)
        f_out.write(CONTAINER_VERSION.to_bytes(4, "little"))
        f_out.write(len(header).to_bytes(8, "little"))
        f_out.write(header)
        for data in payloads:
            f_out.write(data)
    os.replace(tmp_path, path)
    log.debug(f"Wrote container {path} ({len(entries)} tensors, {offset / 1024:.1f} KiB payload)")


def read_container(path: str) -> Tuple[Dict[str, Any], TensorTable]:
    """
    Reads a container written by write_container.

    Returns:
        Tuple of (metadata, tensors)

    Raises:
        FileNotFoundError: If the file does not exist
        FormatError: On a bad magic, unsupported version, truncated header or payload
    """
    with open(path, "rb") as f_in:
        preamble = f_in.read(PREAMBLE_SIZE_BYTES)
        if len(preamble) < PREAMBLE_SIZE_BYTES:
            raise FormatError(f"Incomplete preamble ({len(preamble)} bytes)", path, 0)
        if preamble[:8] != CONTAINER_MAGIC:
            raise FormatError("Bad container magic", path, 0)
        version = int.from_bytes(preamble[8:12], "little")
        if version != CONTAINER_VERSION:
            raise FormatError(f"Unsupported container version {version}", path, 8)
        header_len = int.from_bytes(preamble[12:20], "little")
        header_bytes = f_in.read(header_len)
        if len(header_bytes) < header_len:
            raise FormatError(f"Truncated header (expected {header_len}, got {len(header_bytes)})",
                              path, PREAMBLE_SIZE_BYTES)
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"Corrupt header: {e}", path, PREAMBLE_SIZE_BYTES) from e
        payload = f_in.read()

    payload_start = PREAMBLE_SIZE_BYTES + header_len
    tensors: TensorTable = OrderedDict()
    for entry in header.get("entries", []):
        start = int(entry["offset"])
        end = start + 4 * int(entry["count"])
        if end > len(payload):
            raise FormatError(f"Truncated payload for {entry['name']}.{entry['tensor']}",
                              path, payload_start + start)
        array = np.frombuffer(payload[start:end], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        tensors[(entry["name"], entry["tensor"])] = (entry["kind"], array)
    return header.get("meta", {}), tensors


def save_checkpoint(model: ModelState, path: str, epoch: Optional[int] = None) -> None:
    """
    Persists a ModelState (parameters and batchnorm running statistics).

    Args:
        model: Model to save
        path: Destination file
        epoch: Epoch counter to record (defaults to model.epoch)
    """
    tensors: TensorTable = OrderedDict()
    for spec in model.specs:
        module = model.net.layers[spec.name]
        tensors[(spec.name, "weight")] = (spec.kind, module.weight.detach().cpu().numpy())
        tensors[(spec.name, "bias")] = (spec.kind, module.bias.detach().cpu().numpy())
        if spec.kind == "batchnorm":
            tensors[(spec.name, "running_mean")] = (spec.kind, module.running_mean.detach().cpu().numpy())
            tensors[(spec.name, "running_var")] = (spec.kind, module.running_var.detach().cpu().numpy())
    metadata = {
        "rng_seed": model.rng_seed,
        "epoch": model.epoch if epoch is None else int(epoch),
        "input_shape": list(model.input_shape),
        "layers": [asdict(spec) for spec in model.specs],
    }
    write_container(path, metadata, tensors)


def load_checkpoint(path: str) -> ModelState:
    """
    Restores a ModelState saved by save_checkpoint.

    Raises:
        FormatError: If the container is malformed or misses a layer tensor
    """
    metadata, tensors = read_container(path)
    try:
        specs = [LayerSpec(**layer) for layer in metadata["layers"]]
        model = ModelState(specs, tuple(metadata["input_shape"]), int(metadata["rng_seed"]))
    except (KeyError, TypeError) as e:
        raise FormatError(f"Checkpoint metadata incomplete: {e}", path, PREAMBLE_SIZE_BYTES) from e

    with torch.no_grad():
        for spec in specs:
            module = model.net.layers[spec.name]
            names = ["weight", "bias"] + (["running_mean", "running_var"] if spec.kind == "batchnorm" else [])
            for tensor_name in names:
                key = (spec.name, tensor_name)
                if key not in tensors:
                    raise FormatError(f"Missing tensor {spec.name}.{tensor_name}", path, PREAMBLE_SIZE_BYTES)
                target = getattr(module, tensor_name)
                target.copy_(torch.from_numpy(tensors[key][1]).to(target.dtype))
    model.epoch = int(metadata.get("epoch", 0))
    log.debug(f"Loaded checkpoint {path} (epoch {model.epoch})")
    return model
