"""Single-file checkpoint container: JSON header + raw named tensors.

Layout: 8-byte magic, u32 header length, UTF-8 JSON header, then the tensor
bytes back to back. The header records config, free-form meta, and for every
tensor its name/dtype/shape/offset. Tensors are stored little-endian in
sorted-name order, so identical contents produce identical bytes — lineage
hashes are sha256 over the file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

_MAGIC = b"MOLACKPT"
_FORMAT_VERSION = 1

_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "i32": "<i4", "u8": "|u1"}
_NUMPY_TO_CODE = {
    np.dtype(np.float32): "f32",
    np.dtype(np.float64): "f64",
    np.dtype(np.int64): "i64",
    np.dtype(np.int32): "i32",
    np.dtype(np.uint8): "u8",
}


@dataclass
class Checkpoint:
    config: dict
    meta: dict
    tensors: dict[str, np.ndarray]

    def tensor(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise CheckpointError(f"checkpoint has no tensor {name!r}")
        return self.tensors[name]


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.ascontiguousarray(value)
    if arr.dtype not in _NUMPY_TO_CODE:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return arr


def save_checkpoint(path, tensors: dict, config: dict, meta: dict | None = None) -> str:
    """Write the container; returns the file's sha256 hex digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = _as_numpy(tensors[name])
        code = _NUMPY_TO_CODE[arr.dtype]
        raw = arr.astype(_DTYPES[code]).tobytes()
        entries.append(
            {"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": _FORMAT_VERSION,
        "config": config,
        "meta": meta or {},
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)
    return file_sha256(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    buf = path.read_bytes()
    if len(buf) < 12 or buf[:8] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint container")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    try:
        header = json.loads(buf[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {e}") from e
    if header.get("format_version") != _FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')!r}")
    base = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(buf):
            raise CheckpointError(f"checkpoint {path} truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(buf[start:end], dtype=_DTYPES[entry["dtype"]])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(header.get("config", {}), header.get("meta", {}), tensors)


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a module's state dict into container-ready numpy arrays."""
    out = {}
    for key, value in module.state_dict().items():
        out[prefix + key] = _as_numpy(value)
    return out


def load_module(module: torch.nn.Module, ckpt: Checkpoint, prefix: str = "") -> None:
    """Strictly restore a module from tensors saved with the given prefix."""
    state = {}
    plen = len(prefix)
    for name, arr in ckpt.tensors.items():
        if name.startswith(prefix):
            state[name[plen:]] = torch.from_numpy(arr.copy())
    if not state:
        raise CheckpointError(f"checkpoint has no tensors with prefix {prefix!r}")
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"state mismatch under prefix {prefix!r}: {e}") from e


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
