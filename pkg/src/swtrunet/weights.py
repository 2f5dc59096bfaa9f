"""Binary weight/checkpoint files.

Layout (all integers little-endian)::

    b"SWTR" | u32 version | u64 manifest length | manifest (UTF-8 JSON)
    | tensor payloads | u64 checksum of the payload region

The manifest holds ``{"config": ..., "meta": ..., "tensors": [{name, dtype,
shape, byte_offset, byte_len}, ...]}`` with offsets relative to the payload
start. The checksum is the 8-byte BLAKE2b digest of the payload, read as u64.
Names starting with ``__`` are reserved for optimizer state.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import (ChecksumError, FormatError, LengthError, MagicError, TensorNameError,
                     VersionError)
from .model import SwtrConfig, SwtrModel

MAGIC = b"SWTR"
VERSION = 1
RESERVED_PREFIX = "__"
_HEADER = struct.Struct("<4sIQ")
_CHECKSUM = struct.Struct("<Q")


def payload_checksum(payload: bytes) -> int:
    return _CHECKSUM.unpack(hashlib.blake2b(payload, digest_size=8).digest())[0]


def write_tensor_file(path, tensors: dict, config: dict | None = None, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": "f32", "shape": list(np.shape(arr)),
                        "byte_offset": offset, "byte_len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"config": config, "meta": meta or {}, "tensors": entries},
                          sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    blob = _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + payload
    blob += _CHECKSUM.pack(payload_checksum(payload))
    Path(path).write_bytes(blob)


def read_tensor_file(path) -> tuple[dict, dict | None, dict]:
    """Parse and verify a weight file; returns ``(tensors, config, meta)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise LengthError(f"{path}: file is {len(raw)} bytes, shorter than the {_HEADER.size}-byte header")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MagicError(f"{path}: magic {magic!r} != {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"{path}: format version {version} unsupported (expected {VERSION})")
    start = _HEADER.size + mlen
    if start + _CHECKSUM.size > len(raw):
        raise LengthError(f"{path}: manifest length {mlen} exceeds file size {len(raw)}")
    try:
        manifest = json.loads(raw[_HEADER.size:start].decode("utf-8"))
        entries = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: manifest unreadable ({exc})") from None
    payload = raw[start:-_CHECKSUM.size]
    declared = int(sum(e["byte_len"] for e in entries))
    if declared != len(payload):
        raise LengthError(f"{path}: manifest declares {declared} payload bytes, file holds {len(payload)}")
    (stored,) = _CHECKSUM.unpack(raw[-_CHECKSUM.size:])
    if stored != payload_checksum(payload):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    tensors = {}
    for e in entries:
        n = int(np.prod(e["shape"])) * 4
        if e["dtype"] != "f32" or e["byte_len"] != n or e["byte_offset"] + n > len(payload):
            raise LengthError(f"{path}: tensor {e['name']!r} entry inconsistent with shape {e['shape']}")
        arr = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=e["byte_offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return tensors, manifest.get("config"), manifest.get("meta", {})


def save_weights(model: SwtrModel, path, extra: dict | None = None, meta: dict | None = None) -> None:
    """Write all parameters (plus optional reserved-name ``extra`` tensors)."""
    tensors = {name: p.data for name, p in model.named_parameters()}
    for name, arr in (extra or {}).items():
        if not name.startswith(RESERVED_PREFIX):
            raise ValueError(f"extra tensor {name!r} must use the reserved prefix {RESERVED_PREFIX!r}")
        tensors[name] = arr
    write_tensor_file(path, tensors, model.config.to_dict(), meta)


def load_into(model: SwtrModel, tensors: dict) -> SwtrModel:
    params = dict(model.named_parameters())
    stored = {k for k in tensors if not k.startswith(RESERVED_PREFIX)}
    missing, extra = sorted(set(params) - stored), sorted(stored - set(params))
    if missing or extra:
        raise TensorNameError(f"weight names do not match the model: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise TensorNameError(f"tensor {name!r}: stored shape {arr.shape} != model shape {p.shape}")
        p.data[...] = arr
    return model


def load_weights(path, config: SwtrConfig | None = None) -> SwtrModel:
    """Rebuild a model from a weight file; ``config`` overrides the stored one."""
    tensors, stored_cfg, _ = read_tensor_file(path)
    if config is None:
        if stored_cfg is None:
            raise FormatError(f"{path}: no config stored; pass one explicitly")
        config = SwtrConfig.from_dict(stored_cfg)
    return load_into(SwtrModel(config), tensors)
