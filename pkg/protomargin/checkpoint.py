"""
Checkpoint format for protomargin models.

Layout::

    8 bytes   magic b"PMARGIN\\x00"
    8 bytes   header length, unsigned little-endian
    n bytes   UTF-8 JSON header (sorted keys)
    rest      payload: every array of ModelParams.named_arrays() in order,
              little-endian float64, row-major

The header records the field names and shapes, class tags, prototype ids and
provenance, the architecture config, the payload length and its SHA-256.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from protomargin.protonet import PARAM_GROUPS, ModelParams, ProtoNetConfig, Provenance
from protomargin.tensor import Tensor


logger = logging.getLogger("protomargin.checkpoint")

MAGIC = b"PMARGIN\x00"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")


class CheckpointError(ValueError):
    """Raised for unreadable, truncated, corrupted or incompatible checkpoints."""


@dataclass
class LoadedCheckpoint:
    params: ModelParams
    metadata: dict[str, Any] = field(default_factory=dict)


def _header(params: ModelParams, payload: bytes, metadata: dict[str, Any]) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "fields": [{"name": n, "shape": list(a.shape)} for n, a in params.named_arrays()],
        "prototype_classes": [int(c) for c in params.prototype_classes],
        "prototype_ids": list(params.prototype_ids),
        "provenance": [p.to_dict() if p is not None else None for p in params.provenance],
        "malignancy_scale": params.malignancy_scale,
        "last_layer_initialized": params.last_layer_initialized,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "metadata": metadata,
    }


def encode_checkpoint(params: ModelParams, metadata: dict[str, Any] | None = None) -> bytes:
    """Serialize parameters to checkpoint bytes."""
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in params.named_arrays()
    )
    header = json.dumps(
        _header(params, payload, metadata or {}), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return MAGIC + _LENGTH.pack(len(header)) + header + payload


def save_checkpoint(
    params: ModelParams, path: str | Path, metadata: dict[str, Any] | None = None
) -> Path:
    """
    Write a checkpoint atomically (temporary file, then rename).

    Example:
        ```python
        from protomargin.checkpoint import load_checkpoint, save_checkpoint

        save_checkpoint(params, "runs/final.ckpt", metadata={"stage": "B"})
        restored = load_checkpoint("runs/final.ckpt").params
        ```
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(params, metadata)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    logger.debug("saved checkpoint", extra={"path": str(path), "bytes": len(data)})
    return path


def decode_checkpoint(data: bytes) -> LoadedCheckpoint:
    """
    Parse checkpoint bytes.

    Raises:
        CheckpointError: On bad magic, unsupported version, truncated or corrupted
            payload, or a field layout that does not match the config.
    """
    prefix = len(MAGIC) + _LENGTH.size
    if len(data) < prefix or not data.startswith(MAGIC):
        raise CheckpointError("not a protomargin checkpoint (bad magic)")
    (header_len,) = _LENGTH.unpack_from(data, len(MAGIC))
    if len(data) < prefix + header_len:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[prefix : prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version!r}, expected {FORMAT_VERSION}"
        )

    payload = data[prefix + header_len :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"truncated payload: expected {header['payload_bytes']} bytes, got {len(payload)}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch")

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["fields"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        chunk = payload[offset : offset + 8 * count]
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(payload):
        raise CheckpointError("payload length does not match the field table")

    config = ProtoNetConfig(**{**header["config"], "channels": tuple(header["config"]["channels"])})
    blocks = len(config.channels) + 1
    try:
        params = ModelParams(
            config=config,
            conv_weights=[Tensor(arrays[f"conv{i}.weight"]) for i in range(blocks)],
            conv_biases=[Tensor(arrays[f"conv{i}.bias"]) for i in range(blocks)],
            prototypes=Tensor(arrays["prototypes"]),
            prototype_classes=np.asarray(header["prototype_classes"], dtype=np.int64),
            prototype_ids=[int(i) for i in header["prototype_ids"]],
            provenance=[
                Provenance(p["sample_id"], int(p["row"]), int(p["col"])) if p else None
                for p in header["provenance"]
            ],
            last_layer=Tensor(arrays["last_layer"]),
            malignancy_weights=Tensor(arrays["malignancy.weights"]),
            malignancy_intercept=Tensor(arrays["malignancy.intercept"]),
            malignancy_scale=float(header["malignancy_scale"]),
            last_layer_initialized=bool(header["last_layer_initialized"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing field {exc}") from exc

    m = params.num_prototypes
    lengths = {len(params.prototype_classes), len(params.provenance), len(params.prototype_ids)}
    if lengths != {m}:
        raise CheckpointError("prototype metadata does not match the prototype count")
    params.set_trainable(*PARAM_GROUPS)
    return LoadedCheckpoint(params=params, metadata=dict(header.get("metadata") or {}))


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    """Read a checkpoint file; see decode_checkpoint for the errors raised."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)
