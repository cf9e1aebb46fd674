"""Checkpoint container: JSON header + float64 payload, content-hashed.

Layout: magic, version, header length, header JSON, then the concatenated
tensor bytes. The header records tensor names/shapes/offsets, each tensor's
parameter group, arbitrary metadata, and the payload's SHA-256. Loading
verifies the hash and refuses corrupted files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError

_MAGIC = b"ACKP"
_VERSION = 1


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray]
    groups: dict[str, str]  # tensor name -> group name


def save_checkpoint(path, meta: dict, tensors: dict[str, np.ndarray], groups: dict[str, str]) -> None:
    entries = []
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # asarray keeps 0-d scalars 0-d
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    header = json.dumps(
        {
            "meta": meta,
            "tensors": entries,
            "groups": groups,
            "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<IQ", blob, 4)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IQ")
    try:
        header = json.loads(blob[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    payload = blob[off + header_len :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload hash mismatch (corrupted checkpoint)")

    tensors: dict[str, np.ndarray] = {}
    for i, entry in enumerate(header["tensors"]):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return Checkpoint(meta=header["meta"], tensors=tensors, groups=header["groups"])


def params_sha(tensors: dict[str, np.ndarray]) -> str:
    """SHA-256 over name-sorted tensors; the freeze-contract fingerprint."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()
