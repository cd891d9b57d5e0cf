"""Versioned binary container shared by model and defense checkpoints.

Layout: magic (8 bytes) | format version (uint16 LE) | header length (uint32 LE)
| UTF-8 JSON header | parameter blob (torch-serialized state dict).
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import torch

FORMAT_VERSION = 1
CLASSIFIER_MAGIC = b"RFLCLSF\x00"
DEFENSE_MAGIC = b"RFLDEFN\x00"


class CheckpointError(ValueError):
    pass


def write(path: str | Path, magic: bytes, header: dict, state_dict: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = io.BytesIO()
    torch.save(state_dict, blob)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(blob.getvalue())
    return path


def read(path: str | Path, magic: bytes) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != magic:
        raise CheckpointError(f"{path} is not a {magic[:7].decode()} checkpoint")
    version, n = struct.unpack("<HI", raw[8:14])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[14 : 14 + n].decode("utf-8"))
    state = torch.load(io.BytesIO(raw[14 + n :]), map_location="cpu", weights_only=True)
    return header, state
