"""Checkpoint format: JSON manifest plus a flat binary of float32 values.

The manifest lists every tensor with its name, shape, and frozen flag; the
companion ``.bin`` file holds the tensors' float32 values little-endian,
concatenated in manifest order. Frozen flags mirror ``requires_grad`` at save
time.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

FORMAT_VERSION = 1


def manifest_path(prefix: str | Path) -> Path:
    return Path(str(prefix) + ".manifest.json")


def binary_path(prefix: str | Path) -> Path:
    return Path(str(prefix) + ".bin")


def freezing_manifest(model: nn.Module) -> list[dict]:
    """Per-tensor manifest entries in named_parameters order."""
    return [
        {"name": name, "shape": list(p.shape), "frozen": not p.requires_grad}
        for name, p in model.named_parameters()
    ]


def save_checkpoint(prefix: str | Path, model: nn.Module) -> None:
    entries = freezing_manifest(model)
    manifest_path(prefix).write_text(
        json.dumps({"format_version": FORMAT_VERSION, "tensors": entries}, indent=1)
    )
    chunks = []
    for _, p in model.named_parameters():
        chunks.append(p.detach().cpu().to(torch.float32).numpy().astype("<f4").ravel())
    binary_path(prefix).write_bytes(np.concatenate(chunks).tobytes())


def load_checkpoint(prefix: str | Path) -> tuple[list[dict], dict[str, np.ndarray]]:
    """Read (manifest entries, name -> float32 array)."""
    doc = json.loads(manifest_path(prefix).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {doc.get('format_version')}")
    raw = np.frombuffer(binary_path(prefix).read_bytes(), dtype="<f4")
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in doc["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        tensors[entry["name"]] = raw[offset : offset + size].reshape(entry["shape"]).copy()
        offset += size
    if offset != raw.size:
        raise ValueError("checkpoint binary size does not match manifest")
    return doc["tensors"], tensors


def apply_checkpoint(model: nn.Module, prefix: str | Path) -> list[dict]:
    """Load tensors into the model and restore frozen flags; returns manifest."""
    entries, tensors = load_checkpoint(prefix)
    params = dict(model.named_parameters())
    for entry in entries:
        name = entry["name"]
        if name not in params:
            raise ValueError(f"checkpoint tensor {name!r} not present in model")
        p = params[name]
        if list(p.shape) != entry["shape"]:
            raise ValueError(f"shape mismatch for {name!r}")
        with torch.no_grad():
            p.copy_(torch.from_numpy(tensors[name]).to(p.dtype))
        p.requires_grad_(not entry["frozen"])
    return entries


def frozen_mismatches(model: nn.Module, prefix: str | Path) -> list[str]:
    """Names of frozen tensors whose float32 bytes differ from the checkpoint."""
    entries, tensors = load_checkpoint(prefix)
    params = dict(model.named_parameters())
    bad = []
    for entry in entries:
        if not entry["frozen"]:
            continue
        current = params[entry["name"]].detach().cpu().to(torch.float32).numpy().astype("<f4")
        if current.tobytes() != tensors[entry["name"]].astype("<f4").tobytes():
            bad.append(entry["name"])
    return bad
