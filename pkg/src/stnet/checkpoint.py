"""Checkpoint files: ``STNC`` header, tensor records, and a key=value config sidecar."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .backbone import BackboneConfig, Model, build_model, config_from_mapping, config_to_text
from .engine.serialize import FormatError, read_record, read_u32, write_record
from .hsi import BandStats

MAGIC = b"STNC"
VERSION = 1


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def save_checkpoint(model: Model, path, stats: Optional[BandStats] = None) -> None:
    items = model.state_items()
    if stats is not None:
        items += [("norm.mean", stats.mean), ("norm.std", stats.std)]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<2I", VERSION, len(items)))
        for name, arr in items:
            write_record(fh, name, arr)
    sidecar_path(path).write_text(config_to_text(model.cfg), newline="\n")


def read_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        version = read_u32(fh)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        count = read_u32(fh)
        out = {}
        for _ in range(count):
            name, arr = read_record(fh)
            if name in out:
                raise FormatError(f"{path}: duplicate tensor {name!r}")
            out[name] = arr
    return out


def read_config(path) -> BackboneConfig:
    values = {}
    for line in sidecar_path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, raw = line.partition("=")
            values[key.strip()] = raw
    return config_from_mapping(values)


def load_checkpoint(path) -> Tuple[Model, Optional[BandStats]]:
    cfg = read_config(path)
    tensors = read_tensors(path)
    model = build_model(cfg, seed=0)
    model.load_state(tensors)
    stats = None
    if "norm.mean" in tensors:
        stats = BandStats(tensors["norm.mean"], tensors["norm.std"])
    return model, stats
