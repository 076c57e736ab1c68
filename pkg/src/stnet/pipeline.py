"""Glue between the HSI containers, the model and the training loop."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .backbone import BackboneConfig, config_from_mapping
from .hsi import (BandStats, HsiCube, LabelMap, PatchSet, PatchSpec, Split, extract_patches,
                  mask_from_coords, normalize_bands, pad_edges)
from .train import TrainConfig

# Desk-scale defaults used by the CLI when the config file leaves a key unset.
DESK_BACKBONE = {"stages": "2,2", "k0": "4", "heads": "2", "patch": "7,7"}

_TRAIN_KEYS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}


def read_kv(path) -> Dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            out[key.strip()] = raw.strip()
    return out


def split_config(values: Dict[str, str], bands: int, classes: int) -> Tuple[BackboneConfig, TrainConfig]:
    """Route config keys to the training or backbone config; data shape fills the rest."""
    train_kw = {}
    backbone = dict(DESK_BACKBONE)
    backbone.update(input_bands=str(bands), num_classes=str(classes))
    for key, raw in values.items():
        if key in _TRAIN_KEYS:
            default = _TRAIN_KEYS[key]
            if key == "betas":
                train_kw[key] = tuple(float(p) for p in raw.split(","))
            else:
                train_kw[key] = type(default)(raw)
        else:
            backbone[key] = raw
    cfg = config_from_mapping(backbone)
    if cfg.input_bands != bands:
        raise ValueError(f"config input_bands={cfg.input_bands} but the cube has {bands} bands")
    if cfg.num_classes < classes:
        raise ValueError(f"config num_classes={cfg.num_classes} but labels use {classes} classes")
    return cfg, TrainConfig(**train_kw)


@dataclass
class Prepared:
    train: PatchSet
    val: PatchSet
    test: PatchSet
    stats: BandStats


def prepare(cube: HsiCube, labels: LabelMap, split: Split, patch: Tuple[int, int],
            manifest_classes: Optional[np.ndarray] = None) -> Prepared:
    """Normalise with train-pixel statistics, pad, extract patches and partition them."""
    spec = PatchSpec(*patch)
    if cube.shape[1:] != labels.labels.shape:
        raise ValueError(f"cube is {cube.shape[1:]} but labels are {labels.labels.shape}")
    raw = extract_patches(pad_edges(cube, PatchSpec(1, 1)), labels, PatchSpec(1, 1))
    n = len(raw)
    if manifest_classes is not None:
        if len(manifest_classes) != n:
            raise ValueError(f"split manifest lists {len(manifest_classes)} samples, labels have {n}")
        if not np.array_equal(manifest_classes, raw.labels):
            raise ValueError("split manifest classes disagree with the label map")
    coords = raw.coords[split.train]
    norm, stats = normalize_bands(cube, train_mask=mask_from_coords(coords, labels.labels.shape))
    data = extract_patches(pad_edges(norm, spec), labels, spec)
    return Prepared(data.subset(split.train), data.subset(split.val), data.subset(split.test), stats)
