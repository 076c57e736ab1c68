"""Hyperspectral cube I/O, padding, patch extraction, splitting and a synthetic scene."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

CUBE_MAGIC = b"HSIC"
LABEL_MAGIC = b"HSIL"
VERSION = 1
PARTITIONS = ("train", "val", "test")

# guard against headers that would imply absurd allocations
_MAX_EXTENT = 1 << 20
_MAX_VALUES = 1 << 32


class HsiFormatError(ValueError):
    pass


@dataclass
class HsiCube:
    values: np.ndarray  # float32 [D, H, W], band-major
    band_meta: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"cube must be [D, H, W], got shape {self.values.shape}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class LabelMap:
    labels: np.ndarray  # uint16 [H, W]; 0 = unlabeled
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.labels.ndim != 2:
            raise ValueError(f"label map must be [H, W], got shape {self.labels.shape}")
        if self.labels.size and int(self.labels.max()) > self.num_classes:
            raise ValueError(f"label {int(self.labels.max())} exceeds num_classes={self.num_classes}")


@dataclass(frozen=True)
class PatchSpec:
    m: int = 11
    n: int = 11

    def __post_init__(self):
        if self.m != self.n:
            raise ValueError(f"patches must be square, got {self.m}x{self.n}")
        if self.m < 1 or self.m % 2 == 0:
            raise ValueError(f"patch size must be a positive odd number, got {self.m}")

    @property
    def margin(self) -> int:
        return self.m // 2


@dataclass
class PatchSet:
    patches: np.ndarray  # float32 [S, D, M, N]
    labels: np.ndarray  # int64 [S], classes 1..K
    coords: np.ndarray  # int64 [S, 2] (row, col) in the unpadded image

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "PatchSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PatchSet(self.patches[idx], self.labels[idx], self.coords[idx])


@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[float, float, float] = (6, 1, 3)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ValueError(f"split ratios must be three positive numbers, got {self.ratios}")


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    warnings: List[str] = field(default_factory=list)

    def partition_of(self, n: int) -> List[str]:
        out = [""] * n
        for name in PARTITIONS:
            for i in getattr(self, name):
                out[int(i)] = name
        return out


# ---------------------------------------------------------------------------
# container files
# ---------------------------------------------------------------------------

def save_cube(cube: HsiCube, path) -> None:
    d, h, w = cube.shape
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<4I", VERSION, d, h, w))
        fh.write(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())


def _read_header(fh, magic: bytes, n: int, what: str) -> tuple:
    head = fh.read(4)
    if head != magic:
        raise HsiFormatError(f"{what}: bad magic {head!r}, expected {magic!r}")
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise HsiFormatError(f"{what}: truncated header")
    vals = struct.unpack(f"<{n}I", raw)
    if vals[0] != VERSION:
        raise HsiFormatError(f"{what}: unsupported version {vals[0]}")
    return vals[1:]


def load_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        d, h, w = _read_header(fh, CUBE_MAGIC, 4, "cube")
        if min(d, h, w) < 1 or max(d, h, w) > _MAX_EXTENT or d * h * w > _MAX_VALUES:
            raise HsiFormatError(f"cube: implausible extents D={d} H={h} W={w}")
        need = 4 * d * h * w
        payload = fh.read(need)
    if len(payload) != need:
        raise HsiFormatError(f"cube: truncated payload ({len(payload)} of {need} bytes)")
    return HsiCube(np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32))


def save_labels(labels: LabelMap, path) -> None:
    h, w = labels.labels.shape
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<4I", VERSION, h, w, labels.num_classes))
        fh.write(np.ascontiguousarray(labels.labels, dtype="<u2").tobytes())


def load_labels(path) -> LabelMap:
    with open(path, "rb") as fh:
        h, w, k = _read_header(fh, LABEL_MAGIC, 4, "labels")
        if min(h, w) < 1 or max(h, w) > _MAX_EXTENT:
            raise HsiFormatError(f"labels: implausible extents H={h} W={w}")
        need = 2 * h * w
        payload = fh.read(need)
    if len(payload) != need:
        raise HsiFormatError(f"labels: truncated payload ({len(payload)} of {need} bytes)")
    return LabelMap(np.frombuffer(payload, dtype="<u2").reshape(h, w), k)


def save_split(split: Split, labels: Sequence[int], path) -> None:
    parts = split.partition_of(len(labels))
    with open(path, "w", newline="\n") as fh:
        for i, (cls, part) in enumerate(zip(labels, parts)):
            fh.write(f"{i},{int(cls)},{part}\n")


def load_split(path) -> Tuple[Split, np.ndarray]:
    idx = {name: [] for name in PARTITIONS}
    classes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                i, cls, part = line.split(",")
                i, cls = int(i), int(cls)
            except ValueError:
                raise HsiFormatError(f"split manifest line {lineno}: expected index,class,partition") from None
            if part not in idx:
                raise HsiFormatError(f"split manifest line {lineno}: unknown partition {part!r}")
            if i != len(classes):
                raise HsiFormatError(f"split manifest line {lineno}: indices must be 0..S-1 in order")
            idx[part].append(i)
            classes.append(cls)
    arrs = {k: np.asarray(v, dtype=np.int64) for k, v in idx.items()}
    return Split(arrs["train"], arrs["val"], arrs["test"]), np.asarray(classes, dtype=np.int64)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def pad_edges(cube: HsiCube, spec: PatchSpec) -> HsiCube:
    """Replicate border pixels so every pixel can centre an M x M patch."""
    r = spec.margin
    if r == 0:
        return HsiCube(cube.values.copy(), cube.band_meta)
    return HsiCube(np.pad(cube.values, ((0, 0), (r, r), (r, r)), mode="edge"), cube.band_meta)


def extract_patches(padded: HsiCube, labels: LabelMap, spec: PatchSpec) -> PatchSet:
    """One ``[D, M, M]`` patch per labelled pixel, in row-major pixel order."""
    m = spec.m
    h, w = labels.labels.shape
    if padded.height != h + 2 * spec.margin or padded.width != w + 2 * spec.margin:
        raise ValueError(f"padded cube {padded.shape[1:]} does not match labels {(h, w)} with margin "
                         f"{spec.margin}")
    rows, cols = np.nonzero(labels.labels)
    d = padded.bands
    if rows.size == 0:
        return PatchSet(np.zeros((0, d, m, m), np.float32), np.zeros(0, np.int64), np.zeros((0, 2), np.int64))
    windows = np.lib.stride_tricks.sliding_window_view(padded.values, (m, m), axis=(1, 2))
    patches = np.ascontiguousarray(windows[:, rows, cols].transpose(1, 0, 2, 3))
    cls = labels.labels[rows, cols].astype(np.int64)
    return PatchSet(patches, cls, np.stack([rows, cols], axis=1).astype(np.int64))


def _allocate(n: int, ratios: Sequence[float]) -> List[int]:
    total = float(sum(ratios))
    exact = [n * r / total for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    rem = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    if counts[0] == 0 and n >= len(ratios):
        donor = max(range(1, len(ratios)), key=lambda i: counts[i])
        counts[donor] -= 1
        counts[0] += 1
    return counts


def stratified_split(labels: Sequence[int], spec: SplitSpec) -> Split:
    """Per-class shuffled partition into train/val/test following ``spec.ratios``."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(spec.seed)
    parts = {name: [] for name in PARTITIONS}
    warnings = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        if members.size < len(PARTITIONS):
            warnings.append(f"class {int(cls)} has {members.size} samples; all assigned to train")
            parts["train"].extend(members.tolist())
            continue
        counts = _allocate(members.size, spec.ratios)
        lo = 0
        for name, c in zip(PARTITIONS, counts):
            parts[name].extend(members[lo:lo + c].tolist())
            lo += c
    arrs = [np.sort(np.asarray(parts[name], dtype=np.int64)) for name in PARTITIONS]
    return Split(*arrs, warnings=warnings)


@dataclass
class BandStats:
    mean: np.ndarray
    std: np.ndarray


def band_stats(pixels: np.ndarray) -> BandStats:
    """Per-band mean/std of ``[S, D]`` pixel spectra; std floored at 1e-8."""
    pixels = np.asarray(pixels, dtype=np.float64)
    return BandStats(pixels.mean(axis=0).astype(np.float32),
                     np.maximum(pixels.std(axis=0), 1e-8).astype(np.float32))


def normalize_bands(cube: HsiCube, stats: Optional[BandStats] = None,
                    train_mask: Optional[np.ndarray] = None) -> Tuple[HsiCube, BandStats]:
    """Standardise each band. Statistics come from ``train_mask`` pixels unless given."""
    v = cube.values
    if stats is None:
        flat = v.reshape(v.shape[0], -1).T
        if train_mask is not None:
            flat = flat[np.asarray(train_mask, dtype=bool).reshape(-1)]
        stats = band_stats(flat)
    out = (v - stats.mean[:, None, None]) / stats.std[:, None, None]
    return HsiCube(out.astype(np.float32), cube.band_meta), stats


def mask_from_coords(coords: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    if len(coords):
        mask[coords[:, 0], coords[:, 1]] = True
    return mask


# ---------------------------------------------------------------------------
# synthetic scene
# ---------------------------------------------------------------------------

def smooth_signatures(rng: np.random.Generator, k: int, d: int, n_basis: int = 4) -> np.ndarray:
    """``k`` smooth random spectra of length ``d`` built from low-order cosines."""
    t = np.linspace(0.0, 1.0, d)
    basis = np.stack([np.cos(np.pi * j * t) for j in range(n_basis + 1)])
    coef = rng.normal(0.0, 1.0, size=(k, n_basis + 1))
    return coef @ basis


def synth_scene(seed: int, d: int, h: int, w: int, k: int, noise_std: float) -> Tuple[HsiCube, LabelMap]:
    """Voronoi-partitioned scene: each region carries one class spectrum plus Gaussian noise."""
    if k < 2:
        raise ValueError(f"synth_scene needs at least 2 classes, got {k}")
    if k > h * w:
        raise ValueError(f"cannot place {k} distinct class sites in a {h}x{w} image")
    rng = np.random.default_rng(seed)
    sig = smooth_signatures(rng, k, d)
    flat = rng.choice(h * w, size=k, replace=False)
    sites = np.stack([flat // w, flat % w], axis=1)
    rr, cc = np.mgrid[0:h, 0:w]
    dist = (rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2
    cls = dist.argmin(axis=-1)
    values = sig[cls].transpose(2, 0, 1) + rng.normal(0.0, noise_std, size=(d, h, w))
    cube = HsiCube(values.astype(np.float32))
    cube.band_meta = np.linspace(400.0, 2500.0, d).astype(np.float32)
    return cube, LabelMap((cls + 1).astype(np.uint16), k)


def scene_signatures(seed: int, d: int, k: int) -> np.ndarray:
    """The class spectra ``synth_scene(seed, d, ...)`` draws, for oracle checks."""
    return smooth_signatures(np.random.default_rng(seed), k, d)
