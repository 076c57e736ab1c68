"""Classification maps as plain-text PPM images."""

from __future__ import annotations

import numpy as np

# class c (1-based) uses PALETTE[(c - 1) % 16]; unlabeled pixels are black
PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
], dtype=np.uint8)


def class_raster_to_rgb(raster: np.ndarray) -> np.ndarray:
    raster = np.asarray(raster, dtype=np.int64)
    rgb = np.zeros(raster.shape + (3,), dtype=np.uint8)
    mask = raster > 0
    rgb[mask] = PALETTE[(raster[mask] - 1) % len(PALETTE)]
    return rgb


def write_ppm(rgb: np.ndarray, path) -> None:
    h, w, _ = rgb.shape
    lines = ["P3", f"{w} {h}", "255"]
    for row in rgb:
        lines.append(" ".join(f"{r} {g} {b}" for r, g, b in row))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ppm(path) -> np.ndarray:
    tokens = open(path).read().split()
    if tokens[0] != "P3":
        raise ValueError(f"{path}: not a plain PPM file")
    w, h = int(tokens[1]), int(tokens[2])
    vals = np.array(tokens[4:4 + 3 * w * h], dtype=np.uint8)
    return vals.reshape(h, w, 3)


def render_map(model, cube, labels, out_path, stats=None, batch_size: int = 64) -> np.ndarray:
    """Predict every labelled pixel and write the class raster as PPM; returns the raster."""
    from .hsi import PatchSpec, extract_patches, normalize_bands, pad_edges
    from .train import predict

    spec = PatchSpec(*model.cfg.patch)
    if stats is not None:
        cube, _ = normalize_bands(cube, stats)
    data = extract_patches(pad_edges(cube, spec), labels, spec)
    raster = np.zeros(labels.labels.shape, dtype=np.int64)
    if len(data):
        pred = predict(model, data.patches, batch_size) + 1
        raster[data.coords[:, 0], data.coords[:, 1]] = pred
    write_ppm(class_raster_to_rgb(raster), out_path)
    return raster
