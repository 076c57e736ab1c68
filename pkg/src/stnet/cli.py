"""Command-line entry point: synth, split, train, eval, gradcheck, map.

Exit codes: 0 success, 1 bad arguments or invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from typing import Optional, Sequence

import numpy as np

from .engine.serialize import FormatError
from .hsi import HsiFormatError, SplitSpec, load_cube, load_labels, load_split, save_cube, save_labels, \
    save_split, stratified_split, synth_scene

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ratios(text: str):
    try:
        parts = tuple(float(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"ratios must look like 6:1:3, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"ratios need three parts, got {text!r}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stnet", description="Spatial/spectral transformer DenseNet for hyperspectral cubes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic cube and label map")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--bands", type=int, default=20)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--out", required=True, help="output prefix; writes <out>.cube and <out>.labels")

    s = sub.add_parser("split", help="stratified train/val/test manifest")
    s.add_argument("--cube", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--ratios", type=_ratios, default=(6.0, 1.0, 3.0))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train a model and save a checkpoint")
    s.add_argument("--cube", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--config", help="key=value file with training and backbone settings")
    s.add_argument("--out-ckpt", required=True)
    s.add_argument("--curves-csv", required=True)

    s = sub.add_parser("eval", help="score a checkpoint on the test partition")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cube", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--split", required=True)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--module", choices=["all", "engine", "stt", "backbone"], default="all")

    s = sub.add_parser("map", help="render a classification map as PPM")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cube", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    return p


def cmd_synth(a) -> int:
    cube, labels = synth_scene(a.seed, a.bands, a.height, a.width, a.classes, a.noise)
    save_cube(cube, f"{a.out}.cube")
    save_labels(labels, f"{a.out}.labels")
    print(f"wrote {a.out}.cube {cube.shape} and {a.out}.labels ({labels.num_classes} classes)")
    return EXIT_OK


def _labelled_classes(labels) -> np.ndarray:
    lab = labels.labels
    return lab[lab > 0].astype(np.int64)  # row-major, same order as extract_patches


def cmd_split(a) -> int:
    cube, labels = load_cube(a.cube), load_labels(a.labels)
    if cube.shape[1:] != labels.labels.shape:
        raise ValueError(f"cube is {cube.shape[1:]} but labels are {labels.labels.shape}")
    classes = _labelled_classes(labels)
    split = stratified_split(classes, SplitSpec(tuple(a.ratios), a.seed))
    for w in split.warnings:
        print(f"warning: {w}", file=sys.stderr)
    save_split(split, classes, a.out)
    print(f"train={len(split.train)} val={len(split.val)} test={len(split.test)}")
    return EXIT_OK


def _load_data(a, patch):
    from .pipeline import prepare

    cube, labels = load_cube(a.cube), load_labels(a.labels)
    split, classes = load_split(a.split)
    return cube, labels, prepare(cube, labels, split, patch, classes)


def cmd_train(a) -> int:
    from .backbone import build_model
    from .checkpoint import save_checkpoint
    from .pipeline import read_kv, split_config
    from .train import train

    values = read_kv(a.config) if a.config else {}
    cube, labels = load_cube(a.cube), load_labels(a.labels)
    cfg, tcfg = split_config(values, cube.bands, labels.num_classes)
    _, _, data = _load_data(a, cfg.patch)
    model = build_model(cfg, seed=tcfg.seed)
    t0 = time.perf_counter()
    result = train(model, data.train, data.val, tcfg, curves_csv=a.curves_csv)
    save_checkpoint(result.model, a.out_ckpt, data.stats)
    last = result.records[-1]
    print(f"trained {len(result.records)} epochs in {time.perf_counter() - t0:.1f}s; best epoch "
          f"{result.best_epoch}; final val_acc={last.val_acc:.4f}")
    return EXIT_OK


def cmd_eval(a) -> int:
    from .checkpoint import load_checkpoint
    from .hsi import extract_patches, normalize_bands, pad_edges, PatchSpec
    from .metrics import metrics
    from .train import evaluate

    model, stats = load_checkpoint(a.ckpt)
    cube, labels = load_cube(a.cube), load_labels(a.labels)
    split, classes = load_split(a.split)
    if stats is not None:
        cube, _ = normalize_bands(cube, stats)
    spec = PatchSpec(*model.cfg.patch)
    data = extract_patches(pad_edges(cube, spec), labels, spec)
    if len(data) != len(classes) or not np.array_equal(data.labels, classes):
        raise ValueError("split manifest does not match the label map")
    if len(split.test) == 0:
        raise ValueError("split has an empty test partition")
    scores = metrics(evaluate(model, data.subset(split.test)))
    print(f"OA={scores.oa:.4f} AA={scores.aa:.4f} Kappa={scores.kappa:.4f} (n={len(split.test)})")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    from .checks import run_suite

    ok = run_suite(a.module)
    print("all gradient checks passed" if ok else "gradient checks FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_map(a) -> int:
    from .checkpoint import load_checkpoint
    from .render import render_map

    model, stats = load_checkpoint(a.ckpt)
    cube, labels = load_cube(a.cube), load_labels(a.labels)
    if cube.shape[1:] != labels.labels.shape:
        raise ValueError(f"cube is {cube.shape[1:]} but labels are {labels.labels.shape}")
    raster = render_map(model, cube, labels, a.out, stats)
    print(f"wrote {a.out} ({raster.shape[1]}x{raster.shape[0]})")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "map": cmd_map}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, HsiFormatError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
