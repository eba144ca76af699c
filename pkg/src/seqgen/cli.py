"""Command-line surface.

Subcommands: synth (write a procedural glyph dataset), train, sample,
oneshot, evaluate, klreport. Exit status: 0 success, 1 usage error,
2 data/format error, 3 numerical divergence. All randomness derives from
--seed (or the seed in the run config), so outputs are byte-reproducible.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import io as sio
from . import training
from .model import SeqGenModel
from .rng import RngStream
from .tensor import ShapeError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="seqgen", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a procedural glyph dataset in IDX format")
    s.add_argument("--out-images", required=True)
    s.add_argument("--out-labels", required=True)
    s.add_argument("--n", type=int, default=700)
    s.add_argument("--height", type=int, default=16)
    s.add_argument("--width", type=int, default=16)
    s.add_argument("--glyph-size", type=int, default=8)
    s.add_argument("--glyphs-per-image", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)

    sa = sub.add_parser("sample", help="draw unconditional samples into a PGM grid")
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--n", type=int, default=16)
    sa.add_argument("--out", required=True)
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--pixels", choices=("mean", "sample", "threshold"), default="mean")
    sa.add_argument("--trace-steps", metavar="DIR",
                    help="also write one grid per generation step")

    o = sub.add_parser("oneshot", help="condition on an exemplar image and sample")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--exemplar", required=True, help="PGM image to condition on")
    o.add_argument("--n", type=int, default=10)
    o.add_argument("--out", required=True)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--cols", type=int, default=1)
    o.add_argument("--pixels", choices=("mean", "sample", "threshold"), default="mean")
    o.add_argument("--trace-steps", metavar="DIR")

    e = sub.add_parser("evaluate", help="print train/test bounds and their gap")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)

    k = sub.add_parser("klreport", help="print the per-step KL table")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--config", required=True)
    return p


def _load_runconfig(path: str) -> sio.RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return sio.runconfig_from_text(fh.read())


def _load_split(rc: sio.RunConfig) -> training.DatasetSplit:
    """Dataset per the run config: parse IDX, binarize, split deterministically."""
    def load(path, labels_path):
        with open(path, "rb") as fh:
            images = sio.parse_idx(fh.read())
        if images.ndim != 3:
            raise sio.IdxError(f"{path}: expected an image file, got rank {images.ndim}")
        labels = np.zeros(len(images), dtype=np.int64)
        if labels_path:
            with open(labels_path, "rb") as fh:
                labels = sio.parse_idx(fh.read())
            if labels.ndim != 1 or len(labels) != len(images):
                raise sio.IdxError(f"{labels_path}: labels do not match {path}")
        return images, labels

    if not rc.train_images:
        raise sio.ConfigError("train_images is required")
    images, labels = load(rc.train_images, rc.train_labels)
    if rc.binarize != "none":
        stream = RngStream(rc.seed)
        images = training.binarize(images, rc.binarize,
                                   stream.generator("binarize", 0))
    if rc.test_images:
        test_images, test_labels = load(rc.test_images, rc.test_labels)
        if rc.binarize != "none":
            test_images = training.binarize(test_images, rc.binarize,
                                            RngStream(rc.seed).generator("binarize", 1))
        return training.DatasetSplit(images, labels, test_images, test_labels)
    return training.split_dataset(images, labels, rc.split, rc.test_fraction,
                                  seed=rc.seed, family_size=rc.family_size)


def _grid_shape(n: int) -> tuple[int, int]:
    cols = max(1, int(math.ceil(math.sqrt(n))))
    return int(math.ceil(n / cols)), cols


def _write_grids(images, rows, cols, out_path, steps=None, trace_dir=None,
                 exemplar_row=None):
    sio.write_pgm(out_path, sio.compose_grid(list(images), rows, cols,
                                             exemplar_row=exemplar_row))
    if trace_dir:
        os.makedirs(trace_dir, exist_ok=True)
        for t, step_imgs in enumerate(steps, 1):
            grid = sio.compose_grid(list(step_imgs), rows, cols,
                                    exemplar_row=exemplar_row)
            sio.write_pgm(os.path.join(trace_dir, f"step_{t:03d}.pgm"), grid)


def _cmd_synth(args) -> int:
    images, labels = training.build_synth_dataset(
        RngStream(args.seed), args.n, args.height, args.width,
        glyph_size=args.glyph_size, glyphs_per_image=args.glyphs_per_image)
    with open(args.out_images, "wb") as fh:
        fh.write(sio.write_idx_images(images))
    with open(args.out_labels, "wb") as fh:
        fh.write(sio.write_idx_labels(labels))
    print(f"wrote {args.n} {args.height}x{args.width} images to {args.out_images}")
    return 0


def _cmd_train(args) -> int:
    rc = _load_runconfig(args.config)
    split = _load_split(rc)
    model, train_rows, test_rows = training.train(
        rc.model, split, rc.iterations, batch_size=rc.batch_size, seed=rc.seed,
        lr=rc.learning_rate, beta1=rc.beta1, beta2=rc.beta2, adam_eps=rc.adam_eps,
        grad_clip=rc.grad_clip, log_every=rc.log_every, eval_every=rc.eval_every,
        eval_samples=rc.eval_samples,
        progress=lambda it, info: print(f"iter {it}: bound {info['bound']:.3f}"))
    sio.save_checkpoint_file(rc.checkpoint, sio.bundle_from_model(model))
    training.write_metrics_csv(rc.metrics_csv, train_rows, rc.model.steps)
    if test_rows:
        training.write_metrics_csv(rc.test_metrics_csv, test_rows, rc.model.steps)
    print(f"wrote checkpoint {rc.checkpoint} and metrics {rc.metrics_csv}")
    return 0


def _cmd_sample(args) -> int:
    model = sio.model_from_bundle(sio.load_checkpoint_file(args.checkpoint),
                                  seed=args.seed)
    if args.trace_steps:
        probs, steps = model.sample(args.n, pixels=args.pixels, return_steps=True)
    else:
        probs, steps = model.sample(args.n, pixels=args.pixels), None
    rows, cols = _grid_shape(args.n)
    _write_grids(probs, rows, cols, args.out, steps=steps,
                 trace_dir=args.trace_steps)
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def _cmd_oneshot(args) -> int:
    model = sio.model_from_bundle(sio.load_checkpoint_file(args.checkpoint),
                                  seed=args.seed)
    exemplar = training.binarize(sio.read_pgm(args.exemplar), "threshold")
    if args.trace_steps:
        probs, steps = model.one_shot_sample(exemplar, args.n, pixels=args.pixels,
                                             return_steps=True)
    else:
        probs = model.one_shot_sample(exemplar, args.n, pixels=args.pixels)
        steps = None
    cols = max(1, args.cols)
    rows = int(math.ceil(args.n / cols))
    _write_grids(probs, rows, cols, args.out, steps=steps,
                 trace_dir=args.trace_steps, exemplar_row=[exemplar])
    print(f"wrote exemplar row plus {args.n} one-shot samples to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    rc = _load_runconfig(args.config)
    model = sio.model_from_bundle(sio.load_checkpoint_file(args.checkpoint),
                                  seed=rc.seed)
    split = _load_split(rc)
    train_b, test_b, gap = training.overfit_gap(model, split, rc.eval_samples)
    print(f"train_bound = {train_b!r}")
    print(f"test_bound = {test_b!r}")
    print(f"gap = {gap!r}")
    return 0


def _cmd_klreport(args) -> int:
    rc = _load_runconfig(args.config)
    model = sio.model_from_bundle(sio.load_checkpoint_file(args.checkpoint),
                                  seed=rc.seed)
    split = _load_split(rc)
    n = min(len(split.test_images), rc.eval_samples)
    kl = training.kl_report(model, split.test_images[:n])
    print("step mean_kl")
    for t, v in enumerate(kl, 1):
        print(f"{t} {float(v)!r}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "oneshot": _cmd_oneshot,
    "evaluate": _cmd_evaluate,
    "klreport": _cmd_klreport,
}

_DATA_ERRORS = (sio.IdxError, sio.PgmError, sio.CheckpointError, sio.ConfigError,
                ShapeError, FileNotFoundError, IsADirectoryError, PermissionError)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"seqgen: {e}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except training.TrainingDiverged as e:
        print(f"seqgen: {e}", file=sys.stderr)
        return 3
    except _DATA_ERRORS as e:
        print(f"seqgen: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
