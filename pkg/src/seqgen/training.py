"""Optimization loop, dataset pipeline, and diagnostics.

Training minimizes the negative single-sample bound with an adaptive-moment
optimizer and global gradient-norm clipping. Every random choice (batch
indices, reparameterization noise, evaluation subsets, data synthesis) is
keyed through counter-based streams, so a (seed, config, data) triple fully
determines every logged number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, SeqGenModel
from .rng import RngStream
from .tensor import Tape, Tensor, ShapeError


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the offending iteration."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration


# -- optimizer ----------------------------------------------------------

class Adam:
    """Adaptive-moment update; iteration order is the weight-dict order,
    so repeated runs are bit-identical."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, weights: dict[str, Tensor], grads: dict[str, np.ndarray]):
        self.count += 1
        b1c = 1.0 - self.beta1 ** self.count
        b2c = 1.0 - self.beta2 ** self.count
        for name, wt in weights.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(wt.data)
            if g.shape != wt.shape:
                raise ShapeError(f"{name}: gradient shape {g.shape} != weight {wt.shape}")
            m = self.m.setdefault(name, np.zeros_like(wt.data))
            v = self.v.setdefault(name, np.zeros_like(wt.data))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            wt.data = wt.data - update.astype(wt.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                          for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


# -- data ---------------------------------------------------------------

def binarize(grayscale: np.ndarray, mode: str, gen: np.random.Generator | None = None):
    """Map [0,1] grayscale to {0,1}; values at 0.5 threshold up."""
    x = np.asarray(grayscale, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"grayscale values must lie in [0,1], got "
                         f"[{x.min():.4g}, {x.max():.4g}]")
    if mode == "threshold":
        return (x >= 0.5).astype(np.float64)
    if mode == "stochastic":
        if gen is None:
            raise ValueError("stochastic binarization needs a generator")
        return (gen.random(x.shape) < x).astype(np.float64)
    raise ValueError(f"unknown binarize mode {mode!r}")


def glyph_bitmaps(size: int = 8) -> np.ndarray:
    """Procedural glyph set: [16, size, size] binary bitmaps of stroke motifs."""
    n = size
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    mid = (n - 1) / 2.0
    lo, hi = n // 2 - 1, n // 2  # central double row/col
    hbar = (i == lo) | (i == hi)
    vbar = (j == lo) | (j == hi)
    diag = np.abs(i - j) <= 1
    anti = np.abs(i + j - (n - 1)) <= 1
    border = (i == 0) | (i == n - 1) | (j == 0) | (j == n - 1)
    dist = np.sqrt((i - mid) ** 2 + (j - mid) ** 2)
    left = j <= 1
    right = j >= n - 2
    top = i <= 1
    bottom = i >= n - 2
    glyphs = [
        hbar, vbar, diag, anti,
        hbar | vbar,                      # plus
        diag | anti,                      # X
        border,                           # box
        (np.abs(i - mid) < 2) & (np.abs(j - mid) < 2),  # filled core
        left | bottom,                    # L
        top | vbar,                       # T
        left | right | bottom,            # U
        top | anti | bottom,              # Z
        (dist >= mid - 1.2) & (dist <= mid + 0.2),      # ring
        ((i < 3) & (j < 3)) | ((i > n - 4) & (j > n - 4)),  # dot pair
        left | right | hbar,              # H
        np.abs(j - mid) <= (n - 1 - i) / 2.0 + 0.01,    # wedge
    ]
    return np.stack([g.astype(np.float64) for g in glyphs])


def synth_multiglyph(gen: np.random.Generator, canvas_hw: tuple[int, int],
                     glyphs: np.ndarray, count: int) -> np.ndarray:
    """Composite `count` randomly chosen glyphs at uniform positions by
    pixelwise maximum; every placement lies fully inside the canvas."""
    h, w = canvas_hw
    canvas = np.zeros((h, w), dtype=np.float64)
    for _ in range(count):
        g = glyphs[int(gen.integers(0, len(glyphs)))]
        gh, gw = g.shape
        if gh > h or gw > w:
            raise ValueError(f"glyph {gh}x{gw} cannot be placed on {h}x{w} canvas")
        top = int(gen.integers(0, h - gh + 1))
        gleft = int(gen.integers(0, w - gw + 1))
        region = canvas[top:top + gh, gleft:gleft + gw]
        np.maximum(region, g, out=region)
    return canvas


def build_synth_dataset(stream: RngStream, n_images: int, height: int = 16,
                        width: int = 16, glyph_size: int = 8,
                        glyphs_per_image: int = 1):
    """Deterministic class-labeled glyph dataset.

    Each image composites `glyphs_per_image` copies of one glyph class at
    random positions; the label is the class index. Images are binary.
    """
    glyphs = glyph_bitmaps(glyph_size)
    images = np.zeros((n_images, height, width), dtype=np.float64)
    labels = np.zeros(n_images, dtype=np.int64)
    for idx in range(n_images):
        gen = stream.generator("data", idx)
        cls = int(gen.integers(0, len(glyphs)))
        labels[idx] = cls
        one_class = glyphs[cls:cls + 1]
        images[idx] = synth_multiglyph(gen, (height, width), one_class,
                                       glyphs_per_image)
    return images, labels


@dataclass
class DatasetSplit:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray


def split_dataset(images: np.ndarray, labels: np.ndarray, policy: str,
                  test_fraction: float = 0.2, seed: int = 0,
                  family_size: int = 8) -> DatasetSplit:
    """Disjoint train/test split.

    by-image: random image-level holdout. by-class ("weak"): whole classes
    held out. by-family ("strong"): whole groups of `family_size`
    consecutive classes held out.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0,1), got {test_fraction}")
    stream = RngStream(seed)
    n = len(images)
    if policy == "by-image":
        order = stream.generator("split").permutation(n)
        cut = max(1, int(round(n * test_fraction)))
        test_idx, train_idx = order[:cut], order[cut:]
    elif policy in ("by-class", "by-family"):
        group = labels if policy == "by-class" else labels // family_size
        uniq = np.unique(group)
        order = stream.generator("split").permutation(len(uniq))
        cut = max(1, int(round(len(uniq) * test_fraction)))
        held = set(uniq[order[:cut]].tolist())
        mask = np.array([g in held for g in group])
        test_idx, train_idx = np.nonzero(mask)[0], np.nonzero(~mask)[0]
    else:
        raise ValueError(f"unknown split policy {policy!r}")
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ValueError("split produced an empty side")
    return DatasetSplit(images[train_idx], labels[train_idx],
                        images[test_idx], labels[test_idx])


# -- evaluation helpers ---------------------------------------------------

_EVAL_KEY_BASE = 1 << 31  # eps keys for evaluation never collide with training


def _batched_terms(model: SeqGenModel, images: np.ndarray, keys, chunk: int = 256):
    """bound/recon/per-step-kl arrays over a stack of images, tape-free."""
    bounds, recons, kls = [], [], []
    ctx_needed = model.config.conditional
    for start in range(0, len(images), chunk):
        xs = Tensor(images[start:start + chunk].astype(model.config.np_dtype))
        ctx = xs if ctx_needed else None
        recon, step_kls, _ = model.elbo_terms(xs, ctx, keys=keys[start:start + chunk])
        kl_rows = np.stack([k.data for k in step_kls], axis=1)  # [b, T]
        bounds.append(recon.data - kl_rows.sum(axis=1))
        recons.append(recon.data)
        kls.append(kl_rows)
    return (np.concatenate(bounds), np.concatenate(recons), np.concatenate(kls))


def evaluate_bound(model: SeqGenModel, images: np.ndarray, n_draws: int,
                   counter: int = 0):
    """Mean bound over `n_draws` with-replacement draws from `images`."""
    stream = model.noise
    idx = stream.integers(0, len(images), (n_draws,), "eval", counter)
    keys = [_EVAL_KEY_BASE + counter * n_draws + i for i in range(n_draws)]
    bounds, recons, kls = _batched_terms(model, images[idx], keys)
    return float(bounds.mean()), float(recons.mean()), kls.mean(axis=0)


def kl_report(model: SeqGenModel, images: np.ndarray) -> np.ndarray:
    """Mean per-step KL over the given images (length-T vector)."""
    keys = [_EVAL_KEY_BASE + i for i in range(len(images))]
    _, _, kls = _batched_terms(model, images, keys)
    return kls.mean(axis=0)


def overfit_gap(model: SeqGenModel, split: DatasetSplit, n_eval: int = 2000):
    """(train bound, test bound, gap); gap positive when train is better."""
    train_b, _, _ = evaluate_bound(model, split.train_images, n_eval, counter=0)
    test_b, _, _ = evaluate_bound(model, split.test_images, n_eval, counter=1)
    return train_b, test_b, train_b - test_b


# -- training loop --------------------------------------------------------

METRICS_FIELDS = ("iter", "bound", "recon", "kl_total")


def metrics_header(steps: int) -> str:
    return ",".join(METRICS_FIELDS) + "," + ",".join(f"kl_{t}" for t in range(1, steps + 1))


def write_metrics_csv(path: str, rows: list, steps: int):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(metrics_header(steps) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def train(config: ModelConfig, split: DatasetSplit, iterations: int,
          batch_size: int = 24, seed: int = 0, lr: float = 1e-3,
          beta1: float = 0.9, beta2: float = 0.999, adam_eps: float = 1e-8,
          grad_clip: float = 10.0, log_every: int = 10, eval_every: int = 0,
          eval_samples: int = 2000, progress=None):
    """Optimize the bound; returns (model, train_rows, test_rows).

    Rows follow the metrics CSV layout (iter, bound, recon, kl_total,
    kl_1..kl_T), recorded before the weight update so iteration 0 reports
    the initialization. Raises TrainingDiverged on a non-finite loss.
    """
    if len(split.train_images) == 0:
        raise ValueError("empty training set")
    model = SeqGenModel(config, seed)
    adam = Adam(lr=lr, beta1=beta1, beta2=beta2, eps=adam_eps)
    stream = model.noise
    n = len(split.train_images)
    train_rows, test_rows = [], []
    for it in range(iterations):
        idx = stream.integers(0, n, (batch_size,), "batch", it)
        xb = Tensor(split.train_images[idx].astype(config.np_dtype))
        ctx = xb if config.conditional else None
        keys = [it * batch_size + s for s in range(batch_size)]
        with Tape() as tape:
            loss, info = model.loss(xb, ctx, keys=keys)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(it)
        grad_map = tape.backward(loss)
        grads = {name: grad_map[wt] for name, wt in model._weights.items()
                 if wt in grad_map}
        clip_global_norm(grads, grad_clip)
        adam.step(model._weights, grads)
        if it % log_every == 0 or it == iterations - 1:
            train_rows.append((it, info["bound"], info["recon"], info["kl_total"],
                               *info["kl_per_step"]))
            if progress:
                progress(it, info)
        if eval_every and ((it + 1) % eval_every == 0 or it == iterations - 1):
            tb, tr, tkl = evaluate_bound(model, split.test_images, eval_samples,
                                         counter=it + 1)
            test_rows.append((it, tb, tr, float(tkl.sum()), *[float(v) for v in tkl]))
    return model, train_rows, test_rows
