"""File formats and configuration.

Everything here is specified bit-exactly so external tools can produce and
consume the files:

* IDX: big-endian magic 0x00000803 (unsigned byte, rank 3) or 0x00000801
  (rank 1), one u32 extent per dimension, raw bytes. Images scale to [0,1]
  by /255; rank-1 payloads are integer labels and are not scaled.
* PGM: binary ``P5``, maxval 255, row-major.
* Checkpoint: magic ``SQGN``, u32 LE version, length-prefixed UTF-8
  key=value config text, u32 tensor count, then per tensor u16 name length
  + name, u8 rank, u32 extents, raw float32 LE elements.
* Config: flat ``key = value`` UTF-8 text, ``#`` comments; unknown keys are
  rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, SeqGenModel

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801
CHECKPOINT_MAGIC = b"SQGN"
CHECKPOINT_VERSION = 1


class IdxError(ValueError):
    pass


class PgmError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# -- IDX ------------------------------------------------------------------

def parse_idx(data: bytes) -> np.ndarray:
    """Decode IDX bytes; [n,H,W] floats in [0,1] for images, int64 for labels."""
    if len(data) < 4:
        raise IdxError(f"truncated header: {len(data)} bytes, need 4 for the magic")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == IDX_MAGIC_IMAGES:
        rank = 3
    elif magic == IDX_MAGIC_LABELS:
        rank = 1
    else:
        raise IdxError(f"bad magic 0x{magic:08x} at byte 0")
    header = 4 + 4 * rank
    if len(data) < header:
        raise IdxError(f"truncated dimensions: {len(data)} bytes, need {header}")
    dims = struct.unpack(f">{rank}I", data[4:header])
    expected = int(np.prod(dims))
    actual = len(data) - header
    if actual != expected:
        raise IdxError(f"payload length mismatch at byte {header}: "
                       f"expected {expected} bytes, got {actual}")
    payload = np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)
    if rank == 1:
        return payload.astype(np.int64)
    return payload.astype(np.float64) / 255.0


def write_idx_images(images: np.ndarray) -> bytes:
    """Encode [n,H,W] values in [0,1] as an unsigned-byte IDX file."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise IdxError(f"images must be [n,H,W], got {images.shape}")
    if images.size and (images.min() < 0 or images.max() > 1):
        raise IdxError("image values must lie in [0,1]")
    head = struct.pack(">IIII", IDX_MAGIC_IMAGES, *images.shape)
    return head + np.floor(images * 255.0 + 0.5).astype(np.uint8).tobytes()


def write_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise IdxError(f"labels must be rank 1, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise IdxError("labels must fit in an unsigned byte")
    return struct.pack(">II", IDX_MAGIC_LABELS, len(labels)) + \
        labels.astype(np.uint8).tobytes()


# -- PGM ------------------------------------------------------------------

def encode_pgm(image: np.ndarray) -> bytes:
    """Binary PGM (P5, maxval 255) of a 2-D image with values in [0,1]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise PgmError(f"PGM needs a 2-D image, got shape {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise PgmError("PGM image values must lie in [0,1]")
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    return header + np.floor(image * 255.0 + 0.5).astype(np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Inverse of encode_pgm; returns floats in [0,1]."""
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError("truncated PGM header")
        return data[start:pos]

    if token() != b"P5":
        raise PgmError("not a binary PGM (missing P5)")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise PgmError(f"malformed PGM header: {e}") from None
    if maxval != 255:
        raise PgmError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    if len(data) - pos != w * h:
        raise PgmError(f"payload length {len(data) - pos} != {w}x{h}")
    return np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(h, w) / 255.0


def write_pgm(path: str, image: np.ndarray):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(image))


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


# -- sample grids -----------------------------------------------------------

def compose_grid(images, rows: int, cols: int, exemplar_row=None,
                 separator: float = 0.5) -> np.ndarray:
    """Tile equally sized images into one image with 1-pixel separators.

    Cells fill row-major; missing cells stay blank. When exemplar_row is
    given, those images form an extra first row (Fig-style one-shot layout).
    """
    images = list(images)
    if not images:
        raise ValueError("compose_grid needs at least one image")
    if rows * cols < len(images):
        raise ValueError(f"{rows}x{cols} grid cannot hold {len(images)} images")
    h, w = images[0].shape
    for im in images:
        if im.shape != (h, w):
            raise ValueError(f"mixed image shapes: {im.shape} vs {(h, w)}")
    cells = []
    if exemplar_row is not None:
        ex = list(exemplar_row)
        if len(ex) > cols:
            raise ValueError(f"exemplar row of {len(ex)} exceeds {cols} columns")
        cells.append(ex + [np.zeros((h, w))] * (cols - len(ex)))
    for r in range(rows):
        cells.append([images[r * cols + c] if r * cols + c < len(images)
                      else np.zeros((h, w)) for c in range(cols)])
    nrows = len(cells)
    out = np.full((nrows * h + nrows - 1, cols * w + cols - 1), separator)
    for r, row_cells in enumerate(cells):
        for c, im in enumerate(row_cells):
            out[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = im
    return out


# -- config text --------------------------------------------------------------

def _coerce(name: str, text: str, typ):
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"expected a boolean, got {text!r}")
        return typ(text)
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {e}") from None


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for f in dataclasses.fields(ModelConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    kv = _parse_kv(text)
    types = _FIELD_TYPES[ModelConfig]
    unknown = set(kv) - set(types)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {name: _coerce(name, value, types[name]) for name, value in kv.items()}
    try:
        return ModelConfig(**kwargs).validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


@dataclass
class RunConfig:
    """Full training run description: architecture + optimizer + data + outputs."""
    model: ModelConfig
    seed: int = 0
    iterations: int = 2000
    batch_size: int = 24
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    log_every: int = 10
    eval_every: int = 0
    eval_samples: int = 2000
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    split: str = "by-image"
    test_fraction: float = 0.2
    family_size: int = 8
    binarize: str = "threshold"
    checkpoint: str = "model.ckpt"
    metrics_csv: str = "metrics.csv"
    test_metrics_csv: str = ""


# dataclass field annotations are strings under `from __future__ import
# annotations`; resolve the primitive types once here instead
_FIELD_TYPES = {
    ModelConfig: {"steps": int, "height": int, "width": int, "latent_dim": int,
                  "hidden_size": int, "canvas_channels": int, "attention": str,
                  "canvas": str, "conditional": bool, "read_glimpse": int,
                  "write_patch": int, "attn_windows": int, "posterior_hidden": int,
                  "error_beta": float, "dtype": str},
    RunConfig: {"seed": int, "iterations": int, "batch_size": int,
                "learning_rate": float, "beta1": float, "beta2": float,
                "adam_eps": float, "grad_clip": float, "log_every": int,
                "eval_every": int, "eval_samples": int, "train_images": str,
                "train_labels": str, "test_images": str, "test_labels": str,
                "split": str, "test_fraction": float, "family_size": int,
                "binarize": str, "checkpoint": str, "metrics_csv": str,
                "test_metrics_csv": str},
}


def runconfig_from_text(text: str) -> RunConfig:
    kv = _parse_kv(text)
    model_types = _FIELD_TYPES[ModelConfig]
    run_types = _FIELD_TYPES[RunConfig]
    unknown = set(kv) - set(model_types) - set(run_types)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model_kwargs, run_kwargs = {}, {}
    for name, value in kv.items():
        if name in model_types:
            model_kwargs[name] = _coerce(name, value, model_types[name])
        else:
            run_kwargs[name] = _coerce(name, value, run_types[name])
    for required in ("steps", "height", "width"):
        if required not in model_kwargs:
            raise ConfigError(f"missing required key {required!r}")
    try:
        model = ModelConfig(**model_kwargs).validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    rc = RunConfig(model=model, **run_kwargs)
    if rc.binarize not in ("threshold", "stochastic", "none"):
        raise ConfigError(f"unknown binarize mode {rc.binarize!r}")
    if rc.split not in ("by-image", "by-class", "by-family"):
        raise ConfigError(f"unknown split policy {rc.split!r}")
    if not rc.test_metrics_csv:
        stem = rc.metrics_csv[:-4] if rc.metrics_csv.endswith(".csv") else rc.metrics_csv
        rc.test_metrics_csv = stem + ".test.csv"
    return rc


def runconfig_to_text(rc: RunConfig) -> str:
    lines = [config_to_text(rc.model).rstrip("\n")]
    for f in dataclasses.fields(RunConfig):
        if f.name == "model":
            continue
        v = getattr(rc, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


# -- checkpoints -----------------------------------------------------------

@dataclass
class CheckpointBundle:
    """Persistence unit: format version, model config, named float32 tensors."""
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION


def save_checkpoint(bundle: CheckpointBundle) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<I", bundle.version)]
    cfg = config_to_text(bundle.config).encode()
    out.append(struct.pack("<I", len(cfg)))
    out.append(cfg)
    out.append(struct.pack("<I", len(bundle.tensors)))
    for name, arr in bundle.tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes for "
                                  f"{what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(data: bytes) -> CheckpointBundle:
    r = _Reader(data)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg_text = r.take(r.u32("config length"), "config").decode()
    try:
        config = config_from_text(cfg_text)
    except ConfigError as e:
        raise CheckpointError(f"embedded config invalid: {e}") from None
    tensors = {}
    for i in range(r.u32("tensor count")):
        name = r.take(struct.unpack("<H", r.take(2, "name length"))[0],
                      f"tensor {i} name").decode()
        rank = struct.unpack("<B", r.take(1, f"{name} rank"))[0]
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} extents"))
        count = int(np.prod(shape)) if rank else 1
        raw = r.take(4 * count, f"{name} elements")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after tensors")
    return CheckpointBundle(config=config, tensors=tensors, version=version)


def bundle_from_model(model: SeqGenModel) -> CheckpointBundle:
    tensors = {name: t.data.astype(np.float32) for name, t in model.weights().items()}
    return CheckpointBundle(config=model.config, tensors=tensors)


def model_from_bundle(bundle: CheckpointBundle, seed: int = 0) -> SeqGenModel:
    model = SeqGenModel(bundle.config, seed=seed)
    model.load_weights(bundle.tensors)
    return model


def save_checkpoint_file(path: str, bundle: CheckpointBundle):
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(bundle))


def load_checkpoint_file(path: str) -> CheckpointBundle:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())
