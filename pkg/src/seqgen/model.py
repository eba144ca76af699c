"""Sequential generative model with attentive reading and writing.

Per step: a latent vector (posterior-inferred during training, prior-drawn
during generation) and, in the conditional variant, an attentive read of a
context image feed a shared LSTM; the LSTM output is decoded into a patch
plus affine params and written onto a hidden canvas (additive or gated
convolutional update). After the last step a 1x1 convolution turns the
canvas into Bernoulli logits over pixels.

The inference side reads the target image with the same kind of attention
(a sprite), combines it with the LSTM state through a small tanh layer, and
produces a diagonal Gaussian whose samples are reparameterized, so the
single-sample variational bound is differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import tensor as T
from . import kernels
from .tensor import Tensor, ShapeError, concat, conv2d_same, reshape, sigmoid, softplus, tanh
from .attention import (AffineParams, st_read, st_write, multi_st_write,
                        error_attention, sample_location,
                        random_patch_params, location_to_params,
                        IDENTITY_PARAMS)
from .recurrent import LstmParams, LstmState, lstm_zero_state, lstm_step, CgruWeights, cgru_step
from .rng import RngStream

ATTENTION_VARIANTS = ("spatial-transformer", "multi-st", "fully-connected",
                      "randomized", "error-based")
CANVAS_VARIANTS = ("additive", "cgru")
SIGMA_FLOOR = 1e-4


@dataclass
class ModelConfig:
    """Architecture selector; every extent the model needs to build weights."""
    steps: int
    height: int
    width: int
    latent_dim: int = 4
    hidden_size: int = 400
    canvas_channels: int = 4
    attention: str = "spatial-transformer"
    canvas: str = "additive"
    conditional: bool = False
    read_glimpse: int = 12
    write_patch: int = 10
    attn_windows: int = 2
    posterior_hidden: int = 256
    error_beta: float = 1.0
    dtype: str = "float32"

    def validate(self):
        for name in ("steps", "height", "width", "latent_dim", "hidden_size",
                     "canvas_channels", "read_glimpse", "write_patch",
                     "attn_windows", "posterior_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.attention not in ATTENTION_VARIANTS:
            raise ValueError(f"unknown attention variant {self.attention!r}")
        if self.canvas not in CANVAS_VARIANTS:
            raise ValueError(f"unknown canvas variant {self.canvas!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.attention in ("randomized", "error-based") and \
                self.read_glimpse > min(self.height, self.width):
            raise ValueError("read_glimpse must fit inside the image for hard attention")
        return self

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class StepTrace:
    """Per-step diagnostics: posterior moments, draw, KL, canvas snapshot."""
    mu: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    kl: float
    canvas: np.ndarray


@dataclass(frozen=True)
class FreeEnergyReport:
    reconstruction: float
    kl_per_step: list
    bound: float

    @classmethod
    def from_terms(cls, reconstruction: float, kl_per_step: list) -> "FreeEnergyReport":
        # bound is defined as this exact expression; tests rely on the identity
        return cls(reconstruction, list(kl_per_step),
                   reconstruction - sum(kl_per_step))


def kl_gauss_std(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL from a diagonal Gaussian to the standard normal.

    mu, sigma: [K] or [B,K] with sigma > 0; returns a scalar or [B] tensor,
    0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2) over the latent axis.
    """
    if mu.shape != sigma.shape:
        raise ShapeError(f"kl_gauss_std: mu {mu.shape} vs sigma {sigma.shape}")
    if np.any(sigma.data <= 0):
        raise ValueError("kl_gauss_std needs strictly positive sigma")
    inner = mu * mu + sigma * sigma - 1.0 - 2.0 * T.log(sigma)
    return 0.5 * inner.sum(axis=-1)


def bernoulli_loglik(x, logits: Tensor) -> Tensor:
    """Bernoulli log-likelihood of binary pixels given logits.

    Computed in logit form, -(x*softplus(-l) + (1-x)*softplus(l)), which
    neither overflows nor loses the tail for large |l|. x in {0,1} with the
    same shape as logits; summed over all but the batch axis when x is a
    [B,H,W] stack, over everything otherwise.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=logits.dtype))
    if x.shape != logits.shape:
        raise ShapeError(f"bernoulli_loglik: x {x.shape} vs logits {logits.shape}")
    xd = x.data
    if not np.all((xd == 0) | (xd == 1)):
        raise ValueError("bernoulli_loglik needs binary pixel values")
    ll = -(x * softplus(-logits) + (1.0 - x) * softplus(logits))
    if x.ndim == 3:
        return ll.sum(axis=(1, 2))
    return ll.sum()


class SeqGenModel:
    """Weights plus the forward passes; one instance per training context.

    Randomness (reparameterization noise, prior draws, hard-attention
    placement) comes from counter-based streams keyed per sample, so any
    quantity is reproducible in isolation and independent of batch layout.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        self.seed = seed
        self.noise = RngStream(seed)
        self._weights: dict[str, Tensor] = {}
        self._init_weights()

    # -- weight construction -------------------------------------------
    def _new(self, name: str, shape, fan_in=None, value=None) -> Tensor:
        dt = self.config.np_dtype
        if value is not None:
            data = np.asarray(value, dtype=dt).reshape(shape)
        elif fan_in:
            limit = 1.0 / np.sqrt(fan_in)
            data = self.noise.uniform(-limit, limit, shape, "init",
                                      len(self._weights), dtype=dt)
        else:
            data = np.zeros(shape, dtype=dt)
        t = Tensor(data, requires_grad=True)
        self._weights[name] = t
        return t

    def _init_weights(self):
        cfg = self.config
        d, k, c = cfg.hidden_size, cfg.latent_dim, cfg.canvas_channels
        j, p = cfg.read_glimpse, cfg.write_patch
        h, w = cfg.height, cfg.width
        v_dim = j * j if cfg.conditional else 0

        in_dim = k + v_dim
        self._new("lstm.w_x", (in_dim, 4 * d), fan_in=in_dim)
        self._new("lstm.w_h", (d, 4 * d), fan_in=d)
        bias = np.zeros(4 * d, dtype=cfg.np_dtype)
        bias[d:2 * d] = 1.0  # forget gate opens at init
        self._new("lstm.bias", (4 * d,), value=bias)

        if cfg.attention == "fully-connected":
            self._new("read_fc.w", (h * w, j * j), fan_in=h * w)
            self._new("read_fc.b", (j * j,))
        elif cfg.attention in ("spatial-transformer", "multi-st"):
            self._new("read_params.w", (d, 6))
            self._new("read_params.b", (6,), value=IDENTITY_PARAMS)
        # randomized / error-based reads carry no weights

        if cfg.conditional:
            if cfg.attention == "fully-connected":
                self._new("ctx_fc.w", (h * w, j * j), fan_in=h * w)
                self._new("ctx_fc.b", (j * j,))
            else:
                self._new("ctx_params.w", (d, 6))
                self._new("ctx_params.b", (6,), value=IDENTITY_PARAMS)

        feat = j * j + d
        self._new("post.w1", (feat, cfg.posterior_hidden), fan_in=feat)
        self._new("post.b1", (cfg.posterior_hidden,))
        self._new("post.w_mu", (cfg.posterior_hidden, k), fan_in=cfg.posterior_hidden)
        self._new("post.b_mu", (k,))
        self._new("post.w_sigma", (cfg.posterior_hidden, k), fan_in=cfg.posterior_hidden)
        self._new("post.b_sigma", (k,))

        if cfg.attention == "fully-connected":
            self._new("write_fc.w", (d, c * h * w), fan_in=d)
            self._new("write_fc.b", (c * h * w,))
        else:
            windows = cfg.attn_windows if cfg.attention == "multi-st" else 1
            for i in range(windows):
                self._new(f"write_patch{i}.w", (d, c * p * p), fan_in=d)
                self._new(f"write_patch{i}.b", (c * p * p,))
                self._new(f"write_params{i}.w", (d, 6))
                self._new(f"write_params{i}.b", (6,), value=IDENTITY_PARAMS)

        if cfg.canvas == "cgru":
            fan = c * 9
            self._new("cgru.u_cand", (c, c, 3, 3), fan_in=fan)
            self._new("cgru.u_update", (c, c, 3, 3), fan_in=fan)
            self._new("cgru.u_reset", (c, c, 3, 3), fan_in=fan)
            self._new("cgru.b_cand", (c,))
            self._new("cgru.b_update", (c,))
            self._new("cgru.b_reset", (c,))

        self._new("obs.w", (1, c, 1, 1), fan_in=c)
        self._new("obs.b", (1,))

    def weights(self) -> dict[str, Tensor]:
        return dict(self._weights)

    def load_weights(self, arrays: dict[str, np.ndarray]):
        missing = set(self._weights) - set(arrays)
        extra = set(arrays) - set(self._weights)
        if missing or extra:
            raise ValueError(f"weight name mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, t in self._weights.items():
            a = np.asarray(arrays[name], dtype=self.config.np_dtype)
            if a.shape != t.shape:
                raise ShapeError(f"{name}: shape {a.shape} != expected {t.shape}")
            t.data = a.copy()

    @property
    def lstm(self) -> LstmParams:
        return LstmParams(self._weights["lstm.w_x"], self._weights["lstm.w_h"],
                          self._weights["lstm.bias"])

    @property
    def cgru(self) -> CgruWeights:
        w = self._weights
        return CgruWeights(w["cgru.u_cand"], w["cgru.u_update"], w["cgru.u_reset"],
                           w["cgru.b_cand"], w["cgru.b_update"], w["cgru.b_reset"])

    # -- forward pieces --------------------------------------------------
    def _head(self, h: Tensor, name: str) -> Tensor:
        return h @ self._weights[f"{name}.w"] + self._weights[f"{name}.b"]

    def _read_sprite(self, x: Tensor, h: Tensor, hard_params) -> Tensor:
        """Attentive read of the target image -> [B,1,J,J]."""
        cfg = self.config
        b = x.shape[0]
        if cfg.attention == "fully-connected":
            vec = reshape(x, (b, cfg.height * cfg.width)) @ self._weights["read_fc.w"] \
                + self._weights["read_fc.b"]
            return reshape(vec, (b, 1, cfg.read_glimpse, cfg.read_glimpse))
        img = reshape(x, (b, 1, cfg.height, cfg.width))
        if cfg.attention in ("randomized", "error-based"):
            params = hard_params
        else:
            params = self._head(h, "read_params")
        return st_read(img, params, cfg.read_glimpse)

    def posterior_step(self, x: Tensor, state: LstmState, eps: Tensor,
                       hard_params: Tensor | None = None):
        """One inference step: read a sprite, produce (mu, sigma, z, sprite).

        eps is the externally supplied reparameterization noise [B,K];
        z = mu + sigma*eps. hard_params carries the precomputed affine rows
        for the randomized / error-based variants.
        """
        cfg = self.config
        b = x.shape[0]
        sprite = self._read_sprite(x, state.h, hard_params)
        feat = concat([reshape(sprite, (b, cfg.read_glimpse ** 2)), state.h], axis=1)
        hid = tanh(feat @ self._weights["post.w1"] + self._weights["post.b1"])
        mu = hid @ self._weights["post.w_mu"] + self._weights["post.b_mu"]
        sigma = softplus(hid @ self._weights["post.w_sigma"]
                         + self._weights["post.b_sigma"]) + SIGMA_FLOOR
        z = mu + sigma * eps
        return mu, sigma, z, sprite

    def _context_read(self, context: Tensor, h: Tensor) -> Tensor:
        cfg = self.config
        b = context.shape[0]
        if cfg.attention == "fully-connected":
            return reshape(context, (b, cfg.height * cfg.width)) @ self._weights["ctx_fc.w"] \
                + self._weights["ctx_fc.b"]
        img = reshape(context, (b, 1, cfg.height, cfg.width))
        glimpse = st_read(img, self._head(h, "ctx_params"), cfg.read_glimpse)
        return reshape(glimpse, (b, cfg.read_glimpse ** 2))

    def _write(self, h: Tensor) -> Tensor:
        cfg = self.config
        b = h.shape[0]
        c, p = cfg.canvas_channels, cfg.write_patch
        if cfg.attention == "fully-connected":
            return reshape(self._head(h, "write_fc"), (b, c, cfg.height, cfg.width))
        windows = cfg.attn_windows if cfg.attention == "multi-st" else 1
        patches, plist = [], []
        for i in range(windows):
            patches.append(reshape(self._head(h, f"write_patch{i}"), (b, c, p, p)))
            plist.append(self._head(h, f"write_params{i}"))
        if windows == 1:
            return st_write(patches[0], plist[0], cfg.height, cfg.width)
        return multi_st_write(patches, plist, cfg.height, cfg.width)

    def generate_step(self, state: LstmState, z: Tensor, canvas: Tensor,
                      context: Tensor | None = None):
        """One generative step: LSTM transition then canvas write."""
        cfg = self.config
        if cfg.conditional and context is None:
            raise ValueError("conditional model needs a context image")
        if not cfg.conditional and context is not None:
            raise ValueError("unconditional model cannot take a context image")
        if cfg.conditional:
            v = self._context_read(context, state.h)
            lstm_in = concat([z, v], axis=1)
        else:
            lstm_in = z
        state = lstm_step(self.lstm, state, lstm_in)
        pre = canvas + self._write(state.h)
        canvas = cgru_step(pre, self.cgru) if cfg.canvas == "cgru" else pre
        return state, canvas

    def observe(self, canvas: Tensor) -> Tensor:
        """Decode a canvas into Bernoulli logits [.., 1, H, W] (1x1 conv)."""
        cfg = self.config
        if canvas.shape[-2:] != (cfg.height, cfg.width):
            raise ShapeError(f"canvas spatial extent {canvas.shape[-2:]} != "
                             f"image extent {(cfg.height, cfg.width)}")
        return conv2d_same(canvas, self._weights["obs.w"], self._weights["obs.b"])

    # -- objectives and sampling ----------------------------------------
    def _zero_canvas(self, b: int) -> Tensor:
        cfg = self.config
        return Tensor(np.zeros((b, cfg.canvas_channels, cfg.height, cfg.width),
                               dtype=cfg.np_dtype))

    def _eps(self, keys, t: int) -> Tensor:
        cfg = self.config
        rows = [self.noise.normal((cfg.latent_dim,), "eps", key, t, dtype=cfg.np_dtype)
                for key in keys]
        return Tensor(np.stack(rows))

    def _hard_read_params(self, x: Tensor, canvas: Tensor, keys, t: int):
        """Affine rows for the non-learned read variants (constants on the tape)."""
        cfg = self.config
        if cfg.attention == "randomized":
            rows = [random_patch_params(self.noise.generator("patch", key, t),
                                        cfg.height, cfg.width,
                                        cfg.read_glimpse).as_array(cfg.np_dtype)
                    for key in keys]
        elif cfg.attention == "error-based":
            logits = kernels.conv2d_forward(canvas.data, self._weights["obs.w"].data,
                                            self._weights["obs.b"].data)
            xhat = 1.0 / (1.0 + np.exp(-logits[:, 0]))
            rows = []
            for i, key in enumerate(keys):
                amap = error_attention(x.data[i], xhat[i], cfg.error_beta)
                loc = sample_location(amap, self.noise.generator("loc", key, t))
                rows.append(location_to_params(loc, cfg.read_glimpse, cfg.height,
                                               cfg.width).as_array(cfg.np_dtype))
        else:
            return None
        return Tensor(np.stack(rows))

    def elbo_terms(self, x: Tensor, context: Tensor | None = None, keys=None,
                   collect_traces: bool = False):
        """Shared T-step inference/generation pass.

        x: [B,H,W] binary. Returns (recon [B], kls list of T [B] tensors,
        traces or None). Per-sample noise is keyed by `keys` (defaults to
        0..B-1), so a sample's terms do not depend on its batch slot.
        """
        cfg = self.config
        b = x.shape[0]
        keys = list(range(b)) if keys is None else list(keys)
        if len(keys) != b:
            raise ShapeError(f"{len(keys)} noise keys for batch of {b}")
        state = lstm_zero_state(b, cfg.hidden_size, cfg.np_dtype)
        canvas = self._zero_canvas(b)
        kls, traces = [], [] if collect_traces else None
        for t in range(1, cfg.steps + 1):
            hard = self._hard_read_params(x, canvas, keys, t)
            mu, sigma, z, _ = self.posterior_step(x, state, self._eps(keys, t), hard)
            kl = kl_gauss_std(mu, sigma)
            kls.append(kl)
            state, canvas = self.generate_step(state, z, canvas, context)
            if collect_traces:
                traces.append(StepTrace(mu.data.copy(), sigma.data.copy(),
                                        z.data.copy(), kl.data.copy(),
                                        canvas.data.copy()))
        logits = self.observe(canvas)
        recon = bernoulli_loglik(x, logits[:, 0])
        return recon, kls, traces

    def free_energy(self, x, context=None, key: int = 0):
        """Single-sample variational bound for one image.

        Returns (FreeEnergyReport, [StepTrace]); bound = reconstruction
        minus the summed per-step KL, the (negated) training loss.
        """
        x = self._as_batch(x)
        ctx = None if context is None else self._as_batch(context)
        recon, kls, traces = self.elbo_terms(x, ctx, keys=[key], collect_traces=True)
        report = FreeEnergyReport.from_terms(float(recon.data[0]),
                                             [float(k.data[0]) for k in kls])
        for tr in traces:
            tr.mu, tr.sigma, tr.z = tr.mu[0], tr.sigma[0], tr.z[0]
            tr.kl = float(tr.kl[0])
            tr.canvas = tr.canvas[0]
        return report, traces

    def free_energy_batch(self, xs, context=None, keys=None) -> list[FreeEnergyReport]:
        xs = self._as_batch(xs)
        ctx = None if context is None else self._as_batch(context)
        recon, kls, _ = self.elbo_terms(xs, ctx, keys=keys)
        out = []
        for i in range(xs.shape[0]):
            out.append(FreeEnergyReport.from_terms(float(recon.data[i]),
                                                   [float(k.data[i]) for k in kls]))
        return out

    def loss(self, x: Tensor, context: Tensor | None = None, keys=None):
        """Negative mean bound over a batch, as a tracked scalar tensor.

        Also returns a plain-number info dict for logging.
        """
        recon, kls, _ = self.elbo_terms(x, context, keys=keys)
        total_kl = kls[0]
        for kl in kls[1:]:
            total_kl = total_kl + kl
        bound = recon - total_kl
        loss = -bound.mean()
        info = {
            "bound": float(bound.data.mean()),
            "recon": float(recon.data.mean()),
            "kl_total": float(total_kl.data.mean()),
            "kl_per_step": [float(k.data.mean()) for k in kls],
        }
        return loss, info

    def _as_batch(self, x) -> Tensor:
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=cfg.np_dtype))
        if x.dtype != cfg.np_dtype:
            x = Tensor(x.data.astype(cfg.np_dtype))
        if x.ndim == 2:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 3 or x.shape[-2:] != (cfg.height, cfg.width):
            raise ShapeError(f"image batch must be [B,{cfg.height},{cfg.width}], got {x.shape}")
        return x

    def _decode_probs(self, canvas: Tensor) -> np.ndarray:
        logits = self.observe(canvas).data[:, 0]
        return 1.0 / (1.0 + np.exp(-logits))

    def _ancestral(self, n: int, context, first_key: int, return_steps: bool):
        cfg = self.config
        state = lstm_zero_state(n, cfg.hidden_size, cfg.np_dtype)
        canvas = self._zero_canvas(n)
        steps = []
        for t in range(1, cfg.steps + 1):
            z = Tensor(np.stack([self.noise.normal((cfg.latent_dim,), "prior",
                                                   first_key + i, t, dtype=cfg.np_dtype)
                                 for i in range(n)]))
            state, canvas = self.generate_step(state, z, canvas, context)
            if return_steps:
                steps.append(self._decode_probs(canvas))
        return self._decode_probs(canvas), steps

    def _finish_pixels(self, probs: np.ndarray, pixels: str, first_key: int):
        if pixels == "mean":
            return probs
        if pixels == "threshold":
            return (probs >= 0.5).astype(probs.dtype)
        if pixels == "sample":
            out = np.empty_like(probs)
            for i in range(probs.shape[0]):
                u = self.noise.generator("pixel", first_key + i).random(probs.shape[1:])
                out[i] = (u < probs[i]).astype(probs.dtype)
            return out
        raise ValueError(f"unknown pixels mode {pixels!r}")

    def sample(self, n: int, first_key: int = 0, pixels: str = "mean",
               return_steps: bool = False):
        """Ancestral draws from the prior; returns [n,H,W] Bernoulli means
        (or sampled / thresholded pixels). No inference network involved."""
        if self.config.conditional:
            raise ValueError("conditional model: use one_shot_sample with an exemplar")
        probs, steps = self._ancestral(n, None, first_key, return_steps)
        out = self._finish_pixels(probs, pixels, first_key)
        return (out, steps) if return_steps else out

    def one_shot_sample(self, exemplar, n: int, first_key: int = 0,
                        pixels: str = "mean", return_steps: bool = False):
        """Ancestral draws conditioned on one exemplar read at every step."""
        if not self.config.conditional:
            raise ValueError("one_shot_sample needs a conditional model")
        ex = self._as_batch(exemplar)
        if ex.shape[0] != 1:
            raise ShapeError(f"exactly one exemplar expected, got {ex.shape}")
        ctx = Tensor(np.repeat(ex.data, n, axis=0))
        probs, steps = self._ancestral(n, ctx, first_key, return_steps)
        out = self._finish_pixels(probs, pixels, first_key)
        return (out, steps) if return_steps else out
