"""Reading and writing attention.

Spatial-transformer attention maps output pixel coordinates through an
affine transform into input coordinates and interpolates bilinearly.
Coordinates are normalized to [-1, 1] with pixel centers at
-1 + 2i/(n-1), so identity params reproduce the input exactly. Reads
outside the image are zero.

Param vector order is (a11, a12, a21, a22, tx, ty):

    gx = a11*u + a12*v + tx        gy = a21*u + a22*v + ty

with u the horizontal and v the vertical normalized output coordinate.
Also provides the multi-window write, and the hard (non-learned)
attention rules: random patches and error-map location selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import Tensor, ShapeError, _record

IDENTITY_PARAMS = (1.0, 0.0, 0.0, 1.0, 0.0, 0.0)


@dataclass(frozen=True)
class AffineParams:
    """Affine map from output normalized coordinates to input ones."""
    a11: float
    a12: float
    a21: float
    a22: float
    tx: float
    ty: float

    def as_array(self, dtype=np.float64) -> np.ndarray:
        a = np.array([self.a11, self.a12, self.a21, self.a22, self.tx, self.ty],
                     dtype=dtype)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"affine params must be finite, got {a}")
        return a

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(*IDENTITY_PARAMS)


def _params_tensor(params, dtype) -> tuple[Tensor, bool]:
    """Normalize params to a Tensor [B,6]; returns (tensor, was_unbatched)."""
    if isinstance(params, AffineParams):
        return Tensor(params.as_array(dtype)[None]), True
    if not isinstance(params, Tensor):
        params = Tensor(np.asarray(params, dtype=dtype))
    if params.ndim == 1:
        if params.shape != (6,):
            raise ShapeError(f"affine params must have 6 entries, got {params.shape}")
        return params.reshape((1, 6)), True
    if params.ndim != 2 or params.shape[1] != 6:
        raise ShapeError(f"affine params must be [6] or [B,6], got {params.shape}")
    return params, False


def _mesh(n: int, dtype):
    if n < 1:
        raise ShapeError(f"output extent must be >= 1, got {n}")
    if n == 1:
        return np.zeros(1, dtype=dtype)
    return np.linspace(-1.0, 1.0, n, dtype=dtype)


def affine_grid(params, out_h: int, out_w: int) -> Tensor:
    """Sampling grid [.., out_h, out_w, 2] of input coords; last axis (x, y).

    Differentiable w.r.t. params.
    """
    pt, unbatched = _params_tensor(params, np.float64)
    dtype = pt.dtype
    u = _mesh(out_w, dtype)[None, None, :]   # columns
    v = _mesh(out_h, dtype)[None, :, None]   # rows
    p = pt.data
    b = p.shape[0]
    gx = p[:, 0, None, None] * u + p[:, 1, None, None] * v + p[:, 4, None, None]
    gy = p[:, 2, None, None] * u + p[:, 3, None, None] * v + p[:, 5, None, None]
    grid = np.stack([np.broadcast_to(gx, (b, out_h, out_w)),
                     np.broadcast_to(gy, (b, out_h, out_w))], axis=-1)

    def backward(g):
        dgx, dgy = g[..., 0], g[..., 1]
        dp = np.empty((b, 6), dtype=dtype)
        dp[:, 0] = (dgx * u).sum(axis=(1, 2))
        dp[:, 1] = (dgx * v).sum(axis=(1, 2))
        dp[:, 2] = (dgy * u).sum(axis=(1, 2))
        dp[:, 3] = (dgy * v).sum(axis=(1, 2))
        dp[:, 4] = dgx.sum(axis=(1, 2))
        dp[:, 5] = dgy.sum(axis=(1, 2))
        return (dp,)

    out = _record(grid, (pt,), backward)
    return out.reshape(grid.shape[1:]) if unbatched else out


def bilinear_sample(image, grid) -> Tensor:
    """Sample image [.., C, H, W] at grid [.., h, w, 2] -> [.., C, h, w].

    Out-of-range coordinates read zero. Differentiable in both arguments.
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if not isinstance(grid, Tensor):
        grid = Tensor(np.asarray(grid, dtype=image.dtype))
    squeeze = image.ndim == 3
    if squeeze:
        if grid.ndim != 3:
            raise ShapeError(f"unbatched image needs unbatched grid, got {grid.shape}")
        image = image.reshape((1,) + image.shape)
        grid = grid.reshape((1,) + grid.shape)
    if image.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample: image {image.shape}, grid {grid.shape}")
    if grid.shape[0] != image.shape[0]:
        raise ShapeError(f"batch mismatch: image {image.shape} vs grid {grid.shape}")

    B, C, H, W = image.shape
    gd = grid.data
    # normalized [-1,1] -> pixel coordinates (centers on integers)
    sx, sy = (W - 1) / 2.0, (H - 1) / 2.0
    px = (gd[..., 0] + 1.0) * sx
    py = (gd[..., 1] + 1.0) * sy
    out = kernels.bilinear_forward(image.data, px, py)

    def backward(g):
        dimg, dpx, dpy = kernels.bilinear_backward(g, image.data, px, py)
        dgrid = np.stack([dpx * sx, dpy * sy], axis=-1)
        return (dimg, dgrid)

    res = _record(out, (image, grid), backward)
    return res.reshape(res.shape[1:]) if squeeze else res


def st_read(image, params, glimpse: int) -> Tensor:
    """Extract a glimpse x glimpse patch from the image under the affine map."""
    if glimpse < 1:
        raise ShapeError(f"glimpse extent must be >= 1, got {glimpse}")
    return bilinear_sample(image, affine_grid(params, glimpse, glimpse))


def st_write(patch, params, out_h: int, out_w: int) -> Tensor:
    """Render a patch onto an out_h x out_w zero background under the affine map.

    The params map output (canvas) coordinates to patch coordinates; write
    with the inverse of the map you would read the same region with.
    """
    return bilinear_sample(patch, affine_grid(params, out_h, out_w))


def multi_st_write(patches, params_list, out_h: int, out_w: int) -> Tensor:
    """Sum of st_write over several (patch, params) windows."""
    patches = list(patches)
    params_list = list(params_list)
    if not patches:
        raise ShapeError("multi_st_write needs at least one window")
    if len(patches) != len(params_list):
        raise ShapeError(f"{len(patches)} patches vs {len(params_list)} params")
    out = st_write(patches[0], params_list[0], out_h, out_w)
    for patch, par in zip(patches[1:], params_list[1:]):
        out = out + st_write(patch, par, out_h, out_w)
    return out


def error_attention(x, x_hat, beta: float) -> np.ndarray:
    """Probability map over pixels from normalized reconstruction error.

    p_k proportional to exp(-beta * |(eps_k - mean) / std|) with
    eps = x - x_hat; degenerates to the uniform map when the error is
    (near-)constant. Hard attention: returns a plain probability array.
    """
    xa = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    ha = x_hat.data if isinstance(x_hat, Tensor) else np.asarray(x_hat, dtype=np.float64)
    if xa.shape != ha.shape:
        raise ShapeError(f"error_attention: shapes {xa.shape} vs {ha.shape}")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    eps = (xa - ha).astype(np.float64)
    kappa = eps.std()
    if kappa < 1e-8:
        return np.full(eps.shape, 1.0 / eps.size)
    z = np.abs((eps - eps.mean()) / kappa)
    w = np.exp(-beta * z)
    return w / w.sum()


def sample_location(attn_map: np.ndarray, gen: np.random.Generator) -> tuple[int, int]:
    """Draw a pixel (row, col) from an attention map."""
    flat = attn_map.reshape(-1)
    k = int(gen.choice(flat.size, p=flat / flat.sum()))
    return k // attn_map.shape[1], k % attn_map.shape[1]


def _axis_scale(glimpse: int, extent: int) -> float:
    # glimpse pixel centers land exactly on `glimpse` consecutive input pixels
    return 0.0 if extent == 1 else (glimpse - 1) / (extent - 1)


def _offset_to_translation(offset: float, glimpse: int, extent: int) -> float:
    if extent == 1:
        return 0.0
    return (2.0 * offset + glimpse - 1) / (extent - 1) - 1.0


def random_patch_params(gen: np.random.Generator, image_h: int, image_w: int,
                        glimpse: int) -> AffineParams:
    """Axis-aligned params for a uniformly placed glimpse fully inside the image."""
    if glimpse > min(image_h, image_w):
        raise ShapeError(f"glimpse {glimpse} exceeds image {image_h}x{image_w}")
    ox = int(gen.integers(0, image_w - glimpse + 1))
    oy = int(gen.integers(0, image_h - glimpse + 1))
    return AffineParams(_axis_scale(glimpse, image_w), 0.0, 0.0,
                        _axis_scale(glimpse, image_h),
                        _offset_to_translation(ox, glimpse, image_w),
                        _offset_to_translation(oy, glimpse, image_h))


def location_to_params(location: tuple[int, int], glimpse: int,
                       image_h: int, image_w: int) -> AffineParams:
    """Axis-aligned params for a glimpse centered at a pixel, clamped in bounds."""
    row, col = location
    if not (0 <= row < image_h and 0 <= col < image_w):
        raise ShapeError(f"location {location} outside {image_h}x{image_w} image")
    ox = min(max(col - (glimpse - 1) / 2.0, 0.0), image_w - glimpse)
    oy = min(max(row - (glimpse - 1) / 2.0, 0.0), image_h - glimpse)
    return AffineParams(_axis_scale(glimpse, image_w), 0.0, 0.0,
                        _axis_scale(glimpse, image_h),
                        _offset_to_translation(ox, glimpse, image_w),
                        _offset_to_translation(oy, glimpse, image_h))
