"""Grid primitives shared by the explainers and the evaluation protocols.

Images are float64 arrays of shape (H, W, C); masks and heatmaps are (H, W).
"""

import math
from dataclasses import dataclass

import numpy as np


class InvalidParameterError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


class InputShapeError(ValueError):
    pass


class UnsupportedExponentError(ValueError):
    pass


def as_image(x) -> np.ndarray:
    """Coerce to a float64 (H, W, C) array; 2-D input gets a channel axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3:
        raise InputShapeError(f"expected (H, W, C) image, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("image contains non-finite values")
    return x


def as_mask(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise InputShapeError(f"expected (H, W) mask, got shape {m.shape}")
    return m


@dataclass(frozen=True)
class GaussianKernel:
    sigma: float
    radius: int
    weights: np.ndarray


def gaussian_kernel(sigma: float) -> GaussianKernel:
    if not math.isfinite(sigma) or sigma < 0:
        raise InvalidParameterError(f"sigma must be finite and >= 0, got {sigma}")
    if sigma == 0:
        return GaussianKernel(0.0, 0, np.ones(1))
    radius = int(math.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    w /= w.sum()
    # exact symmetry regardless of summation order
    w = 0.5 * (w + w[::-1])
    return GaussianKernel(float(sigma), radius, w)


def _convolve_axis(a: np.ndarray, weights: np.ndarray, axis: int) -> np.ndarray:
    r = (len(weights) - 1) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    p = np.pad(a, pad, mode="edge")
    n = a.shape[axis]
    out = np.zeros_like(a)
    for i, w in enumerate(weights):
        out += w * np.take(p, np.arange(i, i + n), axis=axis)
    return out


def blur(image, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge replication, applied per channel.

    Accepts (H, W, C) images or (H, W) grids.
    """
    x = np.asarray(image, dtype=np.float64)
    kern = gaussian_kernel(sigma)
    if kern.radius == 0:
        return x.copy()
    out = _convolve_axis(x, kern.weights, axis=1)
    return _convolve_axis(out, kern.weights, axis=0)


def _forward_diffs(m: np.ndarray):
    dx = np.zeros_like(m)
    dy = np.zeros_like(m)
    dx[:, :-1] = m[:, 1:] - m[:, :-1]
    dy[:-1, :] = m[1:, :] - m[:-1, :]
    return dx, dy


def tv_energy(mask, beta: float) -> float:
    """Sum over pixels of |dx|^beta + |dy|^beta (forward differences)."""
    if beta < 1:
        raise UnsupportedExponentError(f"beta must be >= 1, got {beta}")
    m = as_mask(mask)
    dx, dy = _forward_diffs(m)
    return float(np.sum(np.abs(dx) ** beta) + np.sum(np.abs(dy) ** beta))


def tv_gradient(mask, beta: float) -> np.ndarray:
    if beta <= 1:
        raise UnsupportedExponentError(f"tv_gradient needs beta > 1, got {beta}")
    m = as_mask(mask)
    dx, dy = _forward_diffs(m)
    # d|d|^b/dd; sign(0) = 0 gives the zero convention at flat spots
    gx = beta * np.abs(dx) ** (beta - 1) * np.sign(dx)
    gy = beta * np.abs(dy) ** (beta - 1) * np.sign(dy)
    g = np.zeros_like(m)
    # dx(u) = m(u+ex) - m(u): +gx to the right neighbour, -gx to u
    g[:, 1:] += gx[:, :-1]
    g[:, :-1] -= gx[:, :-1]
    g[1:, :] += gy[:-1, :]
    g[:-1, :] -= gy[:-1, :]
    return g


def upsample_weights(n_in: int, scale: int, sigma_m: float, n_out: int) -> np.ndarray:
    """Row-normalized (n_out, n_in) interpolation matrix along one axis.

    Cell u is centred on pixel coordinate scale*u + (scale-1)/2; sigma_m is in
    output pixels. Since the 2-D Gaussian factorizes, so does the per-pixel
    renormalization, so the 2-D upsampling is Ay @ m @ Ax.T.
    """
    if scale < 1:
        raise InvalidParameterError(f"scale must be >= 1, got {scale}")
    if n_out > n_in * scale:
        raise InvalidParameterError(f"output size {n_out} exceeds {n_in}*{scale}")
    v = np.arange(n_out, dtype=np.float64)[:, None]
    centers = scale * np.arange(n_in, dtype=np.float64)[None, :] + (scale - 1) / 2.0
    if sigma_m <= 0:
        # nearest-cell replication
        a = (np.floor(v / scale) == np.arange(n_in)[None, :]).astype(np.float64)
        return a
    d = v - centers
    a = np.exp(-0.5 * (d / sigma_m) ** 2)
    return a / a.sum(axis=1, keepdims=True)


def upsample_mask(mask, scale: int, sigma_m: float, out_h: int, out_w: int) -> np.ndarray:
    m = as_mask(mask)
    ay = upsample_weights(m.shape[0], scale, sigma_m, out_h)
    ax = upsample_weights(m.shape[1], scale, sigma_m, out_w)
    return np.clip(ay @ m @ ax.T, 0.0, 1.0)


def normalize_heatmap(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if not np.any(np.isfinite(h)):
        raise InvalidInputError("heatmap has no finite values")
    lo = np.nanmin(h)
    hi = np.nanmax(h)
    if hi - lo <= 0:
        return np.zeros_like(h)
    return (h - lo) / (hi - lo)


def heatmap_from_channels(g: np.ndarray) -> np.ndarray:
    """Reduce an (H, W, C) field to (H, W) by max of absolute values."""
    return np.max(np.abs(g), axis=2)
