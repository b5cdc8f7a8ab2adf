"""Mask-driven perturbations: constant fill, noise fill and variable blur.

Masks follow one convention everywhere: m=1 keeps the pixel, m=0 perturbs it
fully. One mask value is shared by all channels of a pixel.
"""

from dataclasses import dataclass

import numpy as np

from .core import InputShapeError, as_image, as_mask, blur

KINDS = ("constant", "noise", "blur")


@dataclass(frozen=True)
class PerturbSpec:
    kind: str = "blur"
    mu0: tuple | None = None  # per-channel fill colour; None = image mean
    sigma0: float = 10.0
    noise_sigma: float = 0.2
    noise_seed: int = 0
    levels: int = 8
    # False: sigma(u) = sigma0 * (1 - m(u)); True: sigma0 * m(u)
    flip_blur: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")


class Perturber:
    """A PerturbSpec bound to one image, caching the blur pyramid or noise."""

    def __init__(self, spec: PerturbSpec, x0):
        self.spec = spec
        self.x0 = as_image(x0)
        c = self.x0.shape[2]
        if spec.mu0 is None:
            self.mu0 = self.x0.mean(axis=(0, 1))
        else:
            mu = np.atleast_1d(np.asarray(spec.mu0, dtype=np.float64))
            self.mu0 = np.broadcast_to(mu, (c,)).copy()
        if spec.kind == "constant":
            self.fill = np.broadcast_to(self.mu0, self.x0.shape)
        elif spec.kind == "noise":
            rng = np.random.default_rng(spec.noise_seed)
            self.fill = self.mu0 + spec.noise_sigma * rng.standard_normal(self.x0.shape)
        else:
            lv = spec.levels
            self.pyramid = np.stack([blur(self.x0, spec.sigma0 * k / lv) for k in range(lv + 1)])

    def _check(self, m):
        m = as_mask(m)
        if m.shape != self.x0.shape[:2]:
            raise InputShapeError(f"mask {m.shape} does not match image {self.x0.shape[:2]}")
        return m

    def _blur_coords(self, m):
        lv = self.spec.levels
        t = (m if self.spec.flip_blur else 1.0 - m) * lv
        k = np.clip(np.floor(t).astype(np.int64), 0, lv - 1)
        return k, t - k

    def apply(self, m) -> np.ndarray:
        m = self._check(m)
        if self.spec.kind != "blur":
            mm = m[:, :, None]
            return mm * self.x0 + (1.0 - mm) * self.fill
        k, frac = self._blur_coords(m)
        rows, cols = np.indices(m.shape)
        lo = self.pyramid[k, rows, cols]
        hi = self.pyramid[k + 1, rows, cols]
        return (1.0 - frac)[:, :, None] * lo + frac[:, :, None] * hi

    def vjp(self, m, upstream) -> np.ndarray:
        """Gradient of <upstream, apply(m)> with respect to m."""
        m = self._check(m)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != self.x0.shape:
            raise InputShapeError("upstream must have the image shape")
        if self.spec.kind != "blur":
            return np.sum(upstream * (self.x0 - self.fill), axis=2)
        k, _ = self._blur_coords(m)
        rows, cols = np.indices(m.shape)
        slope = self.pyramid[k + 1, rows, cols] - self.pyramid[k, rows, cols]
        dt_dm = self.spec.levels if self.spec.flip_blur else -self.spec.levels
        return dt_dm * np.sum(upstream * slope, axis=2)

    def fully_perturbed(self) -> np.ndarray:
        return self.apply(np.zeros(self.x0.shape[:2]))


def apply(spec: PerturbSpec, x0, m) -> np.ndarray:
    return Perturber(spec, x0).apply(m)


def apply_with_input_gradient(spec: PerturbSpec, x0, m, upstream) -> np.ndarray:
    return Perturber(spec, x0).vjp(m, upstream)


def fully_perturbed(spec: PerturbSpec, x0) -> np.ndarray:
    return Perturber(spec, x0).fully_perturbed()
