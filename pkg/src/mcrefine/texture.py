"""Self-contained pseudo-tissue backgrounds.

Used whenever no directory of real negative patches is supplied.  Each
octave is white noise smoothed by an oriented anisotropic Gaussian and then
band-passed by subtracting a wider isotropic blur.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import conv2d_same, gaussian_blur


@dataclass
class TextureParams:
    octaves: int = 3
    base_scale: float = 0.7
    octave_gain: float = 1.2
    anisotropy: float = 2.5
    orientation_jitter: float = 0.5
    contrast: float = 0.2

    def validate(self) -> None:
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if self.base_scale <= 0 or self.anisotropy < 1 or not 0 < self.contrast <= 1:
            raise ValueError("invalid texture parameters")


def oriented_kernel(sigma_along: float, sigma_across: float, angle: float, radius: int) -> np.ndarray:
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    r, c = np.meshgrid(ax, ax, indexing="ij")
    u = c * np.cos(angle) + r * np.sin(angle)
    v = -c * np.sin(angle) + r * np.cos(angle)
    k = np.exp(-0.5 * ((u / sigma_along) ** 2 + (v / sigma_across) ** 2))
    return k / k.sum()


def generate_texture_background(rng: np.random.Generator, params: TextureParams, h: int, w: int) -> np.ndarray:
    cap = max(h, w) // 2
    dominant = rng.uniform(0.0, np.pi)
    total = np.zeros((h, w))
    for k in range(params.octaves):
        sigma = params.base_scale * 2.0**k
        angle = dominant + params.orientation_jitter * rng.standard_normal()
        radius = min(int(np.ceil(3 * sigma * params.anisotropy)), cap)
        smooth = conv2d_same(rng.standard_normal((h, w)),
                             oriented_kernel(sigma * params.anisotropy, sigma, angle, radius))
        band = smooth - gaussian_blur(smooth, min(2.0 * sigma, cap / 3.0))
        std = band.std()
        if std > 0:
            total += params.octave_gain**k * band / std
    total -= total.mean()
    peak = np.abs(total).max()
    if peak > 0:
        total *= params.contrast / peak
    return np.clip(total, -1.0, 1.0)
