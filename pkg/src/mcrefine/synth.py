"""Label-exact synthetic microcalcification injection."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import box_mean, gaussian_blur

# 8-connectivity is used for every component computation in the package.
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
SIZE_JITTER = 0.1


@dataclass(frozen=True)
class Punctum:
    center_row: float
    center_col: float
    radius: float
    spread: float
    amplitude: float


@dataclass
class SynthConfig:
    patch_size: int = 32
    clusters_range: tuple[int, int] = (1, 2)
    puncta_per_cluster_range: tuple[int, int] = (2, 5)
    cluster_spread: float = 3.0
    line_pattern_prob: float = 0.3
    radius_range: tuple[float, float] = (0.5, 2.0)
    spread_range: tuple[float, float] = (0.6, 1.8)
    amplitude_range: tuple[float, float] = (0.3, 1.2)
    blur_sigma_range: tuple[float, float] = (0.5, 1.2)
    contrast_gain_range: tuple[float, float] = (0.4, 1.0)
    contrast_clamp: tuple[float, float] = (0.25, 2.0)
    local_window: int = 9

    def validate(self) -> None:
        for name in ("clusters_range", "puncta_per_cluster_range", "radius_range", "spread_range",
                     "amplitude_range", "blur_sigma_range", "contrast_gain_range", "contrast_clamp"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty interval [{lo}, {hi}]")
        if not 0.0 <= self.line_pattern_prob <= 1.0:
            raise ValueError("line_pattern_prob must lie in [0, 1]")
        if self.patch_size < 4:
            raise ValueError("patch_size too small")
        if self.clusters_range[0] < 0 or self.puncta_per_cluster_range[0] < 0:
            raise ValueError("counts must be non-negative")
        if self.radius_range[0] < 0 or self.spread_range[0] <= 0 or self.amplitude_range[0] < 0:
            raise ValueError("radius >= 0, spread > 0, amplitude >= 0 required")
        if self.blur_sigma_range[0] <= 0 or self.contrast_gain_range[0] <= 0:
            raise ValueError("blur sigma and contrast gain must be positive")
        if self.contrast_clamp[0] <= 0:
            raise ValueError("contrast clamp must be positive")
        if self.local_window < 1 or self.local_window % 2 == 0:
            raise ValueError("local_window must be a positive odd integer")


@dataclass
class LabeledPatch:
    x_s: np.ndarray
    y_s: np.ndarray
    s_s: np.ndarray
    puncta: list[Punctum] = field(default_factory=list)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x_s, self.y_s, self.s_s):
            h.update(np.ascontiguousarray(arr).tobytes())
        for p in self.puncta:
            h.update(np.array([p.center_row, p.center_col, p.radius, p.spread, p.amplitude]).tobytes())
        return h.hexdigest()


def _uniform(rng, interval):
    lo, hi = interval
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _lerp(interval, u: float) -> float:
    lo, hi = interval
    return float(lo + u * (hi - lo))


def sample_cluster_layout(rng: np.random.Generator, cfg: SynthConfig) -> list[Punctum]:
    """Draw clusters of puncta, each compact (Gaussian scatter) or along a line."""
    n = cfg.patch_size
    hi = n - 1.0
    puncta = []
    n_clusters = int(rng.integers(cfg.clusters_range[0], cfg.clusters_range[1] + 1))
    for _ in range(n_clusters):
        count = int(rng.integers(cfg.puncta_per_cluster_range[0], cfg.puncta_per_cluster_range[1] + 1))
        is_line = rng.random() < cfg.line_pattern_prob
        if is_line:
            half = 2.0 * cfg.cluster_spread
            margin = min(half, hi / 2.0)
            center = rng.uniform(margin, hi - margin, size=2)
            angle = rng.uniform(0.0, np.pi)
            direction = np.array([np.sin(angle), np.cos(angle)])
            # Shrink the segment so both ends stay inside the patch; keeps centers collinear.
            reach = min(half, *(min(c, hi - c) / max(abs(d), 1e-12) for c, d in zip(center, direction)))
            offsets = rng.uniform(-reach, reach, size=count)
            centers = center[None, :] + offsets[:, None] * direction[None, :]
        else:
            margin = min(cfg.cluster_spread, hi / 2.0)
            center = rng.uniform(margin, hi - margin, size=2)
            centers = center[None, :] + rng.normal(0.0, cfg.cluster_spread, size=(count, 2))
        centers = np.clip(centers, 0.0, hi)
        for r, c in centers:
            # One size draw drives both support radius and kernel spread, so a
            # larger calcification is also a wider blob.
            size = rng.random()
            spread_u = min(max(size + SIZE_JITTER * rng.standard_normal(), 0.0), 1.0)
            puncta.append(Punctum(
                center_row=float(r),
                center_col=float(c),
                radius=_lerp(cfg.radius_range, size),
                spread=_lerp(cfg.spread_range, spread_u),
                amplitude=_uniform(rng, cfg.amplitude_range),
            ))
    return puncta


def _pixel_grid(h: int, w: int):
    return np.arange(h, dtype=np.float64)[:, None], np.arange(w, dtype=np.float64)[None, :]


def render_mc_field(puncta, h: int, w: int) -> np.ndarray:
    rows, cols = _pixel_grid(h, w)
    field_ = np.zeros((h, w))
    for p in puncta:
        d2 = (rows - p.center_row) ** 2 + (cols - p.center_col) ** 2
        field_ += p.amplitude * np.exp(-d2 / (2.0 * p.spread**2))
    return field_


def mask_from_puncta(puncta, h: int, w: int) -> np.ndarray:
    """Union of disks on pixel centers; every punctum owns at least its nearest pixel."""
    rows, cols = _pixel_grid(h, w)
    mask = np.zeros((h, w), dtype=np.uint8)
    for p in puncta:
        d2 = (rows - p.center_row) ** 2 + (cols - p.center_col) ** 2
        mask[d2 <= p.radius**2] = 1
        r = min(max(int(np.floor(p.center_row + 0.5)), 0), h - 1)
        c = min(max(int(np.floor(p.center_col + 0.5)), 0), w - 1)
        mask[r, c] = 1
    return mask


def local_contrast(x_b, gain: float, cfg: SynthConfig) -> np.ndarray:
    if not gain > 0:
        raise ValueError("contrast gain must be positive")
    x_b = np.asarray(x_b, dtype=np.float64)
    mean = box_mean(x_b, cfg.local_window)
    var = np.maximum(box_mean(x_b * x_b, cfg.local_window) - mean * mean, 0.0)
    ratio = np.sqrt(var) / (x_b.std() + 1e-6)
    lo, hi = cfg.contrast_clamp
    return gain * np.clip(ratio, lo, hi)


def inject(x_b, a_s, blur_sigma: float, kappa) -> np.ndarray:
    x_b = np.asarray(x_b, dtype=np.float64)
    a_s = np.asarray(a_s, dtype=np.float64)
    kappa = np.broadcast_to(np.asarray(kappa, dtype=np.float64), x_b.shape)
    if a_s.shape != x_b.shape:
        raise ValueError(f"shape mismatch: background {x_b.shape} vs field {a_s.shape}")
    delta = gaussian_blur(a_s, blur_sigma)
    return np.clip(x_b + kappa * delta, -1.0, 1.0)


def components(mask) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)


def extract_seed_from_mask(y_s, rng: np.random.Generator) -> np.ndarray:
    """One uniformly chosen pixel per 8-connected component."""
    labels, n = components(y_s)
    seed = np.zeros(labels.shape, dtype=np.uint8)
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, n + 2))
    for k in range(n):
        members = order[bounds[k] : bounds[k + 1]]
        seed.flat[members[rng.integers(len(members))]] = 1
    return seed


def make_labeled_patch(x_b, rng: np.random.Generator, cfg: SynthConfig) -> LabeledPatch:
    x_b = np.asarray(x_b, dtype=np.float64)
    n = cfg.patch_size
    if x_b.shape != (n, n):
        raise ValueError(f"background must be {n}x{n}, got {x_b.shape}")
    puncta = sample_cluster_layout(rng, cfg)
    a_s = render_mc_field(puncta, n, n)
    blur = _uniform(rng, cfg.blur_sigma_range)
    gain = _uniform(rng, cfg.contrast_gain_range)
    x_s = inject(x_b, a_s, blur, local_contrast(x_b, gain, cfg))
    y_s = mask_from_puncta(puncta, n, n)
    s_s = extract_seed_from_mask(y_s, rng)
    return LabeledPatch(x_s=x_s, y_s=y_s, s_s=s_s, puncta=puncta)
