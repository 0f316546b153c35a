"""Rectified-flow interpolation, Euler sampling and seed-conditioned projection.

``velocity`` arguments are either a :class:`~mcrefine.nets.VelocityNet` or any
callable ``(m, t, seed) -> velocity`` on numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nets import VelocityNet, velocity_forward


@dataclass
class RFConfig:
    euler_steps: int = 8
    clip_output: bool = True

    def __post_init__(self):
        if self.euler_steps < 1:
            raise ValueError("euler_steps must be >= 1")


def _check_time(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time must lie in [0, 1], got {t}")


def interpolate(x, z, t: float) -> np.ndarray:
    _check_time(t)
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {z.shape}")
    return t * x + (1.0 - t) * z


def _field(velocity):
    if isinstance(velocity, VelocityNet):
        return lambda m, t, s: velocity_forward(velocity, m, t, s)
    return velocity


def _integrate(velocity, m, s, t0: float, steps: int) -> np.ndarray:
    f = _field(velocity)
    dt = (1.0 - t0) / steps
    for k in range(steps):
        m = m + dt * f(m, t0 + k * dt, s)
    return m


def rf_sample(velocity, z, s, cfg: RFConfig = RFConfig()) -> np.ndarray:
    """Euler-integrate the flow from noise ``z`` at time 0 to time 1."""
    z = np.asarray(z, dtype=np.float64)
    out = _integrate(velocity, z, s, 0.0, cfg.euler_steps)
    return np.clip(out, -1.0, 1.0) if cfg.clip_output else out


def projection_steps(t: float, euler_steps: int) -> int:
    if t >= 1.0:
        return 0
    return max(1, math.ceil(euler_steps * (1.0 - t)))


def project(velocity, x, s, t: float, z, cfg: RFConfig = RFConfig()) -> np.ndarray:
    """Noise ``x`` back to time ``t`` along the straight path, then flow to 1.

    Smaller ``t`` mixes in more noise and hands more of the result to the
    learned prior.  The output is always clipped to [-1, 1].
    """
    m = interpolate(x, z, t)
    steps = projection_steps(t, cfg.euler_steps)
    if steps:
        m = _integrate(velocity, m, s, t, steps)
    return np.clip(m, -1.0, 1.0)
