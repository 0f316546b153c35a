"""Overlap, regression and edge losses.

Every function reduces over the last two (spatial) axes, so the same code
serves numpy arrays (oracles, refinement) and torch tensors (training,
autograd); a leading batch axis yields one loss per sample.
"""
from __future__ import annotations

from dataclasses import dataclass

EPS = 1e-6


@dataclass
class LossWeights:
    lambda_dice: float = 1.0
    lambda_ft: float = 1.0
    alpha_ft: float = 0.3
    beta_ft: float = 0.7
    gamma_ft: float = 0.75
    eps: float = EPS


def _sum(a):
    return a.sum(axis=(-2, -1))


def _check(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(p, y, eps: float = EPS):
    _check(p, y)
    return 1.0 - (2.0 * _sum(p * y) + eps) / (_sum(p) + _sum(y) + eps)


def tversky_stats(p, q):
    """Soft (TP, FP, FN) of prediction ``p`` against target ``q``."""
    _check(p, q)
    tp = _sum(p * q)
    fp = _sum(p * (1.0 - q))
    fn = _sum((1.0 - p) * q)
    return tp, fp, fn


def tversky_index(p, q, alpha: float, beta: float, eps: float = EPS):
    tp, fp, fn = tversky_stats(p, q)
    return (tp + eps) / (tp + alpha * fp + beta * fn + eps)


def tversky_loss(p, q, alpha: float, beta: float, eps: float = EPS):
    if alpha < 0 or beta < 0:
        raise ValueError("Tversky weights must be non-negative")
    return 1.0 - tversky_index(p, q, alpha, beta, eps)


def focal_tversky_loss(p, y, alpha: float = 0.3, beta: float = 0.7, gamma: float = 0.75,
                       eps: float = EPS):
    # clip guards rounding just above TI = 1 before the fractional power; the
    # base is swapped for 1 where it is 0 so the derivative stays finite there
    base = (1.0 - tversky_index(p, y, alpha, beta, eps)).clip(min=0.0)
    positive = base > 0
    return (base + (~positive)) ** gamma * positive


def segmentation_loss(p, y, w: LossWeights):
    return w.lambda_dice * dice_loss(p, y, w.eps) + w.lambda_ft * focal_tversky_loss(
        p, y, w.alpha_ft, w.beta_ft, w.gamma_ft, w.eps)


def flow_matching_loss(net, x_s, s_s, z, t):
    """Mean squared error between predicted and straight-line velocity.

    ``net`` is a callable ``(m_t, t, seed) -> velocity`` on torch tensors.
    """
    _check(x_s, z)
    _check(x_s, s_s)
    tt = t if not hasattr(t, "ndim") or t.ndim == 0 else t.reshape(-1, *([1] * (x_s.ndim - 1)))
    m_t = tt * x_s + (1.0 - tt) * z
    v = net(m_t, t, s_s)
    return ((v - (x_s - z)) ** 2).mean(axis=(-2, -1))


def edge_loss(p, e, eps: float = EPS):
    """Share of predicted mass lying away from image edges."""
    _check(p, e)
    return _sum(p * (1.0 - e)) / (_sum(p) + eps)
