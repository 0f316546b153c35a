"""Synthetic datasets and the two training loops."""
from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import losses
from .config import RFTrainConfig, SegTrainConfig
from .grid import read_patch
from .nets import EMA, Segmentor, VelocityNet, state_arrays, write_mcw1
from .optim import AdamW
from .rng import child_seed, substream
from .synth import SynthConfig, make_labeled_patch
from .texture import TextureParams, generate_texture_background

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class PairSet:
    """Stacked synthetic pairs: images, masks and seeds, each ``(N, H, W)``."""

    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    puncta_counts: np.ndarray

    def __len__(self):
        return len(self.x)


def background_source(seed: int, stream: str, texture: TextureParams, size: int, directory: str = ""):
    """Callable ``i -> background patch``: files from ``directory`` or generated texture."""
    if directory:
        files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".pgm", ".mct1"))
        if not files:
            raise FileNotFoundError(f"no .pgm/.mct1 backgrounds in {directory}")

        def load(i: int) -> np.ndarray:
            patch = read_patch(files[i % len(files)])
            if patch.shape != (size, size):
                raise ValueError(f"{files[i % len(files)]}: expected {size}x{size}, got {patch.shape}")
            return patch

        return load
    return lambda i: generate_texture_background(substream(seed, f"{stream}/bg/{i}"), texture, size, size)


def build_pairs(seed: int, stream: str, count: int, synth: SynthConfig, backgrounds) -> PairSet:
    xs, ys, ss, counts = [], [], [], []
    for i in range(count):
        lp = make_labeled_patch(backgrounds(i), substream(seed, f"{stream}/pair/{i}"), synth)
        xs.append(lp.x_s)
        ys.append(lp.y_s)
        ss.append(lp.s_s)
        counts.append(len(lp.puncta))
    return PairSet(np.stack(xs), np.stack(ys), np.stack(ss), np.array(counts))


def shifted_config(synth: SynthConfig, gain_scale: float = 0.5, blur_scale: float = 1.5) -> SynthConfig:
    """Weaker, blurrier puncta: the cross-site surrogate for testing."""
    g_lo, g_hi = synth.contrast_gain_range
    b_lo, b_hi = synth.blur_sigma_range
    return replace(synth, contrast_gain_range=(g_lo * gain_scale, g_hi * gain_scale),
                   blur_sigma_range=(b_lo * blur_scale, b_hi * blur_scale))


def scheduled_lr(base: float, step: int, total: int, schedule: str) -> float:
    if schedule == "constant":
        return base
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))
    raise ValueError(f"unknown learning-rate schedule {schedule!r}")


def _tensor(a) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


@contextmanager
def flush_denormals():
    """Flush subnormals while training, then restore the caller's setting."""
    was_flushing = torch.tensor(5e-324, dtype=torch.float64).mul(1.0).item() == 0.0
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(was_flushing)


def train_segmentor(cfg: SegTrainConfig, data: PairSet, rng: np.random.Generator,
                    net: Segmentor | None = None, checkpoint: str | None = None,
                    history: list | None = None) -> Segmentor:
    with flush_denormals():
        return _segmentor_loop(cfg, data, rng, net, checkpoint, history)


def _segmentor_loop(cfg, data, rng, net, checkpoint, history):
    net = net or Segmentor(seed=child_seed(rng))
    opt = AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    weights = cfg.loss_weights()
    for step in range(cfg.steps):
        opt.lr = scheduled_lr(cfg.lr, step, cfg.steps, cfg.lr_schedule)
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        p = torch.sigmoid(net(_tensor(data.x[idx])))
        loss = losses.segmentation_loss(p, _tensor(data.y[idx]), weights).mean()
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"segmentor loss is non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if history is not None:
            history.append(loss.item())
        if step % 250 == 0:
            log.info("seg step %d loss %.4f", step, loss.item())
        if checkpoint and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            write_mcw1(checkpoint, state_arrays(net, "segmentor."))
    return net


def train_rf(cfg: RFTrainConfig, data: PairSet, rng: np.random.Generator,
             net: VelocityNet | None = None, checkpoint: str | None = None,
             history: list | None = None) -> tuple[VelocityNet, EMA]:
    """Flow-matching regression with fresh noise and ``t ~ U[0, 1]`` per sample."""
    with flush_denormals():
        return _rf_loop(cfg, data, rng, net, checkpoint, history)


def _rf_loop(cfg, data, rng, net, checkpoint, history):
    net = net or VelocityNet(seed=child_seed(rng))
    ema = EMA(net, cfg.ema_decay)
    opt = AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    shape = data.x.shape[1:]
    for step in range(cfg.steps):
        opt.lr = scheduled_lr(cfg.lr, step, cfg.steps, cfg.lr_schedule)
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        z = rng.standard_normal((cfg.batch_size, *shape))
        t = rng.random(cfg.batch_size)
        loss = losses.flow_matching_loss(net, _tensor(data.x[idx]), _tensor(data.s[idx]),
                                         _tensor(z), _tensor(t)).mean()
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"flow-matching loss is non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema.update(net)
        if history is not None:
            history.append(loss.item())
        if step % 250 == 0:
            log.info("rf step %d loss %.4f", step, loss.item())
        if checkpoint and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_rf(checkpoint, net, ema)
    return net, ema


def save_segmentor(path, net: Segmentor) -> None:
    write_mcw1(path, state_arrays(net, "segmentor."))


def save_rf(path, net: VelocityNet, ema: EMA) -> None:
    entries = state_arrays(net, "velocity.")
    entries.update(state_arrays(ema.module, "ema."))
    write_mcw1(path, entries)
