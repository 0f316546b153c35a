"""Small convolutional encoder-decoder networks for segmentation and velocity.

Both networks share one U-shaped body: two 2x average-pool downsamplings,
channel widths 16/32/64, 3x3 convolutions with a smooth leaky rectifier
(negative slope 0.1), a concatenation skip at each resolution and a
zero-initialized 1x1 head.
Weights are initialized from a numpy generator so runs are reproducible
without touching torch's global RNG.
"""
from __future__ import annotations

import copy
import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MCW1_MAGIC = b"MCW1"
SLOPE = 0.1


def _conv(cin: int, cout: int, k: int = 3) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, padding=k // 2)


LOG2 = math.log(2.0)


class SmoothLeakyReLU(nn.Module):
    """``slope * x + (1 - slope) * (softplus(x) - log 2)``: leaky-ReLU asymptotes, no kink.

    Smoothness keeps central finite differences honest at step 1e-3; the
    ``log 2`` shift keeps ``f(0) = 0`` so activations carry no DC offset.
    """

    def __init__(self, slope: float = SLOPE):
        super().__init__()
        self.slope = slope

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.slope * x + (1.0 - self.slope) * (F.softplus(x) - LOG2)


class _Level(nn.Sequential):
    def __init__(self, cin: int, cout: int, convs: int):
        layers = []
        for i in range(convs):
            layers.append(_conv(cin if i == 0 else cout, cout))
            layers.append(SmoothLeakyReLU())
        super().__init__(*layers)


class EncoderDecoder(nn.Module):
    role = "generic"
    in_channels = 1

    def __init__(self, widths=(16, 32, 64), convs_per_level: int = 2, seed: int = 0):
        super().__init__()
        a, b, c = widths
        self.widths = tuple(widths)
        self.convs_per_level = convs_per_level
        self.enc1 = _Level(self.in_channels, a, convs_per_level)
        self.enc2 = _Level(a, b, convs_per_level)
        self.mid = _Level(b, c, convs_per_level)
        self.dec2 = _Level(c + b, b, convs_per_level)
        self.dec1 = _Level(b + a, a, convs_per_level)
        self.head = nn.Conv2d(a, 1, 1)
        self.reset_parameters(np.random.default_rng(seed))

    def reset_parameters(self, rng: np.random.Generator, zero_head: bool = True) -> None:
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.weight[0].numel()
                    # He-normal for the leaky rectifier
                    std = np.sqrt(2.0 / ((1 + SLOPE**2) * fan_in))
                    m.weight.copy_(torch.from_numpy(rng.normal(0.0, std, m.weight.shape)))
                    m.bias.zero_()
            if zero_head:
                self.head.weight.zero_()
                self.head.bias.zero_()

    def body(self, inp: torch.Tensor) -> torch.Tensor:
        if inp.shape[-1] % 4 or inp.shape[-2] % 4:
            raise ValueError(f"spatial size must be divisible by 4, got {tuple(inp.shape[-2:])}")
        h1 = self.enc1(inp)
        h2 = self.enc2(F.avg_pool2d(h1, 2))
        h3 = self.mid(F.avg_pool2d(h2, 2))
        u2 = self.dec2(torch.cat([F.interpolate(h3, scale_factor=2, mode="nearest"), h2], 1))
        u1 = self.dec1(torch.cat([F.interpolate(u2, scale_factor=2, mode="nearest"), h1], 1))
        return self.head(u1)[:, 0]


class Segmentor(EncoderDecoder):
    """Maps image patches ``(B, H, W)`` to logits ``(B, H, W)``."""

    role = "segmentor"
    in_channels = 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x[:, None])


class VelocityNet(EncoderDecoder):
    """Seed-conditioned velocity field over input planes ``[m_t, seed, t]``."""

    role = "velocity"
    in_channels = 3

    def forward(self, m: torch.Tensor, t, s: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=m.dtype)
        if t.ndim == 0:
            t = t.expand(m.shape[0])
        if bool((t < 0).any()) or bool((t > 1).any()):
            raise ValueError("time must lie in [0, 1]")
        plane = t[:, None, None].expand_as(m)
        return self.body(torch.stack([m, s.to(m.dtype), plane], 1))


def _dtype(net: nn.Module) -> torch.dtype:
    return next(net.parameters()).dtype


def _batched(arr) -> tuple[torch.Tensor, bool]:
    a = np.asarray(arr)
    single = a.ndim == 2
    return torch.from_numpy(np.ascontiguousarray(a[None] if single else a)), single


def segmentor_forward(net: Segmentor, x) -> np.ndarray:
    """Logits for a patch ``(H, W)`` or batch ``(B, H, W)``; float64 numpy out."""
    xt, single = _batched(x)
    with torch.no_grad():
        out = net(xt.to(_dtype(net))).double().numpy()
    return out[0] if single else out


def velocity_forward(net: VelocityNet, m, t: float, s) -> np.ndarray:
    mt, single = _batched(m)
    st, _ = _batched(s)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time must lie in [0, 1], got {t}")
    dt = _dtype(net)
    with torch.no_grad():
        out = net(mt.to(dt), torch.tensor(float(t), dtype=dt), st.to(dt)).double().numpy()
    return out[0] if single else out


class EMA:
    """Shadow copy of a network tracking ``decay * shadow + (1 - decay) * params``."""

    def __init__(self, net: nn.Module, decay: float = 0.999):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        self.decay = decay
        self.module = copy.deepcopy(net)
        for p in self.module.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, net: nn.Module) -> None:
        shadow = dict(self.module.named_parameters())
        for name, p in net.named_parameters():
            e = shadow[name]
            if e.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(e.shape)} vs {tuple(p.shape)}")
            e.mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)


# -- MCW1 checkpoints -------------------------------------------------------

def state_arrays(net: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().astype("<f4") for k, v in net.state_dict().items()}


def write_mcw1(path, entries: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MCW1_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_mcw1(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MCW1_MAGIC:
        raise ValueError(f"{path}: not an MCW1 checkpoint")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
        pos += 4 * n
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out


def net_from_arrays(entries: dict[str, np.ndarray], prefix: str) -> EncoderDecoder:
    """Rebuild a network whose parameters are stored under ``prefix``."""
    own = {k[len(prefix):]: v for k, v in entries.items() if k.startswith(prefix)}
    if not own:
        raise KeyError(f"no entries with prefix {prefix!r}")
    first = own["enc1.0.weight"]
    cls = VelocityNet if first.shape[1] == 3 else Segmentor
    convs = sum(1 for k in own if k.startswith("enc1.") and k.endswith(".weight"))
    widths = (own["enc1.0.weight"].shape[0], own["enc2.0.weight"].shape[0], own["mid.0.weight"].shape[0])
    net = cls(widths=widths, convs_per_level=convs)
    net.load_state_dict({k: torch.from_numpy(v) for k, v in own.items()})
    return net
