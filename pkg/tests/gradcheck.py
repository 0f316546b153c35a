"""Central finite-difference checks for network parameter gradients."""
import numpy as np
import torch

from mcrefine import losses
from mcrefine.nets import Segmentor, VelocityNet

H_STEP = 1e-3


def random_net(cls, seed, size=16):
    net = cls(seed=seed).double()
    net.reset_parameters(np.random.default_rng(seed), zero_head=False)
    return net


def seg_objective(net, x, y):
    p = torch.sigmoid(net(x))
    return losses.segmentation_loss(p, y, losses.LossWeights()).sum()


def rf_objective(net, x, s, z, t):
    return losses.flow_matching_loss(net, x, s, z, t).sum()


def make_case(kind, seed, size=16):
    g = np.random.default_rng(seed)
    if kind == "segmentor":
        net = random_net(Segmentor, seed)
        x = torch.from_numpy(g.uniform(-1, 1, (2, size, size)))
        y = torch.from_numpy((g.random((2, size, size)) > 0.9).astype(np.float64))
        return net, lambda: seg_objective(net, x, y)
    net = random_net(VelocityNet, seed)
    x = torch.from_numpy(g.uniform(-1, 1, (2, size, size)))
    s = torch.from_numpy((g.random((2, size, size)) > 0.97).astype(np.float64))
    z = torch.from_numpy(g.standard_normal((2, size, size)))
    t = torch.from_numpy(g.random(2))
    return net, lambda: rf_objective(net, x, s, z, t)


def check(kind, seed, coords_per_tensor=1, scaled=False):
    """Worst relative error over sampled coordinates plus one random direction.

    With ``scaled`` each coordinate's error is divided by the largest gradient
    magnitude in its tensor instead of by its own magnitude.
    """
    g = np.random.default_rng(10_000 + seed)
    net, objective = make_case(kind, seed)
    net.zero_grad()
    objective().backward()
    params = list(net.named_parameters())
    grads = {n: p.grad.detach().clone() for n, p in params}
    worst = 0.0
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            gflat = grads[name].view(-1)
            picks = [int(torch.argmax(gflat.abs()))] + list(g.integers(0, flat.numel(), coords_per_tensor))
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + H_STEP
                up = objective().item()
                flat[i] = orig - H_STEP
                down = objective().item()
                flat[i] = orig
                fd = (up - down) / (2 * H_STEP)
                ad = gflat[i].item()
                scale = gflat.abs().max().item() if scaled else max(abs(fd), abs(ad))
                worst = max(worst, abs(fd - ad) / max(scale, 1e-7))
        direction = [torch.from_numpy(g.standard_normal(p.shape)) for _, p in params]
        norm = torch.sqrt(sum((d * d).sum() for d in direction))
        direction = [d / norm for d in direction]
        ad = sum((grads[n] * d).sum() for (n, _), d in zip(params, direction)).item()
        for (_, p), d in zip(params, direction):
            p.add_(H_STEP * d)
        up = objective().item()
        for (_, p), d in zip(params, direction):
            p.sub_(2 * H_STEP * d)
        down = objective().item()
        for (_, p), d in zip(params, direction):
            p.add_(H_STEP * d)
        fd = (up - down) / (2 * H_STEP)
        worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad), 1e-7))
    return worst
