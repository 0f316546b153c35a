import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mcrefine import losses

import oracles

EPS = 1e-6
BETA = 2.6140537072408576


def test_dice_examples():
    y = np.zeros((4, 4))
    y[1:3, 1:3] = 1
    assert losses.dice_loss(y, y, EPS) < 1e-9
    assert losses.dice_loss(np.zeros_like(y), y, EPS) == pytest.approx(1 - EPS / (4 + EPS), abs=1e-15)
    v = losses.dice_loss(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]), EPS)
    assert v == pytest.approx(1 - (1 + EPS) / (2 + EPS), abs=1e-15)
    assert v == pytest.approx(0.5, abs=1e-6)


def test_focal_tversky_examples():
    y = np.zeros((5, 5))
    y[2, 1:4] = 1
    assert losses.focal_tversky_loss(y, y, 0.3, 0.7, 0.75, EPS) == 0.0
    g = np.random.default_rng(0)
    p = g.random((6, 6))
    assert losses.focal_tversky_loss(p, y[:1, :1].repeat(6, 0).repeat(6, 1), 0.3, 0.7, 1.0, EPS) == pytest.approx(
        losses.tversky_loss(p, y[:1, :1].repeat(6, 0).repeat(6, 1), 0.3, 0.7, EPS), abs=1e-15)
    v = losses.focal_tversky_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]), 0.3, 0.7, 0.75, EPS)
    # (1 - 1/1.7) ** 0.75 evaluated directly
    assert v == pytest.approx(0.5140280740466725, abs=1e-6)


def test_tversky_examples():
    p = np.zeros((3, 3))
    p[0, :2] = 1
    assert losses.tversky_stats(p, p) == (2.0, 0.0, 0.0)
    q = np.random.default_rng(1).random((3, 3))
    tp, fp, fn = losses.tversky_stats(np.zeros((3, 3)), q)
    assert tp == 0 and fp == 0 and fn == pytest.approx(q.sum())
    stats = losses.tversky_stats(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]))
    assert stats == (0.5, 0.5, 0.5)
    assert losses.tversky_loss(p, p, 0.3, BETA, EPS) == 0.0
    v = losses.tversky_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]), 0.3, BETA, EPS)
    assert v == pytest.approx(1 - 1 / (1 + BETA), abs=1e-6)
    assert v == pytest.approx(0.7233, abs=1e-4)
    empty = np.zeros((4, 4))
    assert losses.tversky_loss(empty, empty, 0.3, BETA, EPS) == 0.0


def test_edge_loss_examples():
    e = np.zeros((4, 4))
    e[1, :] = 1
    p = np.zeros((4, 4))
    p[1, 2] = 0.8
    assert losses.edge_loss(p, e, EPS) == 0.0
    assert losses.edge_loss(np.full((4, 4), 0.3), np.zeros((4, 4)), EPS) == pytest.approx(1.0, abs=1e-6)
    v = losses.edge_loss(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]), EPS)
    assert v == pytest.approx(0.5 / (1 + EPS), abs=1e-15)


def test_flow_matching_examples():
    g = np.random.default_rng(2)
    x, z, s = g.uniform(-1, 1, (8, 8)), g.normal(size=(8, 8)), np.zeros((8, 8))
    assert losses.flow_matching_loss(lambda m, t, s_: x - z, x, s, z, 0.3) == 0.0
    zero = losses.flow_matching_loss(lambda m, t, s_: np.zeros_like(m), x, s, z, 0.6)
    assert zero == pytest.approx(np.mean((x - z) ** 2), abs=1e-15)
    assert zero >= 0


@pytest.mark.parametrize("seed", range(10))
def test_losses_match_oracles(seed):
    g = np.random.default_rng(seed)
    h, w = g.integers(8, 33, size=2)
    p, q, e = g.random((h, w)), (g.random((h, w)) > 0.8).astype(float), g.random((h, w))
    a, b, gam = g.uniform(0, 1, 3)
    assert losses.dice_loss(p, q, EPS) == pytest.approx(oracles.dice_loss(p, q, EPS), abs=1e-12)
    assert losses.tversky_loss(p, q, a, b, EPS) == pytest.approx(oracles.tversky_loss(p, q, a, b, EPS), abs=1e-12)
    assert losses.focal_tversky_loss(p, q, a, b, gam, EPS) == pytest.approx(
        oracles.focal_tversky_loss(p, q, a, b, gam, EPS), abs=1e-12)
    assert losses.edge_loss(p, e, EPS) == pytest.approx(oracles.edge_loss(p, e, EPS), abs=1e-12)


def test_unit_weights_give_soft_jaccard_complement():
    for seed in range(20):
        g = np.random.default_rng(seed)
        p, q = g.random((8, 8)), g.random((8, 8))
        tp = sum(a * b for a, b in zip(p.ravel(), q.ravel()))
        union = sum(a + b - a * b for a, b in zip(p.ravel(), q.ravel()))
        assert losses.tversky_loss(p, q, 1.0, 1.0, EPS) == pytest.approx(1 - (tp + EPS) / (union + EPS), abs=1e-12)


def test_batched_reduction_matches_per_sample():
    g = np.random.default_rng(3)
    p, y = g.random((4, 8, 8)), (g.random((4, 8, 8)) > 0.7).astype(float)
    batched = losses.dice_loss(p, y)
    assert batched.shape == (4,)
    for i in range(4):
        assert batched[i] == losses.dice_loss(p[i], y[i])


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        losses.dice_loss(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        losses.tversky_stats(np.zeros((3, 3)), np.zeros((4, 3)))


@settings(max_examples=50)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(0, 50), st.floats(0.01, 10))
def test_focal_tversky_nonincreasing_in_tp(tp, fp, fn, d):
    def ft(tp_):
        ti = (tp_ + EPS) / (tp_ + 0.3 * fp + 0.7 * fn + EPS)
        return max(1 - ti, 0.0) ** 0.75
    assert ft(tp + d) <= ft(tp) + 1e-15


@pytest.mark.parametrize("name", ["dice", "tversky", "focal", "edge"])
def test_loss_gradients_match_finite_differences(name):
    g = np.random.default_rng(11)
    q = (g.random((8, 8)) > 0.7).astype(float)
    e = g.random((8, 8))
    fns = {
        "dice": lambda p: losses.dice_loss(p, torch.from_numpy(q)),
        "tversky": lambda p: losses.tversky_loss(p, torch.from_numpy(q), 0.3, BETA),
        "focal": lambda p: losses.focal_tversky_loss(p, torch.from_numpy(q), 0.3, 0.7, 0.75),
        "edge": lambda p: losses.edge_loss(p, torch.from_numpy(e)),
    }
    f = fns[name]
    p0 = torch.from_numpy(g.uniform(0.05, 0.95, (8, 8))).requires_grad_(True)
    f(p0).backward()
    grad = p0.grad.numpy()
    h = 1e-5
    for idx in [(0, 0), (3, 4), (7, 7), (5, 1)]:
        hi, lo = p0.detach().clone(), p0.detach().clone()
        hi[idx] += h
        lo[idx] -= h
        fd = (float(f(hi)) - float(f(lo))) / (2 * h)
        assert abs(fd - grad[idx]) <= 1e-4 * max(abs(fd), abs(grad[idx]), 1e-8)
