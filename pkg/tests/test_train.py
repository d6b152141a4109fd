import math

import numpy as np
import pytest

from finegrain.autograd import Tape, backward
from finegrain.config import RunConfig
from finegrain.data import synthetic_dataset
from finegrain.finet import build_finet
from finegrain.layers import Dropout
from finegrain.tensor import Rng, Tensor
from finegrain.train import (
    CSV_HEADER, OptimState, Schedule, cross_entropy, evaluate, metrics_line, schedule_lr, sgd_step,
    train_epochs,
)


def test_cross_entropy_matches_loop():
    z = np.array([[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]])
    y = np.array([1, 0])
    expected = 0.0
    for row, label in zip(z, y):
        expected -= row[label] - math.log(sum(math.exp(v) for v in row))
    expected /= 2
    assert cross_entropy(Tensor(z.reshape(2, 3, 1, 1)), y).item() == pytest.approx(expected, abs=1e-12)


def test_sgd_momentum_two_steps():
    p = Tensor(np.array([1.0, -2.0]).reshape(1, 2, 1, 1), requires_grad=True)
    opt = OptimState(lr=0.1, momentum=0.9, weight_decay=0.0)
    g = {"w": np.array([0.5, 1.0]).reshape(1, 2, 1, 1)}
    sgd_step([("w", p)], g, opt)
    assert np.allclose(p.data.ravel(), [0.95, -2.1])
    sgd_step([("w", p)], g, opt)
    # buffer = 0.9*g + g = 1.9 g
    assert np.allclose(p.data.ravel(), [0.95 - 0.095, -2.1 - 0.19])


def test_weight_decay_skips_affine_and_bias():
    w = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    gamma = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    zero = {"conv.weight": np.zeros((1, 1, 1, 1)), "bn.gamma": np.zeros((1, 1, 1, 1))}
    sgd_step([("conv.weight", w), ("bn.gamma", gamma)], zero, OptimState(1.0, 0.0, 0.5))
    assert w.data.item() == 0.5 and gamma.data.item() == 1.0


def test_non_finite_gradient_stops_step():
    p = Tensor(np.ones((1, 2, 1, 1)), requires_grad=True)
    with pytest.raises(FloatingPointError, match="w"):
        sgd_step([("w", p)], {"w": np.array([np.nan, 0.0]).reshape(1, 2, 1, 1)}, OptimState(0.1))
    assert np.all(p.data == 1)


def test_step_schedule_epochs():
    s = Schedule("step", 0.1, milestones=(10, 15), factor=10)
    assert [schedule_lr(s, e) for e in (0, 9, 10, 14, 15, 19)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001])


def test_linear_schedule_reaches_zero():
    s = Schedule("linear", 0.2, total_steps=100)
    assert schedule_lr(s, 0) == 0.2
    assert schedule_lr(s, 50) == pytest.approx(0.1)
    assert schedule_lr(s, 100) == 0.0


def small_net(seed=0):
    net = build_finet("small", cifar_adapted=True, num_classes=10, seed=seed)
    for _, layer in net.walk():
        if isinstance(layer, Dropout):
            layer.rate = 0.0
    return net


def test_evaluate_is_pure():
    net = small_net()
    data = synthetic_dataset("gaussian_blobs", 16, 10, seed=0)
    before = net.checksum()
    evaluate(net, data, batch_size=8)
    assert net.checksum() == before
    assert net.mode == "train"


def test_small_step_decreases_batch_loss():
    net = small_net(1)
    data = synthetic_dataset("gaussian_blobs", 160, 10, seed=1)
    params = list(net.named_parameters())
    decreased = 0
    for x, y in data.batches(8, Rng(2)):
        with Tape() as tape:
            loss = cross_entropy(net(Tensor(x)), y)
        sgd_step(params, backward(tape, loss), OptimState(1e-4, 0.0, 0.0))
        decreased += cross_entropy(net(Tensor(x)), y).item() < loss.item()
    assert decreased == 20


def test_epoch_loop_writes_metrics(tmp_path):
    cfg = RunConfig(epochs=2, batch_size=16, train_subset=0, test_subset=0, lr=0.05, milestones="1")
    train = synthetic_dataset("gaussian_blobs", 48, 10, seed=0)
    val = synthetic_dataset("gaussian_blobs", 16, 10, seed=1)
    lines = []
    hist = train_epochs(small_net(), train, val, cfg, tmp_path / "m.csv", lines.append)
    assert [h["lr"] for h in hist] == pytest.approx([0.05, 0.005])
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == ",".join(CSV_HEADER) and len(rows) == 3
    assert lines[0] == metrics_line(hist[0]) and lines[0].startswith("epoch=1 lr=0.050000 train_loss=")


def test_class_mismatch_rejected():
    with pytest.raises(ValueError):
        evaluate(build_finet("small", cifar_adapted=True, num_classes=100),
                 synthetic_dataset("gaussian_blobs", 4, 10, seed=0))
