"""SGD with momentum, learning-rate schedules, and the epoch loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autograd import GradientMap, Tape, backward, record
from .data import Dataset
from .layers import NetworkGraph
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

CSV_HEADER = ["epoch", "lr", "train_loss", "train_top1", "val_loss", "val_top1"]


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (n, K, 1, 1) logits against class indices."""
    n, k = logits.shape[:2]
    z = logits.data.reshape(n, k).astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    out = Tensor(np.array(loss, dtype=logits.dtype).reshape(1, 1, 1, 1))

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((p * (float(g.reshape(())) / n)).astype(logits.dtype).reshape(n, k, 1, 1),)

    return record(out, (logits,), bw)


def top1(logits: Tensor, labels: np.ndarray) -> float:
    pred = logits.data.reshape(logits.shape[0], -1).argmax(axis=1)
    return float((pred == labels).mean()) if len(labels) else 0.0


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str) -> bool:
    """Weight decay covers conv and linear weights only."""
    return name.endswith("weight")


def sgd_step(params: list[tuple[str, Tensor]], grads: GradientMap, opt: OptimState) -> None:
    """buf <- momentum*buf + (grad + wd*param); param <- param - lr*buf."""
    for name, p in params:
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient for {name}: {bad} of {g.size} entries")
        if opt.weight_decay and decays(name):
            g = g + opt.weight_decay * p.data
        buf = opt.buffers.get(name)
        buf = g.astype(p.data.dtype) if buf is None else opt.momentum * buf + g
        opt.buffers[name] = buf
        p.data = (p.data - opt.lr * buf).astype(p.data.dtype, copy=False)


@dataclass(frozen=True)
class Schedule:
    kind: str  # linear | step
    lr0: float
    total_steps: int = 0
    milestones: tuple[int, ...] = ()
    factor: float = 10.0


def schedule_lr(s: Schedule, step: int) -> float:
    """Learning rate at ``step`` (iterations for linear, epochs for step)."""
    if s.kind == "linear":
        if s.total_steps <= 0:
            return 0.0
        return max(0.0, s.lr0 * (1.0 - step / s.total_steps))
    if s.kind == "step":
        passed = sum(1 for m in s.milestones if step >= m)
        return s.lr0 / s.factor ** passed
    raise ValueError(f"unknown schedule {s.kind!r}")


def evaluate(net: NetworkGraph, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """(mean loss, top-1) in inference mode; the network is left in its prior mode."""
    check_classes(net, data)
    prev = net.mode
    net.eval()
    total_loss, correct = 0.0, 0.0
    try:
        for x, y in data.batches(batch_size):
            logits = net(Tensor(x))
            total_loss += cross_entropy(logits, y).item() * len(y)
            correct += top1(logits, y) * len(y)
    finally:
        if prev == "train":
            net.train()
    n = max(len(data), 1)
    return total_loss / n, correct / n


def calibrate_norm_stats(net: NetworkGraph, x: Tensor) -> None:
    """Set every running statistic to the batch statistics of one train-mode
    pass on ``x`` (momentum forced to 1 for that pass)."""
    prev = net.mode
    states = [s for _, s in net.named_norm_states()]
    saved = [s.momentum for s in states]
    net.train()
    try:
        for s in states:
            s.momentum = 1.0
        net(x)
    finally:
        for s, m in zip(states, saved):
            s.momentum = m
        if prev == "infer":
            net.eval()


def check_classes(net: NetworkGraph, data: Dataset) -> None:
    k = net.metadata.get("num_classes")
    if k is not None and k != data.num_classes:
        raise ValueError(f"model predicts {k} classes, dataset has {data.num_classes}")


def _check_state(net: NetworkGraph) -> None:
    for name, s in net.named_norm_states():
        if not (np.all(np.isfinite(s.running_mean)) and np.all(np.isfinite(s.running_var))):
            raise FloatingPointError(f"non-finite running statistics in {name}")
    for name, t in net.named_parameters():
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"non-finite parameter {name}")


def metrics_line(m: dict) -> str:
    return " ".join(f"{k}={m[k]:.6f}" if k != "epoch" else f"epoch={m[k]}" for k in CSV_HEADER)


def append_csv(path: str | Path, m: dict) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(CSV_HEADER)
        w.writerow([m["epoch"]] + [f"{m[k]:.6f}" for k in CSV_HEADER[1:]])


def train_epochs(net: NetworkGraph, train: Dataset, val: Dataset | None, cfg,
                 csv_path: str | Path | None = None, emit: Callable[[str], None] | None = None) -> list[dict]:
    """Run ``cfg.epochs`` epochs of SGD and return per-epoch metrics.

    ``cfg`` is a :class:`~finegrain.config.RunConfig`.  The step schedule
    counts epochs; the linear schedule counts iterations and reaches zero at
    the last one.
    """
    check_classes(net, train)
    rng = Rng(cfg.seed).spawn(7)
    steps_per_epoch = max(1, math.ceil(len(train) / cfg.batch_size))
    if cfg.schedule == "linear":
        sched = Schedule("linear", cfg.lr, total_steps=cfg.epochs * steps_per_epoch)
    else:
        sched = Schedule("step", cfg.lr, milestones=tuple(cfg.milestone_list()), factor=cfg.lr_factor)
    opt = OptimState(cfg.lr, cfg.sgd_momentum, cfg.weight_decay)
    params = list(net.named_parameters())
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        epoch_lr = schedule_lr(sched, step if sched.kind == "linear" else epoch - 1)
        loss_sum, correct, seen = 0.0, 0.0, 0
        for x, y in train.batches(cfg.batch_size, rng, augment=cfg.augment):
            opt.lr = schedule_lr(sched, step if sched.kind == "linear" else epoch - 1)
            with Tape() as tape:
                logits = net(Tensor(x))
                loss = cross_entropy(logits, y)
            grads = backward(tape, loss)
            sgd_step(params, grads, opt)
            loss_sum += loss.item() * len(y)
            correct += top1(logits, y) * len(y)
            seen += len(y)
            step += 1
            # drop this step's graph before the next forward pass allocates its own
            del tape, logits, loss, grads
        _check_state(net)
        m = {"epoch": epoch, "lr": epoch_lr,
             "train_loss": loss_sum / max(seen, 1), "train_top1": correct / max(seen, 1),
             "val_loss": float("nan"), "val_top1": float("nan")}
        if val is not None and len(val):
            m["val_loss"], m["val_top1"] = evaluate(net, val)
        history.append(m)
        line = metrics_line(m)
        log.info(line)
        if emit is not None:
            emit(line)
        if csv_path is not None:
            append_csv(csv_path, m)
    return history
