"""Batch normalization and fine-grained batch normalization (FBN).

FBN standardizes each partial sum of a neuron's weighted inputs separately
and then adds the standardized partial sums.  The partial sums arrive here as
an "intermediate" tensor with G*C channels laid out group-major: channel
``g*C + c`` holds group g's contribution to output channel c.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import record
from .tensor import ShapeError, Tensor

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


class StateError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class DegenerateStatisticsError(ValueError):
    pass


@dataclass
class NormState:
    """Learned affine and running statistics for ``channels`` channels.

    ``running_var`` stores the biased variance before epsilon is added.
    ``frozen`` marks inference statistics; only frozen states can be folded.
    """

    channels: int
    gamma: Tensor | None
    beta: Tensor | None
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM
    affine: bool = True
    frozen: bool = False

    @classmethod
    def create(cls, channels: int, affine: bool = True, epsilon: float = DEFAULT_EPS,
               momentum: float = DEFAULT_MOMENTUM, dtype=np.float32) -> "NormState":
        if channels < 1:
            raise ShapeError("channels must be >= 1")
        if epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        gamma = beta = None
        if affine:
            gamma = Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
            beta = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        return cls(channels, gamma, beta,
                   np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype),
                   epsilon, momentum, affine)

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (a, b) with inference output a*x + b."""
        inv = 1.0 / np.sqrt(self.running_var + self.epsilon)
        if self.affine:
            g = self.gamma.data.reshape(-1)
            a = g * inv
            b = self.beta.data.reshape(-1) - g * self.running_mean * inv
        else:
            a = inv
            b = -self.running_mean * inv
        return a, b

    def parameters(self):
        if self.affine:
            yield "gamma", self.gamma
            yield "beta", self.beta

    def astype(self, dtype) -> None:
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        if self.affine:
            self.gamma.data = self.gamma.data.astype(dtype)
            self.beta.data = self.beta.data.astype(dtype)


@dataclass(frozen=True)
class GroupSpec:
    """Either a fixed group count G or a fixed number of input channels per group."""

    mode: str = "groups"
    value: int = 1

    def __post_init__(self):
        if self.mode not in ("groups", "channels_per_group"):
            raise ConfigError(f"unknown group mode {self.mode!r}")
        if self.value < 1:
            raise ConfigError("group spec value must be >= 1")

    @classmethod
    def fixed_groups(cls, g: int) -> "GroupSpec":
        return cls("groups", g)

    @classmethod
    def channels_per_group(cls, c: int) -> "GroupSpec":
        return cls("channels_per_group", c)

    def __str__(self) -> str:
        return f"G={self.value}" if self.mode == "groups" else f"C/G={self.value}"


def resolve_groups(spec: GroupSpec, c_in: int) -> int:
    """Group count for a layer with ``c_in`` inputs; divisibility is required."""
    if c_in < 1:
        raise ConfigError("c_in must be >= 1")
    if spec.mode == "groups":
        if c_in % spec.value:
            raise ConfigError(f"G={spec.value} does not divide {c_in} input channels")
        return spec.value
    if c_in % spec.value:
        raise ConfigError(f"{spec.value} channels per group do not divide {c_in} input channels")
    return c_in // spec.value


def resolve_groups_lenient(spec: GroupSpec, c_in: int) -> int:
    """Like :func:`resolve_groups` but accepts uneven partitions.

    A fixed G larger than ``c_in`` is capped at ``c_in``; channels-per-group
    rounds down to at least one group.
    """
    if spec.mode == "groups":
        return max(1, min(spec.value, c_in))
    return max(1, c_in // spec.value)


def group_bounds(c_in: int, groups: int) -> list[tuple[int, int]]:
    """Contiguous input ranges; sizes differ by at most one, larger first."""
    if not 1 <= groups <= c_in:
        raise ConfigError(f"cannot split {c_in} channels into {groups} groups")
    base, extra = divmod(c_in, groups)
    out, start = [], 0
    for g in range(groups):
        size = base + (1 if g < extra else 0)
        out.append((start, start + size))
        start += size
    return out


def update_running_stats(s: NormState, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
    m = s.momentum
    s.running_mean = ((1 - m) * s.running_mean + m * np.asarray(batch_mean).reshape(-1)).astype(s.running_mean.dtype)
    s.running_var = ((1 - m) * s.running_var + m * np.asarray(batch_var).reshape(-1)).astype(s.running_var.dtype)


def _check_channels(x: Tensor, s: NormState) -> None:
    if x.shape[1] != s.channels:
        raise ShapeError(f"norm state has {s.channels} channels, input has {x.shape[1]}")


def bn_forward_train(x: Tensor, s: NormState, standardized: list | None = None) -> Tensor:
    """Batch statistics over (n, h, w), affine, and a running-stat update.

    If ``standardized`` is a list, the pre-affine values are appended to it.
    """
    if s.frozen:
        raise StateError("bn_forward_train called on frozen (inference) statistics")
    _check_channels(x, s)
    n, c, h, w = x.shape
    count = n * h * w
    if count < 2:
        raise DegenerateStatisticsError("need at least two values per channel for batch statistics")
    xd = x.data
    mean = xd.mean(axis=(0, 2, 3), keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + s.epsilon)
    xhat = centered * inv
    if standardized is not None:
        standardized.append(xhat)
    update_running_stats(s, mean, var)

    if s.affine:
        gamma, beta = s.gamma.data, s.beta.data
        out = Tensor(xhat * gamma + beta)
        inputs = (x, s.gamma, s.beta)
    else:
        gamma = None
        out = Tensor(xhat)
        inputs = (x,)

    def bw(g):
        dxhat = g * gamma if gamma is not None else g
        sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (inv / count) * (count * dxhat - sum_d - xhat * sum_dx)
        if gamma is None:
            return (dx,)
        dgamma = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dbeta = g.sum(axis=(0, 2, 3), keepdims=True)
        return dx, dgamma, dbeta

    return record(out, inputs, bw)


def bn_forward_infer(x: Tensor, s: NormState) -> Tensor:
    """Normalize with running statistics; pure."""
    _check_channels(x, s)
    a, b = s.scale_shift()
    a = a.astype(x.dtype).reshape(1, -1, 1, 1)
    b = b.astype(x.dtype).reshape(1, -1, 1, 1)
    out = Tensor(x.data * a + b)
    if not s.affine:
        return record(out, (x,), lambda g: (g * a,))
    inv = (1.0 / np.sqrt(s.running_var + s.epsilon)).astype(x.dtype).reshape(1, -1, 1, 1)
    mean = s.running_mean.astype(x.dtype).reshape(1, -1, 1, 1)

    def bw(g):
        dgamma = (g * (x.data - mean) * inv).sum(axis=(0, 2, 3), keepdims=True)
        return g * a, dgamma, g.sum(axis=(0, 2, 3), keepdims=True)

    return record(out, (x, s.gamma, s.beta), bw)


def group_sum(t: Tensor, groups: int) -> Tensor:
    """Sum channel ``g*C + c`` over g, giving C channels."""
    n, gc, h, w = t.shape
    if groups < 1 or gc % groups:
        raise ShapeError(f"{gc} intermediate channels are not divisible by G={groups}")
    c = gc // groups
    out = Tensor(t.data.reshape(n, groups, c, h, w).sum(axis=1))

    def bw(g):
        return (np.broadcast_to(g[:, None], (n, groups, c, h, w)).reshape(n, gc, h, w),)

    return record(out, (t,), bw)


def fbn_forward_train(x_groups: Tensor, s: NormState, groups: int, standardized: list | None = None) -> Tensor:
    """Standardize each of the G*C intermediate channels, then sum the G groups."""
    if x_groups.shape[1] % groups:
        raise ShapeError(f"{x_groups.shape[1]} intermediate channels are not divisible by G={groups}")
    return group_sum(bn_forward_train(x_groups, s, standardized), groups)


def fbn_forward_infer(x_groups: Tensor, s: NormState, groups: int) -> Tensor:
    if x_groups.shape[1] % groups:
        raise ShapeError(f"{x_groups.shape[1]} intermediate channels are not divisible by G={groups}")
    return group_sum(bn_forward_infer(x_groups, s), groups)
