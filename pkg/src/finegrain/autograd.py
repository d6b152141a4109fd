"""Tape-based reverse-mode differentiation.

Operations call :func:`record` after computing their output.  When a
:class:`Tape` is active on the current thread and at least one input needs a
gradient, the call is appended to the tape together with a closure mapping the
output gradient to input gradients.  Outside a tape nothing is recorded, which
is how inference stays allocation-free.
"""
from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


class GradientError(RuntimeError):
    pass


@dataclass
class Node:
    """One recorded call.  The output is held weakly: the output tensor owns
    its node, and a strong back-reference would leave every graph in a
    cycle that only the cycle collector frees."""

    inputs: tuple
    output_ref: weakref.ref
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]

    @property
    def output(self):
        return self.output_ref()


@dataclass
class Tape:
    """Ordered record of differentiable calls; topological by construction."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def is_recording() -> bool:
    return current_tape() is not None


def record(out, inputs: Sequence, backward: Callable):
    """Attach ``out`` to the active tape if any input requires a gradient.

    ``backward`` receives dL/d(out) as an ndarray and returns one ndarray (or
    None) per input, in order.
    """
    tape = current_tape()
    if tape is None:
        return out
    if not any(getattr(t, "requires_grad", False) for t in inputs):
        return out
    out.requires_grad = True
    out._node = Node(tuple(inputs), weakref.ref(out), backward)
    tape.nodes.append(out._node)
    return out


class GradientMap(dict):
    """Gradients keyed by leaf-tensor name.

    Leaves without a name are keyed ``"<leaf:N>"`` in order of discovery.
    :meth:`of` looks a gradient up by tensor identity instead.
    """

    def __init__(self):
        super().__init__()
        self._by_id: dict[int, np.ndarray] = {}

    def of(self, tensor) -> np.ndarray:
        try:
            return self._by_id[id(tensor)]
        except KeyError:
            return np.zeros_like(tensor.data)


def backward(tape: Tape, loss) -> GradientMap:
    """Propagate d(loss)/d(loss)=1 back through ``tape``.

    Returns gradients for every leaf that requires a gradient and was reached
    (parameters and, if flagged, the network input).  Leaves not reached by
    the loss are absent from the map; :meth:`GradientMap.of` reports zeros.
    """
    if loss.data.size != 1:
        raise GradientError(f"loss must be a scalar, got shape {loss.data.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError(f"non-finite loss {float(loss.data.reshape(-1)[0])}")
    node = getattr(loss, "_node", None)
    if node is None or not any(n is node for n in tape.nodes):
        raise GradientError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, object] = {}
    for n in reversed(tape.nodes):
        out = n.output
        if out is None:
            continue
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = n.backward(g)
        for t, tg in zip(n.inputs, in_grads):
            if tg is None or not getattr(t, "requires_grad", False):
                continue
            if getattr(t, "_node", None) is None:
                leaves[id(t)] = t
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = tg

    out = GradientMap()
    unnamed = 0
    for key, t in leaves.items():
        g = grads.get(key, np.zeros_like(t.data))
        name = t.name
        if name is None:
            name = f"<leaf:{unnamed}>"
            unnamed += 1
        out[name] = g
        out._by_id[key] = g
    return out


def finite_diff_grad(loss_fn: Callable[[], float], param, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d(loss_fn())/d(param), element by element.

    ``param.data`` is perturbed in place and restored.  Use float64 tensors;
    single precision swamps the difference quotient with rounding.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    data = param.data
    grad = np.zeros(data.shape, dtype=np.float64)
    flat = data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn())
        flat[i] = orig - h
        down = float(loss_fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-n| / max(|a|+|n|, floor) over all elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
