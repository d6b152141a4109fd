"""Fold frozen BN/FBN statistics into convolution weights.

Sign convention: a fused layer computes ``conv(x, w') + bias``, so the stored
bias is the additive constant ``beta - gamma * mu / sqrt(var + eps)`` (summed
over groups for FBN), i.e. the negative of the subtracted offset.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .convnet import ConvParams, FbnConvLayer
from .layers import (BatchNorm, Conv, FbnConv, FusedConv, Layer, NetworkGraph, Residual,
                     Sequential, ShuffleUnit)
from .norm import NormState, StateError
from .tensor import Rng, ShapeError, Tensor


class FusionError(ValueError):
    pass


def _require_frozen(s: NormState, what: str) -> None:
    if not s.frozen:
        raise StateError(f"{what}: normalization statistics are in training mode; call eval() first")


def fold_bn_into_conv(conv: ConvParams, s: NormState, source: str = "") -> FusedConv:
    """w' = a*w per output channel and bias' = a*bias + b, where BN is a*y + b."""
    _require_frozen(s, source or "fold_bn_into_conv")
    if s.channels != conv.c_out:
        raise ShapeError(f"BN has {s.channels} channels, conv produces {conv.c_out}")
    dtype = conv.weight.dtype
    a, b = (v.astype(np.float64) for v in s.scale_shift())
    w = conv.weight.data.astype(np.float64) * a.reshape(-1, 1, 1, 1)
    bias = b.copy()
    if conv.bias is not None:
        bias += a * conv.bias.data.reshape(-1).astype(np.float64)
    params = ConvParams(Tensor(w.astype(dtype), requires_grad=True),
                        Tensor(bias.astype(dtype).reshape(1, -1, 1, 1), requires_grad=True),
                        conv.stride, conv.padding, conv.groups)
    kind = "depthwise+bn" if conv.groups > 1 and conv.groups == conv.c_in == conv.c_out else "conv+bn"
    return FusedConv(params, source, kind, 1)


def fold_fbn_into_conv(layer: FbnConvLayer, source: str = "") -> FusedConv:
    """Scale each group's weight block by its own statistics and place it at
    the group's input range; biases of the G groups add up."""
    s = layer.norm
    _require_frozen(s, source or "fold_fbn_into_conv")
    G, cout = layer.groups, layer.c_out
    dtype = layer.weight.dtype
    a, b = (v.astype(np.float64).reshape(G, cout) for v in s.scale_shift())
    w = layer.weight.data.astype(np.float64).copy()
    for g, (lo, hi) in enumerate(layer.bounds):
        w[:, lo:hi] *= a[g].reshape(-1, 1, 1, 1)
    bias = b.sum(axis=0)
    params = ConvParams(Tensor(w.astype(dtype), requires_grad=True),
                        Tensor(bias.astype(dtype).reshape(1, -1, 1, 1), requires_grad=True),
                        layer.stride, layer.padding, 1)
    return FusedConv(params, source, "fbn_conv", G)


def _fuse_layer(layer: Layer, path: str) -> Layer:
    if isinstance(layer, FbnConv):
        return fold_fbn_into_conv(layer.layer, path)
    if isinstance(layer, NetworkGraph):
        raise TypeError("use fuse_model for whole networks")
    if isinstance(layer, Sequential):
        return Sequential(_fuse_items(layer.layers, path + "."))
    if isinstance(layer, Residual):
        return Residual(_fuse_layer(layer.body, path + ".body"))
    if isinstance(layer, ShuffleUnit):
        left = _fuse_layer(layer.left, path + ".left") if layer.left is not None else None
        return ShuffleUnit(_fuse_layer(layer.right, path + ".right"), left)
    if isinstance(layer, BatchNorm):
        raise FusionError(f"unfusable node {path}: batch norm without a preceding convolution")
    return copy.deepcopy(layer)


def _fuse_items(items: list[tuple[str, Layer]], prefix: str) -> list[tuple[str, Layer]]:
    out = []
    i = 0
    while i < len(items):
        name, layer = items[i]
        path = prefix + name
        nxt = items[i + 1][1] if i + 1 < len(items) else None
        if isinstance(layer, Conv) and isinstance(nxt, BatchNorm):
            out.append((name, fold_bn_into_conv(layer.params, nxt.state, path)))
            i += 2
            continue
        out.append((name, _fuse_layer(layer, path)))
        i += 1
    return out


def fuse_model(net: NetworkGraph) -> NetworkGraph:
    """Fresh inference network with every conv+BN and FBN-conv replaced by a
    plain convolution with bias; the input network is not modified."""
    if net.mode != "infer":
        raise StateError("fuse_model needs a network in inference mode")
    fused = NetworkGraph(_fuse_items(net.layers, ""), {**net.metadata, "fused": True}, net.input_shape)
    fused.mode = "infer"
    return fused


def is_fused(net: Layer) -> bool:
    return not any(isinstance(l, (BatchNorm, FbnConv)) for _, l in net.walk())


@dataclass
class FusionReport:
    max_abs_diff: float
    per_layer_diffs: dict[str, float] = field(default_factory=dict)
    n_probes: int = 0
    seed: int = 0

    def to_text(self) -> str:
        lines = [f"probes={self.n_probes} seed={self.seed}"]
        lines += [f"layer={k} max_abs_diff={v:.6e}" for k, v in self.per_layer_diffs.items()]
        lines.append(f"max_abs_diff={self.max_abs_diff:.6e}")
        return "\n".join(lines)


def probe_inputs(shape, n_probes: int, seed: int, dtype=np.float32) -> Tensor:
    rng = Rng(seed)
    return Tensor(rng.normal((n_probes, *shape[1:]), dtype=dtype))


def verify_fusion(net: NetworkGraph, fused: NetworkGraph, n_probes: int = 4, seed: int = 0,
                  input_shape=None, dtype=np.float32) -> FusionReport:
    """Run both networks on the same seeded probes and compare every top-level
    layer output and the final output."""
    if net.mode != "infer" or fused.mode != "infer":
        raise StateError("verify_fusion needs both networks in inference mode")
    names_a = [n for n, _ in net.layers]
    names_b = [n for n, _ in fused.layers]
    if names_a != names_b:
        raise ShapeError(f"networks have different layer layouts: {names_a} vs {names_b}")
    shape = tuple(input_shape or net.input_shape)
    if net.layer_shapes(shape) != fused.layer_shapes(shape):
        raise ShapeError("networks produce different intermediate shapes")
    xa = xb = probe_inputs(shape, n_probes, seed, dtype)
    diffs = {}
    for (name, la), (_, lb) in zip(net.layers, fused.layers):
        xa = la.forward(xa, "infer")
        xb = lb.forward(xb, "infer")
        diffs[name] = float(np.max(np.abs(xa.data.astype(np.float64) - xb.data.astype(np.float64))))
    end = diffs[names_a[-1]] if names_a else 0.0
    return FusionReport(end, diffs, n_probes, seed)
