"""Layer objects and the NetworkGraph container the fusion pass rewrites."""
from __future__ import annotations

import copy
import hashlib
from typing import Iterator

import numpy as np

from . import convnet as F
from .norm import NormState, bn_forward_infer, bn_forward_train
from .tensor import Rng, ShapeError, Tensor, add, channel_shuffle, concat_channels, slice_channels

Shape = tuple[int, int, int, int]


class Layer:
    kind = "layer"

    def forward(self, x: Tensor, mode: str) -> Tensor:
        raise NotImplementedError

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def own_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def own_norm_states(self) -> Iterator[tuple[str, NormState]]:
        return iter(())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.own_parameters():
            yield prefix + name, t
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_norm_states(self, prefix: str = "") -> Iterator[tuple[str, NormState]]:
        for name, s in self.own_norm_states():
            yield prefix + name, s
        for cname, child in self.children():
            yield from child.named_norm_states(f"{prefix}{cname}.")

    def walk(self, prefix: str = "") -> Iterator[tuple[str, "Layer"]]:
        for cname, child in self.children():
            path = f"{prefix}{cname}"
            yield path, child
            yield from child.walk(path + ".")

    def out_shape(self, s: Shape) -> Shape:
        return s

    def macs(self, s: Shape) -> int:
        """Multiply-accumulates for one pass on input shape ``s`` (batch ignored)."""
        return 0

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class Conv(Layer):
    kind = "conv"

    def __init__(self, params: F.ConvParams):
        self.params = params

    def forward(self, x, mode):
        return F.conv(x, self.params)

    def own_parameters(self):
        return self.params.parameters()

    def out_shape(self, s):
        p = self.params
        if s[1] != p.c_in:
            raise ShapeError(f"conv expects {p.c_in} channels, got {s[1]}")
        return (s[0], p.c_out, F.out_size(s[2], p.kernel, p.stride, p.padding),
                F.out_size(s[3], p.kernel, p.stride, p.padding))

    def macs(self, s):
        o = self.out_shape(s)
        p = self.params
        return p.c_out * (p.c_in // p.groups) * p.kernel ** 2 * o[2] * o[3]

    @property
    def depthwise(self) -> bool:
        p = self.params
        return p.groups > 1 and p.groups == p.c_in == p.c_out

    def __repr__(self):
        p = self.params
        return f"Conv({p.c_in}->{p.c_out}, k={p.kernel}, s={p.stride}, g={p.groups}, bias={p.bias is not None})"


class FusedConv(Conv):
    """Standard convolution with bias produced by folding a normalization."""

    kind = "fused_conv"

    def __init__(self, params: F.ConvParams, source: str, source_kind: str, groups: int = 1):
        super().__init__(params)
        self.source = source
        self.source_kind = source_kind
        self.source_groups = groups

    def __repr__(self):
        return f"Fused{super().__repr__()} <- {self.source_kind}:{self.source} (G={self.source_groups})"


class BatchNorm(Layer):
    kind = "bn"

    def __init__(self, state: NormState):
        self.state = state

    def forward(self, x, mode):
        if mode == "train":
            return bn_forward_train(x, self.state)
        return bn_forward_infer(x, self.state)

    def own_parameters(self):
        return self.state.parameters()

    def own_norm_states(self):
        yield "", self.state

    def __repr__(self):
        return f"BatchNorm({self.state.channels})"


class FbnConv(Layer):
    kind = "fbn_conv"

    def __init__(self, layer: F.FbnConvLayer):
        self.layer = layer

    def forward(self, x, mode):
        return F.fbn_conv_forward(x, self.layer, mode)

    def own_parameters(self):
        return self.layer.parameters()

    def own_norm_states(self):
        yield "norm", self.layer.norm

    def out_shape(self, s):
        l = self.layer
        if s[1] != l.c_in:
            raise ShapeError(f"FBN conv expects {l.c_in} channels, got {s[1]}")
        return (s[0], l.c_out, F.out_size(s[2], l.kernel, l.stride, l.padding),
                F.out_size(s[3], l.kernel, l.stride, l.padding))

    def macs(self, s):
        o = self.out_shape(s)
        l = self.layer
        return l.c_out * l.c_in * l.kernel ** 2 * o[2] * o[3]

    def __repr__(self):
        l = self.layer
        return f"FbnConv({l.c_in}->{l.c_out}, k={l.kernel}, s={l.stride}, G={l.groups})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode):
        return F.relu(x)


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, k: int = 3, stride: int = 2, padding: int = 1):
        self.k, self.stride, self.padding = k, stride, padding

    def forward(self, x, mode):
        return F.maxpool(x, self.k, self.stride, self.padding)

    def out_shape(self, s):
        return (s[0], s[1], F.out_size(s[2], self.k, self.stride, self.padding),
                F.out_size(s[3], self.k, self.stride, self.padding))


class GlobalAvgPool(Layer):
    kind = "global_pool"

    def forward(self, x, mode):
        return F.global_avg_pool(x)

    def out_shape(self, s):
        return (s[0], s[1], 1, 1)


class Linear(Layer):
    kind = "linear"

    def __init__(self, weight: Tensor, bias: Tensor | None):
        self.weight = weight
        self.bias = bias

    def forward(self, x, mode):
        return F.linear(x, self.weight, self.bias)

    def own_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def out_shape(self, s):
        if s[1:] != (self.weight.shape[1], 1, 1):
            raise ShapeError(f"linear expects ({self.weight.shape[1]}, 1, 1) features, got {s[1:]}")
        return (s[0], self.weight.shape[0], 1, 1)

    def macs(self, s):
        return self.weight.shape[0] * self.weight.shape[1]

    def __repr__(self):
        return f"Linear({self.weight.shape[1]}->{self.weight.shape[0]})"


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float, rng: Rng):
        self.rate = rate
        self.rng = rng

    def forward(self, x, mode):
        return F.dropout(x, self.rate, self.rng, mode)

    def __repr__(self):
        return f"Dropout({self.rate})"


class SqueezeExcite(Layer):
    kind = "se"

    def __init__(self, params: F.SEParams):
        self.params = params

    def forward(self, x, mode):
        return F.squeeze_excite(x, self.params)

    def own_parameters(self):
        return self.params.parameters()

    def macs(self, s):
        return 2 * s[1] * self.params.hidden

    def __repr__(self):
        return f"SqueezeExcite(hidden={self.params.hidden})"


class ChannelShuffle(Layer):
    kind = "shuffle"

    def __init__(self, groups: int = 2):
        self.groups = groups

    def forward(self, x, mode):
        return channel_shuffle(x, self.groups)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers: list[tuple[str, Layer]]):
        names = [n for n, _ in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        self.layers = list(layers)

    def forward(self, x, mode):
        for _, layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def children(self):
        return self.layers

    def out_shape(self, s):
        for _, layer in self.layers:
            s = layer.out_shape(s)
        return s

    def macs(self, s):
        total = 0
        for _, layer in self.layers:
            total += layer.macs(s)
            s = layer.out_shape(s)
        return total

    def __getitem__(self, name: str) -> Layer:
        for n, layer in self.layers:
            if n == name:
                return layer
        raise KeyError(name)

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return f"Sequential({', '.join(n for n, _ in self.layers)})"


class Residual(Layer):
    """x + body(x); the body must preserve shape."""

    kind = "residual"

    def __init__(self, body: Sequential):
        self.body = body

    def forward(self, x, mode):
        return add(x, self.body.forward(x, mode))

    def children(self):
        return [("body", self.body)]

    def out_shape(self, s):
        o = self.body.out_shape(s)
        if o != s:
            raise ShapeError(f"residual body changes shape {s} -> {o}")
        return s

    def macs(self, s):
        return self.body.macs(s)


class ShuffleUnit(Layer):
    """Channel-split unit: stride 1 splits channels in half and transforms one
    half; stride 2 runs two branches on the full input.  Outputs are
    concatenated and shuffled with two groups."""

    kind = "shuffle_unit"

    def __init__(self, right: Sequential, left: Sequential | None = None):
        self.left = left
        self.right = right

    def forward(self, x, mode):
        if self.left is None:
            half = x.shape[1] // 2
            a = slice_channels(x, 0, half)
            b = self.right.forward(slice_channels(x, half, x.shape[1]), mode)
        else:
            a = self.left.forward(x, mode)
            b = self.right.forward(x, mode)
        return channel_shuffle(concat_channels(a, b), 2)

    def children(self):
        out = [("right", self.right)]
        if self.left is not None:
            out.insert(0, ("left", self.left))
        return out

    def _branch_shapes(self, s):
        if self.left is None:
            half = s[1] // 2
            a = (s[0], half, s[2], s[3])
            b_in = (s[0], s[1] - half, s[2], s[3])
            return a, b_in, b_in
        return self.left.out_shape(s), s, s

    def out_shape(self, s):
        a, b_in, _ = self._branch_shapes(s)
        b = self.right.out_shape(b_in)
        return (s[0], a[1] + b[1], b[2], b[3])

    def macs(self, s):
        _, b_in, _ = self._branch_shapes(s)
        total = self.right.macs(b_in)
        if self.left is not None:
            total += self.left.macs(s)
        return total


class NetworkGraph(Sequential):
    """Top-level ordered layers plus a train/infer mode flag and metadata."""

    kind = "network"

    def __init__(self, layers, metadata: dict | None = None, input_shape: Shape = (1, 3, 224, 224)):
        super().__init__(layers)
        self.metadata = dict(metadata or {})
        self.input_shape = tuple(input_shape)
        self.mode = "train"
        self.assign_names()

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x, self.mode)

    def forward(self, x, mode=None):
        return super().forward(x, mode or self.mode)

    def assign_names(self) -> None:
        for name, t in self.named_parameters():
            t.name = name

    def train(self) -> "NetworkGraph":
        self.mode = "train"
        for _, s in self.named_norm_states():
            s.frozen = False
        return self

    def eval(self) -> "NetworkGraph":
        self.mode = "infer"
        for _, s in self.named_norm_states():
            s.frozen = True
        return self

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.parameters()))

    def layer_shapes(self, s: Shape | None = None) -> list[tuple[str, Shape]]:
        s = tuple(s or self.input_shape)
        out = []
        for name, layer in self.layers:
            s = layer.out_shape(s)
            out.append((name, s))
        return out

    def astype(self, dtype) -> "NetworkGraph":
        for _, t in self.named_parameters():
            t.data = t.data.astype(dtype)
        for _, s in self.named_norm_states():
            s.astype(dtype)
        return self

    def clone(self) -> "NetworkGraph":
        return copy.deepcopy(self)

    def checksum(self) -> str:
        """Digest of all parameters and running statistics."""
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        for name, s in self.named_norm_states():
            h.update(name.encode())
            h.update(np.ascontiguousarray(s.running_mean).tobytes())
            h.update(np.ascontiguousarray(s.running_var).tobytes())
        return h.hexdigest()
