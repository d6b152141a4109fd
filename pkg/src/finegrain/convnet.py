"""Convolution family, the FBN-conv composite and auxiliary layer ops.

All ops take and return :class:`Tensor` and record themselves on the active
tape.  Weights follow the (c_out, c_in/groups, k, k) convention; vectors are
stored as (1, C, 1, 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import record
from .norm import NormState, fbn_forward_infer, fbn_forward_train, group_bounds
from .tensor import Rng, ShapeError, Tensor


def out_size(size: int, k: int, stride: int, pad: int) -> int:
    o = (size + 2 * pad - k) // stride + 1
    if o < 1:
        raise ShapeError(f"kernel {k} with padding {pad} does not fit input size {size}")
    return o


# -- raw convolution kernels on ndarrays ------------------------------------

def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _taps(oh: int, ow: int, stride: int, i: int, j: int):
    return (slice(None), slice(None),
            slice(i, i + stride * (oh - 1) + 1, stride),
            slice(j, j + stride * (ow - 1) + 1, stride))


def conv_forward_raw(x: np.ndarray, w: np.ndarray, stride: int, pad: int, groups: int):
    """Grouped cross-correlation.  Returns (output, cache for conv_backward_raw)."""
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin != cin_g * groups or cout % groups:
        raise ShapeError(f"weight {w.shape} with groups={groups} does not fit input {x.shape}")
    cout_g = cout // groups
    oh, ow = out_size(h, kh, stride, pad), out_size(wd, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{wd} with padding {pad}")
    w = w.astype(x.dtype, copy=False)

    if kh == kw == 1 and pad == 0:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        cols = np.ascontiguousarray(xs).reshape(n, groups, cin_g, oh * ow)
        out = np.matmul(w.reshape(groups, cout_g, cin_g), cols)
        return out.reshape(n, cout, oh, ow), ("pointwise", x.shape, cols, w, stride, pad, groups)

    xp = _pad(x, pad)
    if cin_g == 1 and cout_g == 1:
        out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += xp[_taps(oh, ow, stride, i, j)] * w[:, 0, i, j].reshape(1, -1, 1, 1)
        return out, ("depthwise", x.shape, xp, w, stride, pad, groups)

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = (win.reshape(n, groups, cin_g, oh, ow, kh, kw)
               .transpose(0, 1, 3, 4, 2, 5, 6)
               .reshape(n, groups, oh * ow, cin_g * kh * kw))
    wm = w.reshape(groups, cout_g, cin_g * kh * kw)
    out = np.matmul(cols, wm.transpose(0, 2, 1))
    out = out.transpose(0, 1, 3, 2).reshape(n, cout, oh, ow)
    return out, ("im2col", x.shape, cols, w, stride, pad, groups)


def conv_backward_raw(g: np.ndarray, cache):
    """Gradients (dx, dw) of conv_forward_raw given dL/d(out)."""
    kind, xshape, data, w, stride, pad, groups = cache
    n, cin, h, wd = xshape
    cout, cin_g, kh, kw = w.shape
    cout_g = cout // groups
    oh, ow = g.shape[2], g.shape[3]

    if kind == "pointwise":
        cols = data
        g4 = g.reshape(n, groups, cout_g, oh * ow)
        dw = np.matmul(g4, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(cout, cin_g, 1, 1)
        dcols = np.matmul(w.reshape(groups, cout_g, cin_g).transpose(0, 2, 1), g4).reshape(n, cin, oh, ow)
        if stride == 1:
            return dcols, dw
        dx = np.zeros(xshape, dtype=g.dtype)
        dx[:, :, ::stride, ::stride] = dcols
        return dx, dw

    dxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    if kind == "depthwise":
        xp = data
        dw = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                sl = _taps(oh, ow, stride, i, j)
                dw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
                dxp[sl] += g * w[:, 0, i, j].reshape(1, -1, 1, 1)
    else:
        cols = data
        g3 = g.reshape(n, groups, cout_g, oh * ow)
        dw = np.matmul(g3, cols).sum(axis=0).reshape(cout, cin_g, kh, kw)
        wm = w.reshape(groups, cout_g, cin_g * kh * kw)
        dcols = np.matmul(g3.transpose(0, 1, 3, 2), wm).reshape(n, groups, oh, ow, cin_g, kh, kw)
        for i in range(kh):
            for j in range(kw):
                tap = dcols[..., i, j].transpose(0, 1, 4, 2, 3).reshape(n, cin, oh, ow)
                dxp[_taps(oh, ow, stride, i, j)] += tap
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw


# -- parameters ---------------------------------------------------------------

@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        cout, cin_g, kh, kw = self.weight.shape
        if kh != kw or kh < 1:
            raise ShapeError(f"square kernels only, got {kh}x{kw}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ShapeError("stride >= 1, padding >= 0 and groups >= 1 required")
        if cout % self.groups:
            raise ShapeError(f"groups={self.groups} does not divide c_out={cout}")
        if self.bias is not None and self.bias.shape != (1, cout, 1, 1):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out={cout}")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


@dataclass
class FbnConvLayer:
    """Convolution whose partial sums over G input-channel groups are
    normalized separately and then added.

    ``weight`` has the full (c_out, c_in, k, k) shape; group g owns input
    channels ``bounds[g]``.  The norm state covers the G*c_out intermediate
    channels.
    """

    weight: Tensor
    norm: NormState
    groups: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        cout, cin = self.weight.shape[:2]
        if not 1 <= self.groups <= cin:
            raise ShapeError(f"G={self.groups} invalid for {cin} input channels")
        if self.norm.channels != self.groups * cout:
            raise ShapeError(f"norm covers {self.norm.channels} channels, expected G*c_out={self.groups * cout}")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def bounds(self) -> list[tuple[int, int]]:
        return group_bounds(self.c_in, self.groups)

    @property
    def even(self) -> bool:
        return self.c_in % self.groups == 0

    def expand_conv(self) -> ConvParams:
        """The equivalent grouped convolution producing G*c_out channels."""
        if not self.even:
            raise ShapeError(f"G={self.groups} does not divide c_in={self.c_in}; no single grouped conv")
        w = _to_grouped(self.weight.data, self.groups)
        return ConvParams(Tensor(w), None, self.stride, self.padding, self.groups)

    def parameters(self):
        yield "weight", self.weight
        for name, t in self.norm.parameters():
            yield f"norm.{name}", t


def _to_grouped(w: np.ndarray, groups: int) -> np.ndarray:
    cout, cin, kh, kw = w.shape
    cin_g = cin // groups
    return w.reshape(cout, groups, cin_g, kh, kw).transpose(1, 0, 2, 3, 4).reshape(groups * cout, cin_g, kh, kw)


def _from_grouped(wg: np.ndarray, groups: int) -> np.ndarray:
    gc, cin_g, kh, kw = wg.shape
    cout = gc // groups
    return wg.reshape(groups, cout, cin_g, kh, kw).transpose(1, 0, 2, 3, 4).reshape(cout, groups * cin_g, kh, kw)


# -- differentiable ops ---------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    out_data, cache = conv_forward_raw(x.data, weight.data, stride, padding, groups)
    if bias is not None:
        out_data = out_data + bias.data.astype(out_data.dtype, copy=False)
    out = Tensor(out_data)

    def bw(g):
        dx, dw = conv_backward_raw(g, cache)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3), keepdims=True)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, bw)


def conv(x: Tensor, p: ConvParams) -> Tensor:
    return conv2d(x, p.weight, p.bias, p.stride, p.padding, p.groups)


def depthwise_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    c = x.shape[1]
    if not (p.groups == c == p.c_out and p.weight.shape[1] == 1):
        raise ShapeError(f"depthwise conv needs groups = c_in = c_out = {c}")
    return conv(x, p)


def grouped_expand_conv(x: Tensor, weight: Tensor, groups: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-group partial convolutions, stacked group-major into G*c_out channels."""
    cout, cin = weight.shape[:2]
    if x.shape[1] != cin:
        raise ShapeError(f"weight expects {cin} input channels, got {x.shape[1]}")
    if cin % groups == 0:
        wg = _to_grouped(weight.data, groups)
        out_data, cache = conv_forward_raw(x.data, wg, stride, padding, groups)

        def bw(g):
            dx, dwg = conv_backward_raw(g, cache)
            return dx, _from_grouped(dwg, groups)

        return record(Tensor(out_data), (x, weight), bw)

    bounds = group_bounds(cin, groups)
    outs, caches = [], []
    for a, b in bounds:
        o, c = conv_forward_raw(np.ascontiguousarray(x.data[:, a:b]), weight.data[:, a:b], stride, padding, 1)
        outs.append(o)
        caches.append(c)
    out = Tensor(np.concatenate(outs, axis=1))

    def bw_uneven(g):
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(weight.data)
        for gi, ((a, b), c) in enumerate(zip(bounds, caches)):
            dxg, dwg = conv_backward_raw(np.ascontiguousarray(g[:, gi * cout:(gi + 1) * cout]), c)
            dx[:, a:b] = dxg
            dw[:, a:b] = dwg
        return dx, dw

    return record(out, (x, weight), bw_uneven)


def fbn_conv_forward(x: Tensor, layer: FbnConvLayer, mode: str = "train",
                     standardized: list | None = None) -> Tensor:
    """Expand into G*c_out partial sums, normalize each, sum over groups."""
    inter = grouped_expand_conv(x, layer.weight, layer.groups, layer.stride, layer.padding)
    if mode == "train":
        return fbn_forward_train(inter, layer.norm, layer.groups, standardized)
    if mode == "infer":
        return fbn_forward_infer(inter, layer.norm, layer.groups)
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype, copy=False))
    return record(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record(Tensor(s), (x,), lambda g: (g * s * (1 - s),))


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """x * gate with gate of shape (n, c, 1, 1)."""
    if gate.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ShapeError(f"gate {gate.shape} does not match {x.shape}")
    out = Tensor(x.data * gate.data)
    return record(out, (x, gate), lambda g: (g * gate.data, (g * x.data).sum(axis=(2, 3), keepdims=True)))


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))
    return record(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),))


def maxpool(x: Tensor, k: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    oh, ow = out_size(h, k, stride, padding), out_size(w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    flat = win.reshape(n, c, oh, ow, k * k)
    idx = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])

    def bw(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[_taps(oh, ow, stride, i, j)] += g * (idx == i * k + j)
        return (dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp,)

    return record(out, (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected layer on (n, c, 1, 1) inputs; weight is (out, in, 1, 1)."""
    n, c, h, w = x.shape
    if h != 1 or w != 1:
        raise ShapeError(f"linear expects (n, c, 1, 1) inputs, got {x.shape}")
    fout, fin = weight.shape[:2]
    if fin != c:
        raise ShapeError(f"linear weight expects {fin} features, got {c}")
    xm = x.data.reshape(n, c)
    wm = weight.data.reshape(fout, fin).astype(x.dtype, copy=False)
    y = xm @ wm.T
    if bias is not None:
        y = y + bias.data.reshape(1, fout)
    out = Tensor(y.reshape(n, fout, 1, 1))

    def bw(g):
        gm = g.reshape(n, fout)
        dx = (gm @ wm).reshape(n, c, 1, 1)
        dw = (gm.T @ xm).reshape(fout, fin, 1, 1)
        if bias is None:
            return dx, dw
        return dx, dw, gm.sum(axis=0).reshape(1, fout, 1, 1)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, bw)


def dropout(x: Tensor, rate: float, rng: Rng | None, mode: str = "train") -> Tensor:
    """Inverted dropout; identity in inference mode or at rate 0."""
    if mode != "train" or rate == 0:
        return x
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    return record(Tensor(x.data * keep), (x,), lambda g: (g * keep,))


@dataclass
class SEParams:
    w1: Tensor  # (hidden, c, 1, 1)
    b1: Tensor  # (1, hidden, 1, 1)
    w2: Tensor  # (c, hidden, 1, 1)
    b2: Tensor  # (1, c, 1, 1)

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def parameters(self):
        yield "fc1.weight", self.w1
        yield "fc1.bias", self.b1
        yield "fc2.weight", self.w2
        yield "fc2.bias", self.b2


def squeeze_excite(x: Tensor, p: SEParams) -> Tensor:
    """Channel gate: pool, c->hidden, ReLU, hidden->c, sigmoid, rescale."""
    s = global_avg_pool(x)
    s = relu(linear(s, p.w1, p.b1))
    gate = sigmoid(linear(s, p.w2, p.b2))
    return scale_channels(x, gate)
