"""Finet builders and FLOP / parameter accounting.

Default block ("residual" style): two 1x1 FBN convolutions around a 3x3
depthwise convolution at full stage width, with an identity shortcut in
stride-1 blocks and no shortcut in stride-2 blocks.  This is the layout whose
parameter and FLOP totals line up with the published Small/Large figures.
The channel-split ShuffleNetV2 unit with FBN pointwise convs is available as
``style="shuffle"``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .convnet import ConvParams, FbnConvLayer, SEParams
from .fusion import fuse_model, is_fused
from .layers import (BatchNorm, Conv, Dropout, FbnConv, GlobalAvgPool, Layer, Linear, MaxPool,
                     NetworkGraph, ReLU, Residual, Sequential, ShuffleUnit, SqueezeExcite)
from .norm import DEFAULT_EPS, DEFAULT_MOMENTUM, GroupSpec, NormState, resolve_groups_lenient
from .tensor import Rng, Tensor

STAGE_CHANNELS = {"small": (30, 60, 120), "large": (100, 200, 400)}
STAGE_REPEATS = (3, 7, 3)
STEM_CHANNELS = 24
HEAD_CHANNELS = 1024
SE_HIDDEN = 200
DROPOUT = 0.2


@dataclass
class NormOptions:
    affine: bool = True
    epsilon: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM
    dtype: type = np.float32


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    stride: int = 1
    group_spec: GroupSpec = field(default_factory=GroupSpec)
    use_se: bool = False
    se_hidden: int = SE_HIDDEN

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.stride == 1 and self.in_channels != self.out_channels:
            raise ValueError("stride-1 blocks keep the channel count")


class _Init:
    """Seeded weight factory shared by one build."""

    def __init__(self, rng: Rng, norm: NormOptions):
        self.rng = rng
        self.norm = norm

    def he(self, shape, fan_in):
        return Tensor(self.rng.normal(shape, 0.0, np.sqrt(2.0 / fan_in), dtype=self.norm.dtype), requires_grad=True)

    def normal(self, shape, std):
        return Tensor(self.rng.normal(shape, 0.0, std, dtype=self.norm.dtype), requires_grad=True)

    def zeros(self, c):
        return Tensor(np.zeros((1, c, 1, 1), dtype=self.norm.dtype), requires_grad=True)

    def norm_state(self, c):
        o = self.norm
        return NormState.create(c, o.affine, o.epsilon, o.momentum, o.dtype)

    def conv(self, cin, cout, k, stride=1, groups=1):
        w = self.he((cout, cin // groups, k, k), (cin // groups) * k * k)
        return Conv(ConvParams(w, None, stride, k // 2, groups))

    def depthwise(self, c, stride):
        return self.conv(c, c, 3, stride, groups=c)

    def fbn_conv(self, cin, cout, spec: GroupSpec, k=1, stride=1):
        g = resolve_groups_lenient(spec, cin)
        w = self.he((cout, cin, k, k), cin * k * k)
        return FbnConv(FbnConvLayer(w, self.norm_state(g * cout), g, stride, k // 2))

    def linear(self, cin, cout, std=None):
        w = self.he((cout, cin, 1, 1), cin) if std is None else self.normal((cout, cin, 1, 1), std)
        return Linear(w, self.zeros(cout))

    def se(self, c, hidden):
        return SqueezeExcite(SEParams(self.he((hidden, c, 1, 1), c), self.zeros(hidden),
                                      self.normal((c, hidden, 1, 1), 0.01), self.zeros(c)))


def _transform(init: _Init, cin: int, mid: int, cout: int, stride: int, cfg: BlockConfig) -> Sequential:
    """1x1 FBN conv + ReLU -> 3x3 depthwise + BN -> 1x1 FBN conv + ReLU (-> SE)."""
    layers = [
        ("pw1", init.fbn_conv(cin, mid, cfg.group_spec)),
        ("relu1", ReLU()),
        ("dw", init.depthwise(mid, stride)),
        ("bn", BatchNorm(init.norm_state(mid))),
        ("pw2", init.fbn_conv(mid, cout, cfg.group_spec)),
        ("relu2", ReLU()),
    ]
    if cfg.use_se:
        layers.append(("se", init.se(cout, cfg.se_hidden)))
    return Sequential(layers)


def build_block(cfg: BlockConfig, rng: Rng | None = None, style: str = "residual",
                norm: NormOptions | None = None) -> Layer:
    init = _Init(rng or Rng(0), norm or NormOptions())
    cin, cout, s = cfg.in_channels, cfg.out_channels, cfg.stride
    if style == "residual":
        body = _transform(init, cin, cout, cout, s, cfg)
        return Residual(body) if s == 1 else body
    if style == "shuffle":
        if s == 1:
            b = cin - cin // 2
            return ShuffleUnit(_transform(init, b, b, b, 1, cfg))
        left_out = cout // 2
        right_out = cout - left_out
        left = Sequential([
            ("dw", init.depthwise(cin, 2)),
            ("bn", BatchNorm(init.norm_state(cin))),
            ("pw", init.fbn_conv(cin, left_out, cfg.group_spec)),
            ("relu", ReLU()),
        ])
        return ShuffleUnit(_transform(init, cin, right_out, right_out, 2, cfg), left)
    raise ValueError(f"unknown block style {style!r}")


def build_finet(variant: str = "small", group_spec: GroupSpec | None = None, use_se: bool = False,
                cifar_adapted: bool = False, num_classes: int = 1000, seed: int = 0,
                style: str = "residual", norm: NormOptions | None = None) -> NetworkGraph:
    if variant not in STAGE_CHANNELS:
        raise ValueError(f"variant must be one of {sorted(STAGE_CHANNELS)}")
    group_spec = group_spec or GroupSpec()
    norm = norm or NormOptions()
    rng = Rng(seed)
    init = _Init(rng, norm)

    layers: list[tuple[str, Layer]] = [
        ("conv1", Sequential([
            ("conv", init.conv(3, STEM_CHANNELS, 3, stride=1 if cifar_adapted else 2)),
            ("bn", BatchNorm(init.norm_state(STEM_CHANNELS))),
            ("relu", ReLU()),
        ])),
    ]
    if not cifar_adapted:
        layers.append(("maxpool", MaxPool(3, 2, 1)))

    cin = STEM_CHANNELS
    for i, (c, reps) in enumerate(zip(STAGE_CHANNELS[variant], STAGE_REPEATS)):
        blocks = []
        for j in range(reps + 1):
            cfg = BlockConfig(cin, c, 2 if j == 0 else 1, group_spec, use_se)
            blocks.append((str(j), build_block(cfg, rng, style, norm)))
            cin = c
        layers.append((f"stage{i + 2}", Sequential(blocks)))

    layers += [
        ("conv5", Sequential([
            ("conv", init.conv(cin, HEAD_CHANNELS, 1)),
            ("bn", BatchNorm(init.norm_state(HEAD_CHANNELS))),
            ("relu", ReLU()),
        ])),
        ("pool", GlobalAvgPool()),
        ("drop1", Dropout(DROPOUT, rng.spawn(1))),
        ("fc1", init.linear(HEAD_CHANNELS, HEAD_CHANNELS)),
        ("relu", ReLU()),
        ("drop2", Dropout(DROPOUT, rng.spawn(2))),
        ("fc2", init.linear(HEAD_CHANNELS, num_classes, std=0.01)),
    ]
    meta = {"variant": variant, "groups": str(group_spec), "group_mode": group_spec.mode,
            "group_value": group_spec.value, "use_se": use_se,
            "cifar_adapted": cifar_adapted, "style": style, "num_classes": num_classes,
            "affine": norm.affine}
    size = 32 if cifar_adapted else 224
    return NetworkGraph(layers, meta, (1, 3, size, size))


def count_flops(net: NetworkGraph, input_shape=None) -> int:
    """Multiply-accumulates per image of the fused inference network."""
    shape = tuple(input_shape or net.input_shape)
    shape = (1, *shape[1:])
    if not is_fused(net):
        probe = net.clone().eval()
        net = fuse_model(probe)
    return int(net.macs(shape))


def count_params(net: NetworkGraph) -> int:
    """Trainable parameters of the network as built (affine terms included)."""
    return net.num_parameters()


def fc_params(net: NetworkGraph) -> int:
    return sum(t.data.size for name, t in net.named_parameters() if name.startswith(("fc1.", "fc2.")))


def group_counts(net: NetworkGraph) -> dict[str, int]:
    """Resolved G of every FBN convolution, keyed by path."""
    return {path: layer.layer.groups for path, layer in net.walk() if isinstance(layer, FbnConv)}


def describe(net: NetworkGraph, input_shape=None) -> str:
    m = net.metadata
    lines = [f"variant={m.get('variant')} groups={m.get('groups')} se={m.get('use_se')} "
             f"cifar={m.get('cifar_adapted')} style={m.get('style')}"]
    shape = tuple(input_shape or net.input_shape)
    lines.append(f"input shape={shape}")
    for name, s in net.layer_shapes(shape):
        lines.append(f"{name} shape={s}")
    lines.append(f"flops={count_flops(net, shape)}")
    lines.append(f"params={count_params(net)}")
    return "\n".join(lines)
