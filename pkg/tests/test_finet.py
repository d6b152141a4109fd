import numpy as np
import pytest

from finegrain.finet import BlockConfig, NormOptions, build_block, build_finet, count_flops, count_params, fc_params, group_counts
from finegrain.fusion import fuse_model
from finegrain.layers import Conv, FbnConv, Linear, MaxPool, Residual, Sequential, SqueezeExcite
from finegrain.norm import GroupSpec
from finegrain.tensor import Rng, Tensor

from oracles import count_conv_macs


def test_top_level_layout():
    net = build_finet("small")
    names = [n for n, _ in net.layers]
    assert names == ["conv1", "maxpool", "stage2", "stage3", "stage4", "conv5", "pool",
                     "drop1", "fc1", "relu", "drop2", "fc2"]
    assert [len(net[f"stage{i}"].layers) for i in (2, 3, 4)] == [4, 8, 4]
    cifar = build_finet("small", cifar_adapted=True, num_classes=10)
    assert "maxpool" not in [n for n, _ in cifar.layers]
    assert cifar.layer_shapes((1, 3, 32, 32))[-1][1] == (1, 10, 1, 1)


@pytest.mark.parametrize("variant,size,shapes", [
    ("small", 224, {"conv1": (1, 24, 112, 112), "maxpool": (1, 24, 56, 56), "stage2": (1, 30, 28, 28),
                    "stage3": (1, 60, 14, 14), "stage4": (1, 120, 7, 7), "conv5": (1, 1024, 7, 7)}),
    ("large", 32, {"conv1": (1, 24, 32, 32), "stage2": (1, 100, 16, 16), "stage3": (1, 200, 8, 8),
                   "stage4": (1, 400, 4, 4)}),
])
def test_stage_shapes(variant, size, shapes):
    net = build_finet(variant, cifar_adapted=(size == 32))
    got = dict(net.layer_shapes((1, 3, size, size)))
    for k, v in shapes.items():
        assert got[k] == v


def test_flops_equal_loop_count_over_fused_graph():
    net = build_finet("small", GroupSpec.fixed_groups(2), use_se=True, cifar_adapted=True, num_classes=10)
    fused = fuse_model(net.clone().eval())
    total = 0

    def run(layer, x):
        # residual bodies see the block input; everything else is sequential
        nonlocal total
        if isinstance(layer, Sequential):
            for _, child in layer.layers:
                x = run(child, x)
            return x
        if isinstance(layer, Residual):
            run(layer.body, x)
            return layer.forward(x, "infer")
        y = layer.forward(x, "infer")
        if isinstance(layer, Conv):
            p = layer.params
            total += count_conv_macs(p.c_in, p.c_out, p.kernel, p.groups, y.shape[2], y.shape[3])
        elif isinstance(layer, Linear):
            total += layer.weight.shape[0] * layer.weight.shape[1]
        elif isinstance(layer, SqueezeExcite):
            total += 2 * layer.params.hidden * x.shape[1]
        return y

    run(fused, Tensor(np.zeros((1, 3, 32, 32), np.float32)))
    assert count_flops(net, (1, 3, 32, 32)) == total


def test_params_count_every_tensor_once():
    net = build_finet("small", use_se=True)
    names = [n for n, _ in net.named_parameters()]
    assert len(names) == len(set(names))
    assert count_params(net) == sum(t.data.size for _, t in net.named_parameters())


def test_fc_params():
    net = build_finet("small")
    assert fc_params(net) == 1024 * 1024 + 1024 + 1024 * 1000 + 1000


def test_channels_per_group_resolves_per_layer():
    net = build_finet("large", GroupSpec.channels_per_group(20))
    g = group_counts(net)
    assert g and all(v >= 1 for v in g.values())
    assert len(set(g.values())) > 1


def test_uneven_groups_build_and_run():
    net = build_finet("small", GroupSpec.fixed_groups(8), cifar_adapted=True, num_classes=10)
    y = net(Tensor(Rng(0).normal((2, 3, 32, 32))))
    assert y.shape == (2, 10, 1, 1) and np.all(np.isfinite(y.data))


def test_block_config_validation():
    with pytest.raises(ValueError):
        BlockConfig(24, 30, 3, GroupSpec(), False)


def test_shuffle_style_block_halves_channels():
    block = build_block(BlockConfig(30, 30, 1, GroupSpec.fixed_groups(1), False), Rng(0), style="shuffle")
    assert block.out_shape((1, 30, 8, 8)) == (1, 30, 8, 8)


def test_build_is_seeded():
    a = build_finet("small", seed=3, cifar_adapted=True, num_classes=10)
    b = build_finet("small", seed=3, cifar_adapted=True, num_classes=10)
    c = build_finet("small", seed=4, cifar_adapted=True, num_classes=10)
    assert a.checksum() == b.checksum() != c.checksum()


def test_se_present_only_when_enabled():
    assert not any(isinstance(l, SqueezeExcite) for _, l in build_finet("small").walk())
    se = [p for p, l in build_finet("small", use_se=True).walk() if isinstance(l, SqueezeExcite)]
    assert len(se) == 16
    assert all(l.params.hidden == 200 for _, l in build_finet("small", use_se=True).walk()
               if isinstance(l, SqueezeExcite))
    assert any(isinstance(l, FbnConv) for _, l in build_finet("small").walk())
    assert isinstance(build_finet("small")["maxpool"], MaxPool)


def _bn_by_hand(y, s):
    a = s.gamma.data.reshape(1, -1, 1, 1) / np.sqrt(s.running_var.reshape(1, -1, 1, 1) + s.epsilon)
    return a * (y - s.running_mean.reshape(1, -1, 1, 1)) + s.beta.data.reshape(1, -1, 1, 1)


def _transform_by_hand(body, x):
    """conv -> BN -> ReLU -> depthwise -> BN -> conv -> BN -> ReLU, from raw weights."""
    from oracles import conv_loops
    pw1, dw, bn, pw2 = body["pw1"].layer, body["dw"].params, body["bn"].state, body["pw2"].layer
    h = np.maximum(_bn_by_hand(conv_loops(x, pw1.weight.data), pw1.norm), 0)
    h = _bn_by_hand(conv_loops(h, dw.weight.data, None, dw.stride, dw.padding, dw.groups), bn)
    return np.maximum(_bn_by_hand(conv_loops(h, pw2.weight.data), pw2.norm), 0)


def _randomize_stats(block, seed):
    rng = Rng(seed)
    for _, s in block.named_norm_states():
        s.gamma.data = rng.uniform(s.gamma.shape, 0.5, 1.5, dtype=np.float64)
        s.beta.data = rng.normal(s.beta.shape, 0, 0.2, dtype=np.float64)
        s.running_mean = rng.normal(s.running_mean.shape, 0, 0.2, dtype=np.float64)
        s.running_var = rng.uniform(s.running_var.shape, 0.5, 1.5, dtype=np.float64)


@pytest.mark.parametrize("stride,cin,cout", [(1, 12, 12), (2, 6, 12)])
def test_residual_block_matches_composition(stride, cin, cout):
    block = build_block(BlockConfig(cin, cout, stride, GroupSpec.fixed_groups(1), False), Rng(stride),
                        norm=NormOptions(dtype=np.float64))
    _randomize_stats(block, 9)
    x = Rng(10).normal((2, cin, 6, 6), dtype=np.float64)
    got = block.forward(Tensor(x), "infer").data
    body = block.body if stride == 1 else block
    ref = _transform_by_hand(body, x) + (x if stride == 1 else 0)
    assert got.shape == (2, cout, 6 // stride, 6 // stride)
    assert np.max(np.abs(got - ref)) <= 1e-6


def test_shuffle_block_matches_composition():
    block = build_block(BlockConfig(12, 12, 1, GroupSpec.fixed_groups(1), False), Rng(3), style="shuffle",
                        norm=NormOptions(dtype=np.float64))
    _randomize_stats(block, 11)
    x = Rng(12).normal((2, 12, 5, 5), dtype=np.float64)
    got = block.forward(Tensor(x), "infer").data
    both = np.concatenate([x[:, :6], _transform_by_hand(block.right, x[:, 6:])], axis=1)
    ref = np.empty_like(both)
    for k in range(12):
        ref[:, (k % 2) * 6 + k // 2] = both[:, k]
    assert np.max(np.abs(got - ref)) <= 1e-6
