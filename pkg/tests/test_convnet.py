import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from finegrain.convnet import (
    ConvParams, conv2d, depthwise_conv2d, dropout, global_avg_pool, grouped_expand_conv, linear,
    maxpool, out_size, relu, sigmoid,
)
from finegrain.norm import group_sum
from finegrain.tensor import Rng, ShapeError, Tensor, tensor_create

from oracles import conv_loops, maxpool_loops


def test_frozen_conv_values():
    x = Tensor((np.arange(18.0) / 10).reshape(1, 2, 3, 3))
    w = Tensor((np.arange(16.0) / 4 - 2).reshape(2, 2, 2, 2))
    b = Tensor(np.array([0.5, -0.5]).reshape(1, 2, 1, 1))
    assert np.allclose(conv2d(x, w, b).data, [[[[-3.2, -4.1], [-5.9, -6.8]], [[6.2, 6.9], [8.3, 9.0]]]])
    assert np.allclose(conv2d(x, w, None, stride=2, padding=1).data,
                       [[[[-0.225, -1.175], [-2.55, -7.3]], [[1.575, 3.625], [4.65, 9.5]]]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.sampled_from([1, 2, 3]),
       st.integers(1, 2), st.integers(0, 1), st.integers(3, 7), st.integers(0, 9999))
def test_conv_matches_loops(n, groups, per_group, k, stride, pad, size, seed):
    rng = Rng(seed)
    cin = groups * per_group
    cout = groups * 2
    if size + 2 * pad < k:
        return
    x = rng.normal((n, cin, size, size), dtype=np.float64)
    w = rng.normal((cout, per_group, k, k), dtype=np.float64)
    b = rng.normal((cout,), dtype=np.float64)
    y = conv2d(Tensor(x), Tensor(w), Tensor(b.reshape(1, -1, 1, 1)), stride, pad, groups)
    assert np.allclose(y.data, conv_loops(x, w, b, stride, pad, groups), atol=1e-10)


def test_depthwise_matches_loops(rng):
    x = rng.normal((2, 5, 6, 6), dtype=np.float64)
    w = rng.normal((5, 1, 3, 3), dtype=np.float64)
    y = depthwise_conv2d(Tensor(x), ConvParams(Tensor(w), None, 2, 1, 5))
    assert np.allclose(y.data, conv_loops(x, w, None, 2, 1, 5), atol=1e-10)


def test_depthwise_rejects_dense_weights(rng):
    p = ConvParams(Tensor(rng.normal((4, 4, 3, 3))), None, 1, 1, 1)
    with pytest.raises(ShapeError):
        depthwise_conv2d(tensor_create((1, 4, 5, 5)), p)


def test_out_size():
    assert out_size(224, 3, 2, 1) == 112
    assert out_size(7, 1, 1, 0) == 7
    with pytest.raises(ShapeError):
        out_size(1, 3, 1, 0)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(1, 2), st.sampled_from([1, 3]), st.integers(0, 9999))
def test_expand_then_sum_is_plain_conv(groups, stride, k, seed):
    rng = Rng(seed)
    x = Tensor(rng.normal((2, 8, 6, 6), dtype=np.float64))
    w = Tensor(rng.normal((3, 8, k, k), dtype=np.float64))
    inter = grouped_expand_conv(x, w, groups, stride, k // 2)
    assert inter.shape[1] == 3 * groups
    assert np.allclose(group_sum(inter, groups).data, conv2d(x, w, None, stride, k // 2).data, atol=1e-10)


def test_expand_uneven_groups_match_loops(rng):
    x = rng.normal((1, 7, 4, 4), dtype=np.float64)
    w = rng.normal((2, 7, 1, 1), dtype=np.float64)
    inter = grouped_expand_conv(Tensor(x), Tensor(w), 3)
    for g, (lo, hi) in enumerate([(0, 3), (3, 5), (5, 7)]):
        part = conv_loops(x[:, lo:hi], w[:, lo:hi])
        assert np.allclose(inter.data[:, 2 * g:2 * g + 2], part, atol=1e-12)


def test_maxpool_matches_loops(rng):
    x = rng.normal((2, 3, 7, 8), dtype=np.float64)
    assert np.array_equal(maxpool(Tensor(x)).data, maxpool_loops(x))


def test_maxpool_stem_shape():
    assert maxpool(tensor_create((1, 2, 112, 112))).shape == (1, 2, 56, 56)


def test_linear_requires_pooled_input(rng):
    w = Tensor(rng.normal((4, 3, 1, 1)))
    with pytest.raises(ShapeError):
        linear(tensor_create((1, 3, 2, 2)), w)
    y = linear(Tensor(np.ones((2, 3, 1, 1), np.float32)), w)
    assert np.allclose(y.data[:, :, 0, 0], np.tile(w.data.sum(axis=1)[:, 0, 0], (2, 1)))


def test_relu_sigmoid_pool_values():
    x = Tensor(np.array([-2.0, 0.0, 3.0, 1.0]).reshape(1, 1, 2, 2))
    assert relu(x).data.ravel().tolist() == [0.0, 0.0, 3.0, 1.0]
    assert sigmoid(x).data.ravel()[1] == 0.5
    assert global_avg_pool(x).data.item() == 0.5


def test_dropout_scaling_and_infer_identity():
    x = Tensor(np.ones((1, 1000, 1, 1)))
    y = dropout(x, 0.2, Rng(0), "train")
    kept = y.data != 0
    assert np.allclose(y.data[kept], 1.25)
    assert 0.15 < 1 - kept.mean() < 0.25
    assert dropout(x, 0.2, Rng(0), "infer") is x
