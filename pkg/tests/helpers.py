import numpy as np

from finegrain.convnet import ConvParams, FbnConvLayer
from finegrain.norm import NormState
from finegrain.tensor import Rng, Tensor


def vec(values, dtype=np.float64):
    return Tensor(np.asarray(values, dtype=dtype).reshape(1, -1, 1, 1), requires_grad=True)


def random_state(channels, rng: Rng, dtype=np.float64, frozen=True) -> NormState:
    """Norm state with non-trivial affine terms and running statistics."""
    s = NormState.create(channels, dtype=dtype)
    s.gamma.data = rng.uniform((1, channels, 1, 1), 0.5, 1.5, dtype=dtype)
    s.beta.data = rng.normal((1, channels, 1, 1), 0.0, 0.5, dtype=dtype)
    s.running_mean = rng.normal((channels,), 0.0, 0.5, dtype=dtype)
    s.running_var = rng.uniform((channels,), 0.3, 2.0, dtype=dtype)
    s.frozen = frozen
    return s


def random_fbn(cin, cout, k, groups, stride, rng: Rng, dtype=np.float64) -> FbnConvLayer:
    w = Tensor(rng.normal((cout, cin, k, k), dtype=dtype), requires_grad=True)
    return FbnConvLayer(w, random_state(groups * cout, rng, dtype), groups, stride, k // 2)


def random_conv(cin, cout, k, rng: Rng, stride=1, groups=1, bias=False, dtype=np.float64) -> ConvParams:
    w = Tensor(rng.normal((cout, cin // groups, k, k), dtype=dtype), requires_grad=True)
    b = Tensor(rng.normal((1, cout, 1, 1), dtype=dtype), requires_grad=True) if bias else None
    return ConvParams(w, b, stride, k // 2, groups)
