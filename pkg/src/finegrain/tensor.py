"""Dense NCHW tensors, layout primitives and seeded randomness."""
from __future__ import annotations

import struct

import numpy as np

from .autograd import record

DEFAULT_DTYPE = np.float32
AXES = "nchw"


class ShapeError(ValueError):
    pass


class Tensor:
    """A 4-D array in (batch, channels, height, width) layout.

    Activations are treated as immutable values.  Parameters are Tensors with
    ``requires_grad=True`` whose ``data`` the optimizer updates in place.
    """

    __slots__ = ("data", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (n,c,h,w); got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        extra = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{extra})"

    # Convenience arithmetic used by tests and small losses.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


class Rng:
    """Seeded stream on numpy's Philox-4x64 counter-based generator.

    Philox output depends only on (key, counter), so a seed and call
    sequence reproduce the same values on every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def spawn(self, stream: int) -> "Rng":
        """Independent generator derived from this seed and a stream id."""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._gen = np.random.Generator(np.random.Philox(key=self.seed, counter=[0, 0, 0, int(stream)]))
        return child

    def normal(self, shape, mean=0.0, std=1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std + mean).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _check_shape(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ShapeError(f"shape must have 4 dims, got {shape}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dims must be >= 1, got {shape}")
    return shape


def tensor_create(shape, fill="zero", value: float = 0.0, mean: float = 0.0, std: float = 1.0,
                  rng: Rng | None = None, dtype=DEFAULT_DTYPE, requires_grad=False, name=None) -> Tensor:
    """Create a tensor filled with zeros, a constant, or seeded gaussian noise."""
    shape = _check_shape(shape)
    if fill == "zero":
        data = np.zeros(shape, dtype=dtype)
    elif fill == "constant":
        data = np.full(shape, value, dtype=dtype)
    elif fill == "gaussian":
        if rng is None:
            raise ValueError("gaussian fill needs an Rng")
        data = rng.normal(shape, mean, std, dtype=dtype)
    else:
        raise ValueError(f"unknown fill {fill!r}")
    return Tensor(data, requires_grad=requires_grad, name=name)


def _axes(dims) -> tuple[int, ...]:
    if isinstance(dims, str):
        dims = tuple(dims)
    out = []
    for d in dims:
        out.append(AXES.index(d) if isinstance(d, str) else int(d))
    return tuple(sorted(set(out)))


def reduce_stats(t: Tensor, dims="nhw") -> tuple[Tensor, Tensor]:
    """Population mean and variance over ``dims``; reduced axes kept with size 1."""
    axes = _axes(dims)
    x = t.data
    mean = x.mean(axis=axes, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=axes, keepdims=True)
    return Tensor(mean), Tensor(var)


# -- layout ---------------------------------------------------------------

def pad2d(t: Tensor, pad: int, value: float = 0.0) -> Tensor:
    if pad < 0:
        raise ShapeError("padding must be non-negative")
    if pad == 0:
        return t
    out = Tensor(np.pad(t.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value))

    def bw(g):
        return (g[:, :, pad:-pad, pad:-pad],)

    return record(out, (t,), bw)


def slice_channels(t: Tensor, start: int, stop: int) -> Tensor:
    c = t.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel slice [{start}, {stop}) out of range for {c} channels")
    out = Tensor(t.data[:, start:stop])

    def bw(g):
        full = np.zeros_like(t.data)
        full[:, start:stop] = g
        return (full,)

    return record(out, (t,), bw)


def concat_channels(*ts: Tensor) -> Tensor:
    if len(ts) == 1 and not isinstance(ts[0], Tensor):
        ts = tuple(ts[0])
    ref = ts[0].shape
    for t in ts[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"cannot concat {t.shape} with {ref}")
    out = Tensor(np.concatenate([t.data for t in ts], axis=1))
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return record(out, ts, bw)


def shuffle_permutation(c: int, groups: int) -> np.ndarray:
    """perm[k] is the output position of input channel k."""
    if groups < 1 or c % groups:
        raise ShapeError(f"{groups} groups do not divide {c} channels")
    k = np.arange(c)
    return (k % groups) * (c // groups) + k // groups


def channel_shuffle(t: Tensor, groups: int) -> Tensor:
    """Interleave ``groups`` channel groups; input channel k moves to
    (k mod groups) * (c/groups) + k div groups."""
    c = t.shape[1]
    perm = shuffle_permutation(c, groups)
    src = np.empty(c, dtype=np.int64)
    src[perm] = np.arange(c)
    out = Tensor(t.data[:, src])

    def bw(g):
        return (g[:, perm],)

    return record(out, (t,), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)
    return record(out, (a, b), lambda g: (g * b.data, g * a.data))


def tensor_sum(t: Tensor) -> Tensor:
    out = Tensor(t.data.sum(dtype=t.dtype).reshape(1, 1, 1, 1))
    return record(out, (t,), lambda g: (np.broadcast_to(g.reshape(()), t.shape).astype(t.dtype),))


def tensor_mean(t: Tensor) -> Tensor:
    n = t.data.size
    out = Tensor((t.data.sum(dtype=t.dtype) / n).reshape(1, 1, 1, 1))
    return record(out, (t,), lambda g: (np.full(t.shape, g.reshape(()) / n, dtype=t.dtype),))


# -- serialization ----------------------------------------------------------

def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    """Four little-endian int64 dims, then float32 little-endian, row-major."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim != 4:
        raise ShapeError(f"serialized tensors are 4-D, got {data.shape}")
    head = struct.pack("<4q", *data.shape)
    return head + np.ascontiguousarray(data, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor at ``offset``; returns (array, next offset)."""
    if len(buf) - offset < 32:
        raise ValueError("truncated tensor header")
    dims = struct.unpack_from("<4q", buf, offset)
    if any(d < 0 for d in dims):
        raise ValueError(f"bad tensor dims {dims}")
    offset += 32
    count = int(np.prod(dims))
    nbytes = 4 * count
    if len(buf) - offset < nbytes:
        raise ValueError("truncated tensor data")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(dims)
    return arr, offset + nbytes


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))

