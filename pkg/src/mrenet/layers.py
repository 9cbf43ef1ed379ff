"""Small parameterized layers built on the autodiff primitives.

Each layer registers its tensors in a :class:`ParamStore` under a dotted
name prefix at construction time and is afterwards a pure function of its
input (plus the training flag for batch norm).  Convolutions follow the
backbone convention conv -> ReLU -> BN unless built as ``linear`` blocks.
"""

from __future__ import annotations

import numpy as np

from mrenet import tensor as T
from mrenet.params import ParamStore
from mrenet.tensor import Tensor

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def he_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3d:
    """Bare 3D convolution with bias (no activation, no normalisation)."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 ksize, rng: np.random.Generator, dtype=np.float64,
                 stride=1, padding=0, dilation=1):
        ksize = (ksize, ksize, ksize) if isinstance(ksize, int) else tuple(ksize)
        fan_in = c_in * int(np.prod(ksize))
        self.weight = store.add(
            name + ".weight", he_init(rng, (c_out, c_in) + ksize, fan_in, dtype))
        self.bias = store.add(name + ".bias", np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, dilation=self.dilation)


class BatchNorm3d:
    """Per-channel batch normalisation with running statistics."""

    def __init__(self, store: ParamStore, name: str, channels: int,
                 dtype=np.float64):
        self.gamma = store.add(name + ".gamma", np.ones(channels, dtype=dtype))
        self.beta = store.add(name + ".beta", np.zeros(channels, dtype=dtype))
        self.running_mean = store.add(
            name + ".running_mean", np.zeros(channels, dtype=dtype), trainable=False)
        self.running_var = store.add(
            name + ".running_var", np.ones(channels, dtype=dtype), trainable=False)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta,
                            self.running_mean.data, self.running_var.data,
                            training=training, momentum=BN_MOMENTUM, eps=BN_EPS)


class ConvBlock:
    """conv3d -> ReLU -> BN (the backbone's stated ordering)."""

    def __init__(self, store, name, c_in, c_out, ksize, rng, dtype=np.float64,
                 stride=1, padding=0, dilation=1):
        self.conv = Conv3d(store, name, c_in, c_out, ksize, rng, dtype,
                           stride=stride, padding=padding, dilation=dilation)
        self.bn = BatchNorm3d(store, name + ".bn", c_out, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.bn(T.relu(self.conv(x)), training)


class UpConvBlock:
    """Transposed conv (kernel == stride) -> ReLU -> BN."""

    def __init__(self, store, name, c_in, c_out, stride, rng, dtype=np.float64):
        stride = tuple(stride)
        fan_in = c_in * int(np.prod(stride))
        self.weight = store.add(
            name + ".weight", he_init(rng, (c_in, c_out) + stride, fan_in, dtype))
        self.bias = store.add(name + ".bias", np.zeros(c_out, dtype=dtype))
        self.bn = BatchNorm3d(store, name + ".bn", c_out, dtype)
        self.stride = stride

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = T.conv_transpose3d(x, self.weight, self.bias, stride=self.stride)
        return self.bn(T.relu(y), training)


class Linear:
    """Fully connected layer on the trailing axis: y = x @ W + b."""

    def __init__(self, store, name, n_in, n_out, rng, dtype=np.float64,
                 bias: bool = True):
        self.weight = store.add(
            name + ".weight", he_init(rng, (n_in, n_out), n_in, dtype))
        self.bias = store.add(name + ".bias", np.zeros(n_out, dtype=dtype)) \
            if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y
