"""Parameterized layers shared by the backbone and the exit heads.

Every layer knows three things: how to run forward on a batched tensor,
its per-sample output shape, and its per-sample FLOP count.

FLOP convention (applied uniformly so compute ratios are meaningful):
multiplies and adds are counted separately (factor 2 on multiply-adds),
bias adds once per output element, elementwise activations and plain
pools once per output element. The blend pool pays for both pools plus
the three-op mix per output element. Reshapes are free.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, ShapeError
from .rng import SplitMix64


def _kaiming_uniform(shape, fan_in: int, rng: SplitMix64):
    bound = (6.0 / fan_in) ** 0.5
    return rng.uniform_array(shape, -bound, bound)


@dataclass
class DenseLayer:
    """Affine map: x[N, in] @ weight[in, out] + bias[out]."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, in_features: int, out_features: int, rng: SplitMix64) -> "DenseLayer":
        w = Tensor(_kaiming_uniform((in_features, out_features), in_features, rng),
                   requires_grad=True)
        b = Tensor([0.0] * out_features, requires_grad=True)
        return cls(weight=w, bias=b)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias

    def params(self):
        return [self.weight, self.bias]

    def param_entries(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def out_shape(self, in_shape):
        self._check(in_shape)
        return (self.out_features,)

    def flops(self, in_shape) -> int:
        self._check(in_shape)
        return 2 * self.in_features * self.out_features + self.out_features

    def _check(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ConfigError(
                f"dense layer expects ({self.in_features},) input, got {tuple(in_shape)}")


@dataclass
class ConvLayer:
    """Square-kernel 2-D convolution; padding 'same' or 'valid'."""

    kernel: Tensor  # [outC, inC, k, k]
    bias: Tensor    # [outC]
    stride: int = 1
    padding: str = "same"

    @classmethod
    def create(cls, in_channels: int, out_channels: int, k: int, rng: SplitMix64,
               stride: int = 1, padding: str = "same") -> "ConvLayer":
        fan_in = in_channels * k * k
        kern = Tensor(_kaiming_uniform((out_channels, in_channels, k, k), fan_in, rng),
                      requires_grad=True)
        b = Tensor([0.0] * out_channels, requires_grad=True)
        return cls(kernel=kern, bias=b, stride=stride, padding=padding)

    @property
    def k(self) -> int:
        return self.kernel.shape[2]

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)

    def params(self):
        return [self.kernel, self.bias]

    def param_entries(self):
        return [("kernel", self.kernel), ("bias", self.bias)]

    def out_shape(self, in_shape):
        c, h, w = self._check(in_shape)
        pad = self.k // 2 if self.padding == "same" else 0
        oh = (h + 2 * pad - self.k) // self.stride + 1
        ow = (w + 2 * pad - self.k) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ConfigError(f"conv output empty for input {tuple(in_shape)}")
        return (self.kernel.shape[0], oh, ow)

    def flops(self, in_shape) -> int:
        out_c, oh, ow = self.out_shape(in_shape)
        in_c = self.kernel.shape[1]
        macs = self.k * self.k * in_c * out_c * oh * ow
        return 2 * macs + out_c * oh * ow

    def _check(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.kernel.shape[1]:
            raise ConfigError(
                f"conv layer expects ({self.kernel.shape[1]}, H, W) input, got {tuple(in_shape)}")
        return in_shape


@dataclass
class Relu:
    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(x)

    def params(self):
        return []

    def param_entries(self):
        return []

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def flops(self, in_shape) -> int:
        n = 1
        for e in in_shape:
            n *= e
        return n


@dataclass
class MaxPool:
    """Spatial downsampling by an integer factor (adaptive on ragged sizes)."""

    factor: int = 2

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        return ad.max_pool2d(x, (max(1, h // self.factor), max(1, w // self.factor)))

    def params(self):
        return []

    def param_entries(self):
        return []

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, max(1, h // self.factor), max(1, w // self.factor))

    def flops(self, in_shape) -> int:
        c, oh, ow = self.out_shape(in_shape)
        return c * oh * ow


@dataclass
class Flatten:
    def forward(self, x: Tensor) -> Tensor:
        return ad.reshape(x, (x.shape[0], -1))

    def params(self):
        return []

    def param_entries(self):
        return []

    def out_shape(self, in_shape):
        n = 1
        for e in in_shape:
            n *= e
        return (n,)

    def flops(self, in_shape) -> int:
        return 0


@dataclass
class SdnPool:
    """Learnable blend of average and max pooling to a fixed target size.

    output = gamma * avg_pool(x) + (1 - gamma) * max_pool(x); gamma is a
    scalar parameter on the gradient path. It is left unconstrained (no
    clamp to [0, 1]).
    """

    gamma: Tensor
    target: tuple = (2, 2)

    @classmethod
    def create(cls, target=(2, 2), gamma_init: float = 0.5) -> "SdnPool":
        return cls(gamma=Tensor(gamma_init, requires_grad=True), target=tuple(target))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] < self.target[0] or x.shape[3] < self.target[1]:
            raise ShapeError(
                f"blend pool input {x.shape[2:]} smaller than target {self.target}")
        avg = ad.avg_pool2d(x, self.target)
        mx = ad.max_pool2d(x, self.target)
        return self.gamma * avg + (1.0 - self.gamma) * mx

    def params(self):
        return [self.gamma]

    def param_entries(self):
        return [("gamma", self.gamma)]

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h < self.target[0] or w < self.target[1]:
            raise ConfigError(f"blend pool target {self.target} larger than input {(h, w)}")
        return (c, self.target[0], self.target[1])

    def flops(self, in_shape) -> int:
        c, oh, ow = self.out_shape(in_shape)
        # avg + max + three-op blend, per output element
        return 5 * c * oh * ow


def layer_flops(layer, in_shape) -> int:
    """Per-sample FLOPs of one layer for a concrete input shape."""
    return layer.flops(tuple(in_shape))


def sequence_flops(layers, in_shape) -> int:
    """Total FLOPs of a layer sequence; additive by construction."""
    total = 0
    shape = tuple(in_shape)
    for layer in layers:
        total += layer.flops(shape)
        shape = layer.out_shape(shape)
    return total
