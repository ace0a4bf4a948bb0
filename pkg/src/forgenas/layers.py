"""Parameterized layers on top of the autodiff core.

A Module owns Tensors (requires_grad parameters) and sub-Modules; parameter
discovery walks the attribute dict in insertion order, so enumeration is
deterministic for a fixed construction sequence.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def parameters(self):
        out = []
        for value in vars(self).values():
            out.extend(_collect(value))
        return out

    def __call__(self, x, training: bool = False):
        return self.forward(x, training)

    def forward(self, x, training: bool = False):
        raise NotImplementedError


def _collect(value):
    if isinstance(value, Tensor):
        return [value] if value.requires_grad else []
    if isinstance(value, Module):
        return value.parameters()
    if isinstance(value, (list, tuple)):
        out = []
        for v in value:
            out.extend(_collect(v))
        return out
    return []


def walk_batchnorms(obj, fn) -> None:
    """Apply fn to every BatchNorm2d reachable through Modules, lists,
    tuples, and dicts (dict keys visited in sorted order)."""
    if isinstance(obj, BatchNorm2d):
        fn(obj)
        return
    if isinstance(obj, Module):
        for v in vars(obj).values():
            walk_batchnorms(v, fn)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            walk_batchnorms(v, fn)
    elif isinstance(obj, dict):
        for k in sorted(obj):
            walk_batchnorms(obj[k], fn)


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 groups: int = 1):
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Tensor(
            kaiming(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in),
            requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def forward(self, x, training: bool = False):
        return ad.conv2d(x, self.weight, self.stride, self.padding,
                         self.dilation, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, affine: bool = True, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.gamma = Tensor(np.ones((1, channels, 1, 1)), requires_grad=True) \
            if affine else None
        self.beta = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True) \
            if affine else None
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x, training: bool = False):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training, self.eps,
                             self.momentum)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng):
        self.weight = Tensor(
            rng.standard_normal((in_features, out_features))
            * np.sqrt(1.0 / in_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x, training: bool = False):
        return ad.linear(x, self.weight, self.bias)


class Identity(Module):
    def forward(self, x, training: bool = False):
        return x


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x, training: bool = False):
        for layer in self.layers:
            x = layer(x, training)
        return x


class ReLU(Module):
    def forward(self, x, training: bool = False):
        return x.relu()


class MaxPool2d(Module):
    def __init__(self, kernel: int = 3, stride: int = 1, padding: int = 1):
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def forward(self, x, training: bool = False):
        return ad.max_pool2d(x, self.kernel, self.stride, self.padding)


class AvgPool2d(Module):
    def __init__(self, kernel: int = 2, stride: int = 2):
        self.kernel = kernel
        self.stride = stride

    def forward(self, x, training: bool = False):
        return ad.avg_pool2d(x, self.kernel, self.stride)


class ReLUConvBN(Module):
    """relu -> conv -> batch norm, the standard cell preprocessing block."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng,
                 stride: int = 1, padding: int = 0, affine: bool = True):
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, stride=stride,
                           padding=padding)
        self.bn = BatchNorm2d(out_ch, affine=affine)

    def forward(self, x, training: bool = False):
        return self.bn(self.conv(x.relu(), training), training)


class FactorizedReduce(Module):
    """Halve spatial extent without information loss from strided 1x1 convs.

    Two stride-2 1x1 convolutions, one on the input and one offset by a
    pixel, concatenated channel-wise. Requires even spatial extents and an
    even output channel count.
    """

    def __init__(self, in_ch: int, out_ch: int, rng, affine: bool = True):
        if out_ch % 2 != 0:
            raise ValueError("factorized reduce needs an even channel count")
        self.conv1 = Conv2d(in_ch, out_ch // 2, 1, rng, stride=2)
        self.conv2 = Conv2d(in_ch, out_ch // 2, 1, rng, stride=2)
        self.bn = BatchNorm2d(out_ch, affine=affine)

    def forward(self, x, training: bool = False):
        x = x.relu()
        a = self.conv1(x, training)
        b = self.conv2(x[:, :, 1:, 1:], training)
        return self.bn(ad.concat([a, b], axis=1), training)
