"""Central-difference convolution and the forgery-oriented operator registry.

A central-difference convolution augments a vanilla convolution with a
theta-weighted term that subtracts the center pixel times the kernel sum,
emphasizing local gradient cues left by image manipulation. It is realized
by kernel folding: the center tap becomes w_center - theta * sum(w), so one
ordinary convolution computes the whole thing.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (BatchNorm2d, Conv2d, FactorizedReduce, Identity,
                     MaxPool2d, Module)

DEFAULT_OP_NAMES = (
    "skip_connect",
    "SepCDC_3x3_0.0",
    "SepCDC_3x3_0.5",
    "SepCDC_3x3_0.7",
    "SepCDC_3x3_1.0",
    "SepCDC_5x5_0.7",
    "DilCDC_3x3_0.5",
    "DilCDC_3x3_0.7",
    "DilCDC_5x5_0.7",
)

_CDC_NAME = re.compile(r"^(SepCDC|DilCDC)_(\d+)x(\d+)_(\d+(?:\.\d+)?)$")


@dataclass(frozen=True)
class OperationKind:
    name: str
    family: str  # sep_cdc | dil_cdc | skip | pool_max
    kernel: int = 0
    dilation: int = 1
    theta: float = 0.0


def parse_kind(name: str) -> OperationKind:
    if name == "skip_connect":
        return OperationKind(name, "skip")
    if name == "pool_max":
        return OperationKind(name, "pool_max", kernel=3)
    m = _CDC_NAME.match(name)
    if m is None:
        raise ValueError(f"unrecognized operation name: {name!r}")
    fam_tag, k1, k2, theta_s = m.groups()
    if k1 != k2:
        raise ValueError(f"non-square kernel in {name!r}")
    kernel = int(k1)
    if kernel % 2 == 0:
        raise ValueError(f"even kernel size in {name!r}: central difference "
                         "needs a center tap")
    theta = float(theta_s)
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta out of [0, 1] in {name!r}")
    family = "sep_cdc" if fam_tag == "SepCDC" else "dil_cdc"
    dilation = 2 if family == "dil_cdc" else 1
    return OperationKind(name, family, kernel=kernel, dilation=dilation,
                         theta=theta)


def format_kind(kind: OperationKind) -> str:
    if kind.family == "skip":
        return "skip_connect"
    if kind.family == "pool_max":
        return "pool_max"
    tag = "SepCDC" if kind.family == "sep_cdc" else "DilCDC"
    return f"{tag}_{kind.kernel}x{kind.kernel}_{kind.theta!r}"


class OperatorRegistry:
    """Ordered, immutable list of candidate operations."""

    def __init__(self, names=None):
        names = list(names) if names is not None else list(DEFAULT_OP_NAMES)
        if len(names) != len(set(names)):
            raise ValueError("duplicate operation names in registry")
        if len(names) < 3:
            raise ValueError("registry needs at least 3 operations")
        self.kinds = tuple(parse_kind(n) for n in names)
        self.names = tuple(names)
        self._index = {n: i for i, n in enumerate(names)}

    def __len__(self):
        return len(self.kinds)

    def __iter__(self):
        return iter(self.kinds)

    def index(self, name: str) -> int:
        return self._index[name]

    def fingerprint(self) -> str:
        return "|".join(self.names)


def fold_cdc_kernel(weight: Tensor, theta: float) -> Tensor:
    """Return the folded kernel w' with w'_center = w_center - theta*sum(w)."""
    _, _, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"even kernel {kh}x{kw} has no center tap")
    if theta == 0.0:
        return weight
    center = np.zeros((1, 1, kh, kw))
    center[0, 0, kh // 2, kw // 2] = 1.0
    ksum = weight.sum(axis=(2, 3), keepdims=True)
    return weight - theta * (ksum * Tensor(center))


def cdc_conv2d(x: Tensor, weight: Tensor, theta: float, stride: int = 1,
               padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    return ad.conv2d(x, fold_cdc_kernel(weight, theta), stride, padding,
                     dilation, groups)


class CDConv2d(Module):
    """Depthwise central-difference convolution, spatial-size preserving
    at stride 1 for any dilation."""

    def __init__(self, channels: int, kernel: int, theta: float, rng,
                 stride: int = 1, dilation: int = 1):
        from .layers import kaiming
        self.weight = Tensor(kaiming(rng, (channels, 1, kernel, kernel),
                                     kernel * kernel), requires_grad=True)
        self.theta = theta
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (kernel - 1) // 2
        self.groups = channels

    def forward(self, x, training: bool = False):
        return cdc_conv2d(x, self.weight, self.theta, self.stride,
                          self.padding, self.dilation, self.groups)


class SepCDC(Module):
    """Two rounds of relu -> depthwise CDC -> pointwise 1x1 -> batch norm.

    The stride lands in the first depthwise stage; the pointwise stage is a
    vanilla convolution (a 1x1 central difference is degenerate).
    """

    def __init__(self, channels: int, kernel: int, theta: float, rng,
                 stride: int = 1, affine: bool = True):
        self.dw1 = CDConv2d(channels, kernel, theta, rng, stride=stride)
        self.pw1 = Conv2d(channels, channels, 1, rng)
        self.bn1 = BatchNorm2d(channels, affine=affine)
        self.dw2 = CDConv2d(channels, kernel, theta, rng)
        self.pw2 = Conv2d(channels, channels, 1, rng)
        self.bn2 = BatchNorm2d(channels, affine=affine)

    def forward(self, x, training: bool = False):
        x = self.bn1(self.pw1(self.dw1(x.relu(), training), training), training)
        x = self.bn2(self.pw2(self.dw2(x.relu(), training), training), training)
        return x


class DilCDC(Module):
    """Single relu -> dilated depthwise CDC -> pointwise 1x1 -> batch norm."""

    def __init__(self, channels: int, kernel: int, theta: float, rng,
                 stride: int = 1, dilation: int = 2, affine: bool = True):
        self.dw = CDConv2d(channels, kernel, theta, rng, stride=stride,
                           dilation=dilation)
        self.pw = Conv2d(channels, channels, 1, rng)
        self.bn = BatchNorm2d(channels, affine=affine)

    def forward(self, x, training: bool = False):
        return self.bn(self.pw(self.dw(x.relu(), training), training), training)


class PoolMax(Module):
    def __init__(self, channels: int, stride: int = 1, affine: bool = True):
        self.pool = MaxPool2d(3, stride, 1)
        self.bn = BatchNorm2d(channels, affine=affine)

    def forward(self, x, training: bool = False):
        return self.bn(self.pool(x, training), training)


def instantiate(kind: OperationKind, channels: int, stride: int, rng,
                affine: bool = True) -> Module:
    """Build the channel-preserving layer stack for one registry operation."""
    if channels < 1:
        raise ValueError("channels must be >= 1")
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}")
    if kind.family == "skip":
        if stride == 1:
            return Identity()
        return FactorizedReduce(channels, channels, rng, affine=affine)
    if kind.family == "sep_cdc":
        return SepCDC(channels, kind.kernel, kind.theta, rng, stride=stride,
                      affine=affine)
    if kind.family == "dil_cdc":
        return DilCDC(channels, kind.kernel, kind.theta, rng, stride=stride,
                      dilation=kind.dilation, affine=affine)
    if kind.family == "pool_max":
        return PoolMax(channels, stride=stride, affine=affine)
    raise ValueError(f"unsupported operation family {kind.family!r}")
