"""
Redundancy-aware operation: per-channel soft thresholding with thresholds
predicted from the feature map itself, and the DRSBlock that hosts it.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ContractError, DimensionError
from .nn import BatchNorm, Conv, Linear, Module
from .tensor import Tensor, as_tensor


def hidden_width(channels: int, reduction: int = 4) -> int:
    return max(channels // reduction, 4)


class ThresholdSubnet(Module):
    """Two-layer FC network mapping channel statistics to threshold scales."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        super().__init__()
        self.channels = channels
        hidden = hidden_width(channels, reduction)
        self.fc1 = Linear(channels, hidden, rng, zero_bias=True)
        self.fc2 = Linear(hidden, channels, rng, zero_bias=True)

    def forward(self, stats: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(stats)))


def estimate_threshold(x, subnet: ThresholdSubnet) -> Tensor:
    """Per-sample, per-channel thresholds ``sigmoid(FC(GAP|x|)) * GAP|x|``.

    Accepts ``C x H x W`` or ``N x C x H x W``; returns ``C x 1 x 1`` or
    ``N x C x 1 x 1`` respectively.
    """
    x = as_tensor(x)
    unbatched = x.ndim == 3
    if unbatched:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != subnet.channels:
        raise DimensionError(f"threshold subnet built for {subnet.channels} channels, got input {x.shape}")
    n, c = x.shape[:2]
    magnitude = ops.reshape(ops.global_avg_pool(ops.abs_(x)), (n, c))
    scale = ops.sigmoid(subnet(magnitude))
    tau = ops.reshape(ops.mul(scale, magnitude), (n, c, 1, 1))
    return ops.reshape(tau, (c, 1, 1)) if unbatched else tau


def soft_threshold(x, tau) -> Tensor:
    """``sign(x) * max(|x| - tau, 0)`` with ``tau`` broadcast per channel."""
    x, tau = as_tensor(x), as_tensor(tau)
    if tau.size and tau.data.min() < 0:
        raise ContractError(f"soft threshold needs tau >= 0, got min {tau.data.min()}")
    sign = Tensor(np.sign(x.data), dtype=x.dtype)
    return ops.mul(sign, ops.relu(ops.sub(ops.abs_(x), tau)))


class RAO(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        super().__init__()
        self.subnet = ThresholdSubnet(channels, rng, reduction)

    def forward(self, x):
        return soft_threshold(x, estimate_threshold(x, self.subnet))


class _Skip(Module):
    def __init__(self, c_in, c_out, rng, stride):
        super().__init__()
        self.conv = Conv(c_in, c_out, (1, 1), rng, stride=stride)
        self.norm = BatchNorm(c_out)

    def forward(self, x):
        return self.norm(self.conv(x))


class ResidualBlock(Module):
    """Plain block ``skip(x) + relu(bn(conv(relu(bn(conv(x))))))``.

    The skip is the identity, or a strided 1x1 projection when the shape changes.
    """

    def __init__(self, c_in, c_out, rng, stride=1):
        super().__init__()
        self.conv1 = Conv(c_in, c_out, (3, 3), rng, stride=stride, padding=1)
        self.norm1 = BatchNorm(c_out)
        self.conv2 = Conv(c_out, c_out, (3, 3), rng, padding=1)
        self.norm2 = BatchNorm(c_out)
        self.skip = _Skip(c_in, c_out, rng, stride) if (stride != 1 or c_in != c_out) else None

    def forward(self, x):
        h = ops.relu(self.norm1(self.conv1(x)))
        h = ops.relu(self.norm2(self.conv2(h)))
        skip = self.skip(x) if self.skip is not None else x
        return ops.add(skip, h)


class DRSBlock(Module):
    """A plain residual block followed by a modified (RAO) residual block.

    With ``use_rao=False`` the second block keeps the modified block's wiring
    minus the RAO, i.e. ``x + bn(conv(relu(bn(conv(x)))))``.
    """

    def __init__(self, c_in, c_out, rng, stride=1, use_rao: bool = True, reduction: int = 4):
        super().__init__()
        self.res = ResidualBlock(c_in, c_out, rng, stride=stride)
        self.mod = _ModifiedBlock(c_out, rng, use_rao, reduction)

    def forward(self, x):
        return self.mod(self.res(x))


class _ModifiedBlock(Module):
    def __init__(self, channels, rng, use_rao, reduction):
        super().__init__()
        self.conv1 = Conv(channels, channels, (3, 3), rng, padding=1)
        self.norm1 = BatchNorm(channels)
        self.conv2 = Conv(channels, channels, (3, 3), rng, padding=1)
        self.norm2 = BatchNorm(channels)
        self.rao = RAO(channels, rng, reduction) if use_rao else None

    def forward(self, x):
        h = ops.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        if self.rao is not None:
            h = self.rao(h)
        return ops.add(x, h)


def drsblock_forward(x, block: DRSBlock) -> Tensor:
    return block(x)
