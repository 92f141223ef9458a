"""
Symmetric half-views of a feature map.

The right half is mirrored into the left half's orientation so one set of
encoder weights can serve both views. For odd widths both halves keep the
centre column; reassembly averages its two copies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import ops
from .errors import ContractError, DimensionError
from .nn import Module
from .tensor import Tensor, as_tensor


@dataclass
class ViewPair:
    left: Tensor
    right: Tensor
    original_width: int
    mirrored_right: bool = True

    def swapped(self) -> "ViewPair":
        return ViewPair(self.right, self.left, self.original_width, self.mirrored_right)


def flip_h(x) -> Tensor:
    return ops.flip(as_tensor(x), -1)


def split_views(x) -> ViewPair:
    x = as_tensor(x)
    width = x.shape[-1]
    if width < 2:
        raise DimensionError(f"split_views needs width >= 2, got shape {x.shape}")
    half = (width + 1) // 2
    left = x[..., :half]
    right = flip_h(x[..., width - half:])
    return ViewPair(left, right, width)


def reassemble(pair: ViewPair) -> Tensor:
    width = pair.original_width
    half = (width + 1) // 2
    if pair.left.shape != pair.right.shape or pair.left.shape[-1] != half:
        raise ContractError(
            f"views {pair.left.shape}/{pair.right.shape} inconsistent with width {width}")
    right = flip_h(pair.right) if pair.mirrored_right else pair.right
    if width % 2 == 0:
        return ops.concat([pair.left, right], axis=-1)
    centre = ops.scalar_mul(ops.add(pair.left[..., half - 1:], right[..., :1]), 0.5)
    return ops.concat([pair.left[..., :half - 1], centre, right[..., 1:]], axis=-1)


class SharedEncoder(Module):
    """Sequence of blocks applied with the same weights to both views."""

    def __init__(self, blocks: Sequence[Module]):
        super().__init__()
        self.blocks = list(blocks)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


def encode_shared(pair: ViewPair, encoder: Module) -> ViewPair:
    """Run both views through ``encoder`` as one batch (shared weights and statistics)."""
    left, right = pair.left, pair.right
    if left.shape != right.shape:
        raise DimensionError(f"view shapes differ: {left.shape} vs {right.shape}")
    unbatched = left.ndim == 3
    if unbatched:
        left = ops.reshape(left, (1,) + left.shape)
        right = ops.reshape(right, (1,) + right.shape)
    n = left.shape[0]
    out = encoder(ops.concat([left, right], axis=0))
    new_l, new_r = out[:n], out[n:]
    if unbatched:
        new_l = ops.reshape(new_l, new_l.shape[1:])
        new_r = ops.reshape(new_r, new_r.shape[1:])
    return ViewPair(new_l, new_r, pair.original_width, pair.mirrored_right)
