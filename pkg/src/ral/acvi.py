"""
Adaptive cross-view interaction: bidirectional scaled dot-product
cross-attention between the left and right views, fused back into each view
through a trainable scale.

Tokens are spatial positions (N = H*W) with channels as the embedding, and
each frame attends independently.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .errors import DimensionError
from .nn import LayerNorm, Module, uniform_fan_in
from .tensor import Parameter, Tensor, as_tensor


def scaled_dot_attention(q, k, v, return_weights: bool = False):
    """``softmax(q k^T / sqrt(C)) v`` over ``... x N x C`` token matrices."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape or q.shape[:-2] != k.shape[:-2]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not align")
    c = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = ops.scalar_mul(ops.matmul(q, ops.transpose(k, axes)), 1.0 / math.sqrt(c))
    weights = ops.softmax_lastdim(scores)
    out = ops.matmul(weights, v)
    return (out, weights) if return_weights else out


def _to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))


def _from_tokens(t: Tensor, shape) -> Tensor:
    n, c, h, w = shape
    return ops.reshape(ops.transpose(t, (0, 2, 1)), (n, c, h, w))


class ACVI(Module):
    """Parameters: W1/W2 projections per view, per-view layer norm, alpha scales.

    ``alpha_init=0`` makes the module an exact identity at initialisation.
    ``shared_ln`` uses one layer norm for both views.
    """

    def __init__(self, channels: int, rng: np.random.Generator, alpha_init: float = 0.0,
                 shared_ln: bool = False):
        super().__init__()
        self.channels = channels
        self.w1_l = Parameter(uniform_fan_in(rng, (channels, channels), channels))
        self.w1_r = Parameter(uniform_fan_in(rng, (channels, channels), channels))
        self.w2_l = Parameter(uniform_fan_in(rng, (channels, channels), channels))
        self.w2_r = Parameter(uniform_fan_in(rng, (channels, channels), channels))
        self.ln_l = LayerNorm(channels)
        self.ln_r = self.ln_l if shared_ln else LayerNorm(channels)
        self.alpha_l = Parameter(np.full(1, alpha_init))
        self.alpha_r = Parameter(np.full(1, alpha_init))

    def forward(self, xl, xr):
        return cross_view_interact(xl, xr, self)


def cross_view_interact(xl, xr, p: ACVI) -> tuple[Tensor, Tensor]:
    xl, xr = as_tensor(xl), as_tensor(xr)
    if xl.shape != xr.shape:
        raise DimensionError(f"ACVI views differ in shape: {xl.shape} vs {xr.shape}")
    unbatched = xl.ndim == 3
    if unbatched:
        xl = ops.reshape(xl, (1,) + xl.shape)
        xr = ops.reshape(xr, (1,) + xr.shape)
    if xl.ndim != 4 or xl.shape[1] != p.channels:
        raise DimensionError(f"ACVI built for {p.channels} channels, got {xl.shape}")
    shape = xl.shape
    tl, tr = _to_tokens(xl), _to_tokens(xr)
    nl, nr = p.ln_l(tl), p.ln_r(tr)
    # values use the un-normalised tokens
    r_to_l = scaled_dot_attention(ops.matmul(nl, p.w1_l), ops.matmul(nr, p.w1_r), ops.matmul(tr, p.w2_r))
    l_to_r = scaled_dot_attention(ops.matmul(nr, p.w1_r), ops.matmul(nl, p.w1_l), ops.matmul(tl, p.w2_l))
    scale_l = ops.reshape(p.alpha_l, (1, 1, 1, 1))
    scale_r = ops.reshape(p.alpha_r, (1, 1, 1, 1))
    ml = ops.add(ops.mul(scale_l, _from_tokens(r_to_l, shape)), xl)
    mr = ops.add(ops.mul(scale_r, _from_tokens(l_to_r, shape)), xr)
    if unbatched:
        ml = ops.reshape(ml, shape[1:])
        mr = ops.reshape(mr, shape[1:])
    return ml, mr
