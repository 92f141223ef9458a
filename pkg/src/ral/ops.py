"""
Differentiable operators.

Shape conventions: convolution and pooling ops take ``N x C x *spatial``
batches; a single unbatched ``C x *spatial`` map is also accepted. Binary
elementwise ops allow only keepdims-style broadcasting (equal rank, each
extent equal or 1), which covers per-channel vectors against feature maps.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError, LabelError
from .tensor import Tensor, as_tensor, default_dtype, make_result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    ok = a.ndim == b.ndim and all(x == y or x == 1 or y == 1 for x, y in zip(a.shape, b.shape))
    if not ok:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product (``mul_elementwise``)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw, "mul")


mul_elementwise = mul


def scalar_mul(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return make_result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,), "scalar_mul")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    # sign(0) == 0 gives the zero subgradient at the kink
    return make_result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0).astype(a.dtype), (a,),
                       lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_result(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


# -- shape -----------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def getitem(a, index) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)
    out = np.ascontiguousarray(a.data[index])

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return make_result(out, (a,), bw, "getitem")


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    out = np.ascontiguousarray(np.flip(a.data, axis))
    return make_result(out, (a,), lambda g: (np.ascontiguousarray(np.flip(g, axis)),), "flip")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return make_result(out, tensors, bw, "concat")


# -- reductions ------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise DimensionError(f"mean over empty axes of shape {a.shape}")
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_result(out, (a,), bw, "mean")


def mean_all(a) -> Tensor:
    return mean(a)


def global_avg_pool(x, spatial_dims: int = 2) -> Tensor:
    """Per-channel mean over the trailing ``spatial_dims`` axes, kept as size-1 axes."""
    x = as_tensor(x)
    if x.ndim < spatial_dims + 1 or any(s < 1 for s in x.shape[-spatial_dims:]):
        raise DimensionError(f"global_avg_pool: bad input shape {x.shape}")
    return mean(x, axis=tuple(range(x.ndim - spatial_dims, x.ndim)), keepdims=True)


# -- linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a[..., M, K] @ b[K, N]`` or batched ``a[..., M, K] @ b[..., K, N]`` (same batch)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} differ")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = np.tensordot(a.data, g, axes=(list(range(a.ndim - 1)), list(range(g.ndim - 1))))
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


# -- normalisation / probabilities -----------------------------------------------

def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError(f"softmax over empty last dimension, shape {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (a,), bw, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs features {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            d = g * gain.data
            gx = inv * (d - d.mean(axis=-1, keepdims=True)
                        - xhat * (d * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out.astype(x.dtype), (x, gain, bias), bw, "layer_norm")


def batch_norm(x, gain, bias, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over every axis except the channel axis (1).

    In training mode the running statistics are updated in place
    (``r <- (1 - momentum) r + momentum * batch_stat``, unbiased variance).
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim < 2 or gain.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm: input {x.shape} vs gain {gain.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    n = x.size // x.shape[1]
    if training:
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        xc = x.data - running_mean.reshape(bshape).astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
    xhat = xc * inv
    out = xhat * gain.data.reshape(bshape) + bias.data.reshape(bshape)

    def bw(g):
        gx = None
        if x.requires_grad:
            d = g * gain.data.reshape(bshape)
            if training:
                gx = inv * (d - d.mean(axis=axes, keepdims=True)
                            - xhat * (d * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = d * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(out, (x, gain, bias), bw, "batch_norm")


def batch_norm2d(x, gain, bias, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    if x.ndim not in (3, 4):
        raise DimensionError(f"batch_norm2d expects C x H x W or N x C x H x W, got {x.shape}")
    if x.ndim == 3:
        out = batch_norm(reshape(x, (1,) + x.shape), gain, bias, running_mean, running_var,
                         training, momentum, eps)
        return reshape(out, x.shape)
    return batch_norm(x, gain, bias, running_mean, running_var, training, momentum, eps)


def cross_entropy_logits(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = labels.shape[0]
    rows = np.arange(b)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / b),)

    return make_result(loss, (logits,), bw, "cross_entropy")


def dropout(x, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    x = as_tensor(x)
    if not training or p == 0:
        return x
    if not 0 <= p < 1:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- convolution / pooling -------------------------------------------------------

def _tuple(v, n):
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ContractError(f"expected {n} values, got {v}")
    return v


def conv(x, w, stride=1, padding=0, op: str = "conv") -> Tensor:
    """N-d cross-correlation with zero padding: ``x[N, Cin, *S]``, ``w[Cout, Cin, *k]``."""
    x, w = as_tensor(x), as_tensor(w)
    nd = w.ndim - 2
    if nd < 1:
        raise DimensionError(f"{op}: kernel must have rank >= 3, got {w.shape}")
    if x.ndim == nd + 1:
        out = conv(reshape(x, (1,) + x.shape), w, stride, padding, op)
        return reshape(out, out.shape[1:])
    if x.ndim != nd + 2:
        raise DimensionError(f"{op}: input {x.shape} does not match kernel {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"{op}: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    stride, padding = _tuple(stride, nd), _tuple(padding, nd)
    ksize = w.shape[2:]
    padded = tuple(s + 2 * p for s, p in zip(x.shape[2:], padding))
    if any(k > s for k, s in zip(ksize, padded)):
        raise DimensionError(f"{op}: kernel {ksize} larger than padded input {padded}")
    if any(s < 1 for s in stride):
        raise ContractError(f"{op}: stride must be positive, got {stride}")

    xp = x.data
    if any(padding):
        xp = np.pad(xp, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    out_sp = tuple((s - k) // st + 1 for s, k, st in zip(padded, ksize, stride))
    kernel = _conv_shift if all(st == 1 for st in stride) else _conv_im2col
    out, grads = kernel(xp, w.data, stride, out_sp)

    def bw(g):
        gxp, gw = grads(g, x.requires_grad, w.requires_grad)
        gx = None
        if gxp is not None:
            crop = tuple(slice(p, p + s) for p, s in zip(padding, x.shape[2:]))
            gx = np.ascontiguousarray(gxp[(slice(None), slice(None)) + crop])
        return gx, gw

    return make_result(out, (x, w), bw, op)


def _conv_shift(xp, w, stride, out_sp):
    """Stride-1 kernel: every tap is a contiguous shifted view of the flattened
    channel-major input, so each tap is one GEMM with no im2col buffer.
    Outputs are computed on the full padded grid and cropped."""
    n, c_in = xp.shape[:2]
    sp = xp.shape[2:]
    c_out = w.shape[0]
    flat_strides = np.cumprod((1,) + sp[:0:-1])[::-1]
    shifts = [int(np.dot(off, flat_strides))
              for off in itertools.product(*(range(k) for k in w.shape[2:]))]
    m = n * int(np.prod(sp))
    xf = np.zeros((c_in, m + shifts[-1]), dtype=xp.dtype)
    xf[:, :m] = np.moveaxis(xp, 1, 0).reshape(c_in, m)
    taps = w.reshape(c_out, c_in, -1)
    taps = [np.ascontiguousarray(taps[:, :, i]) for i in range(len(shifts))]
    acc = taps[0] @ xf[:, shifts[0]:shifts[0] + m]
    for tap, sh in zip(taps[1:], shifts[1:]):
        acc += tap @ xf[:, sh:sh + m]
    valid = (slice(None), slice(None)) + tuple(slice(0, o) for o in out_sp)
    out = np.ascontiguousarray(np.moveaxis(acc.reshape((c_out, n) + sp)[valid], 0, 1))

    def grads(g, need_x, need_w):
        gf = np.zeros((c_out, n) + sp, dtype=g.dtype)
        gf[valid] = np.moveaxis(g, 1, 0)
        gf = gf.reshape(c_out, m)
        gw = gxp = None
        if need_w:
            gw = np.stack([gf @ xf[:, sh:sh + m].T for sh in shifts], axis=-1).reshape(w.shape)
        if need_x:
            gxf = np.zeros_like(xf)
            for tap, sh in zip(taps, shifts):
                gxf[:, sh:sh + m] += tap.T @ gf
            gxp = np.moveaxis(gxf[:, :m].reshape((c_in, n) + sp), 0, 1)
        return gxp, gw

    return out, grads


def _conv_im2col(xp, w, stride, out_sp):
    """Strided kernel: im2col over stride phases, so each gathered window is a
    unit-stride slice of one phase sub-array."""
    n, c_in = xp.shape[:2]
    c_out = w.shape[0]
    ksize = w.shape[2:]
    offsets = list(itertools.product(*(range(k) for k in ksize)))
    xc = np.moveaxis(xp, 1, 0)
    phase_ids = list(itertools.product(*(range(st) for st in stride)))
    phases = {r: np.ascontiguousarray(xc[(slice(None), slice(None)) +
                                         tuple(slice(ri, None, st) for ri, st in zip(r, stride))])
              for r in phase_ids}

    def locate(off):
        r = tuple(o % st for o, st in zip(off, stride))
        win = tuple(slice(o // st, o // st + m) for o, st, m in zip(off, stride, out_sp))
        return r, (slice(None), slice(None)) + win

    cols = np.empty((c_in, len(offsets), n) + out_sp, dtype=xp.dtype)
    for i, off in enumerate(offsets):
        r, win = locate(off)
        cols[:, i] = phases[r][win]
    cols = cols.reshape(c_in * len(offsets), -1)
    wmat = w.reshape(c_out, -1)
    out = np.ascontiguousarray(np.moveaxis((wmat @ cols).reshape((c_out, n) + out_sp), 0, 1))

    def grads(g, need_x, need_w):
        gmat = np.ascontiguousarray(np.moveaxis(g, 1, 0)).reshape(c_out, -1)
        gw = gxp = None
        if need_w:
            gw = (gmat @ cols.T).reshape(w.shape)
        if need_x:
            gcols = (wmat.T @ gmat).reshape((c_in, len(offsets), n) + out_sp)
            gph = {r: np.zeros_like(ph) for r, ph in phases.items()}
            for i, off in enumerate(offsets):
                r, win = locate(off)
                gph[r][win] += gcols[:, i]
            gxc = np.zeros(xc.shape, dtype=g.dtype)
            for r, gp in gph.items():
                gxc[(slice(None), slice(None)) +
                    tuple(slice(ri, None, st) for ri, st in zip(r, stride))] = gp
            gxp = np.moveaxis(gxc, 0, 1)
        return gxp, gw

    return out, grads


def conv1d(x, w, stride=1, padding=0) -> Tensor:
    if w.ndim != 3:
        raise DimensionError(f"conv1d kernel must be Cout x Cin x k, got {w.shape}")
    return conv(x, w, stride, padding, "conv1d")


def conv2d(x, w, stride=1, padding=0) -> Tensor:
    if w.ndim != 4:
        raise DimensionError(f"conv2d kernel must be Cout x Cin x kh x kw, got {w.shape}")
    return conv(x, w, stride, padding, "conv2d")


def conv3d(x, w, stride=1, padding=0) -> Tensor:
    if w.ndim != 5:
        raise DimensionError(f"conv3d kernel must be Cout x Cin x kt x kh x kw, got {w.shape}")
    return conv(x, w, stride, padding, "conv3d")


def max_pool(x, kernel) -> Tensor:
    """Non-overlapping max pooling (stride == kernel) over the spatial axes of ``N x C x *S``.

    Trailing rows that do not fill a window are dropped. Ties go to the first
    maximum in row-major window order.
    """
    x = as_tensor(x)
    nd = x.ndim - 2
    kernel = _tuple(kernel, nd)
    sp = x.shape[2:]
    outs = tuple(s // k for s, k in zip(sp, kernel))
    if any(o == 0 for o in outs):
        raise DimensionError(f"max_pool: kernel {kernel} larger than input {sp}")
    crop = x.data[(slice(None), slice(None)) + tuple(slice(0, o * k) for o, k in zip(outs, kernel))]
    split = x.shape[:2] + tuple(v for ok in zip(outs, kernel) for v in ok)
    perm = (0, 1) + tuple(2 + 2 * i for i in range(nd)) + tuple(3 + 2 * i for i in range(nd))
    r = crop.reshape(split).transpose(perm)
    flat = r.reshape(r.shape[:2 + nd] + (-1,))
    idx = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]
    inv = tuple(np.argsort(perm))

    def bw(g):
        gf = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gf, idx, g[..., None], axis=-1)
        gc = gf.reshape(r.shape).transpose(inv).reshape(crop.shape)
        full = np.zeros(x.shape, dtype=g.dtype)
        full[(slice(None), slice(None)) + tuple(slice(0, s) for s in crop.shape[2:])] = gc
        return (full,)

    return make_result(np.ascontiguousarray(out), (x,), bw, "max_pool")


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()))
