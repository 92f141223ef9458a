"""Module tree, parameter naming, and the basic layers built on ``ral.ops``."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, default_dtype


class Module:
    """Container whose Parameter/Module attributes form a named tree.

    Names are dotted attribute paths (``encoder.stage0.block0.conv1.weight``)
    in attribute-assignment order, so they are stable across save/load.
    """

    def __init__(self):
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def __getattr__(self, name):
        buffers = self.__dict__.get("_buffers", {})
        if name in buffers:
            return buffers[name]
        raise AttributeError(f"{type(self).__name__!r} has no attribute {name!r}")

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if key.startswith("_") or key == "training":
                continue
            if isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{key}.{i}", item
            elif isinstance(val, (Module, Parameter)):
                yield key, val

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen = set()
        for name, child in self._children():
            full = prefix + name
            if isinstance(child, Parameter):
                if id(child) in seen:
                    continue
                seen.add(id(child))
                child.name = full
                yield full, child
            else:
                for sub in child.named_parameters(full + "."):
                    if id(sub[1]) not in seen:
                        seen.add(id(sub[1]))
                        yield sub

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in self._buffers.items():
            yield prefix + name, val
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (e.g. float64 for gradient checks)."""
        dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for k, v in m._buffers.items():
                m._buffers[k] = v.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {}
        for m_name, m in self._named_modules():
            for k in m._buffers:
                buffers[m_name + k] = (m, k)
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, (m, k) in buffers.items():
            m._buffers[k] = np.array(state[name], dtype=m._buffers[k].dtype)

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child._named_modules(prefix + name + ".")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Conv(Module):
    """N-d convolution without bias (a norm layer always follows)."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0):
        super().__init__()
        kernel = (kernel,) if isinstance(kernel, int) else tuple(kernel)
        fan_in = c_in * int(np.prod(kernel))
        self.weight = Parameter(kaiming_normal(rng, (c_out, c_in) + kernel, fan_in))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv(x, self.weight, self.stride, self.padding,
                        op=f"conv{self.weight.ndim - 2}d")


class Linear(Module):
    def __init__(self, c_in, c_out, rng, zero_bias: bool = False):
        super().__init__()
        self.weight = Parameter(uniform_fan_in(rng, (c_in, c_out), c_in))
        bias = np.zeros(c_out) if zero_bias else uniform_fan_in(rng, (c_out,), c_in)
        self.bias = Parameter(bias)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, ops.reshape(self.bias, (1,) * (y.ndim - 1) + (-1,)))


class BatchNorm(Module):
    """Batch norm over channel axis 1 with running statistics (momentum 0.1, eps 1e-5)."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=default_dtype()))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return ops.batch_norm(x, self.gain, self.bias, self._buffers["running_mean"],
                              self._buffers["running_var"], self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, self.gain, self.bias, self.eps)
