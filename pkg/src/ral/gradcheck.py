"""
Central finite-difference checks for every differentiable op, the composite
blocks, and a tiny end-to-end model. Everything runs in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .acvi import ACVI, cross_view_interact, scaled_dot_attention
from .model import RalConfig, RalModel
from .rao import DRSBlock, ThresholdSubnet, estimate_threshold, soft_threshold
from .tensor import Tensor, backward, no_grad, precision

EPS = 1e-5
OP_TOL = 1e-6
BLOCK_TOL = 1e-5
MODEL_TOL = 1e-4
# denominator floor for the relative error; only guards 0/0
REL_FLOOR = 1e-8


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    worst: str  # "<input>[index]" of the worst element
    tol: float
    checked: int
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return (f"{status} {self.name:<24} max rel err {self.max_rel_err:.2e} "
                f"(tol {self.tol:.0e}) worst {self.worst}  n={self.checked}")


def rel_error(a: np.ndarray, n: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_function(name: str, fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                   tol: float = OP_TOL, eps: float = EPS, seed: int = 0,
                   wrt: Optional[Sequence[int]] = None,
                   skip: Optional[Callable[[int, tuple], bool]] = None) -> CheckResult:
    """Compare autodiff against central differences of ``sum(fn(*inputs) * R)``.

    ``R`` is a fixed random projection so every output element contributes.
    ``skip(i, idx)`` excludes elements sitting on a kink.
    """
    start = time.perf_counter()
    with precision("f64"):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        wrt = range(len(arrays)) if wrt is None else wrt
        tensors = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
        out = fn(*tensors)
        proj = np.random.default_rng(seed).standard_normal(out.size)
        loss = ops.sum_(ops.mul(ops.reshape(out, (out.size,)), Tensor(proj)))
        backward(loss)

        def value() -> float:
            with no_grad():
                return float((fn(*[Tensor(a) for a in arrays]).data.reshape(-1) * proj).sum())

        worst, worst_at, count = 0.0, "-", 0
        for i in wrt:
            analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
            a = arrays[i]
            for idx in np.ndindex(a.shape):
                if skip is not None and skip(i, idx):
                    continue
                orig = a[idx]
                a[idx] = orig + eps
                up = value()
                a[idx] = orig - eps
                down = value()
                a[idx] = orig
                numeric = (up - down) / (2 * eps)
                err = float(rel_error(analytic[idx], numeric))
                count += 1
                if err > worst or worst_at == "-":
                    worst, worst_at = max(err, worst), f"input{i}{list(idx)}"
    return CheckResult(name, worst, worst_at, tol, count, time.perf_counter() - start)


def check_module_params(name: str, module, loss_fn: Callable[[], Tensor], tol: float,
                        sample: Optional[int] = None, seed: int = 0, eps: float = EPS) -> CheckResult:
    """Finite-difference check of ``loss_fn`` with respect to ``module``'s parameters.

    With ``sample`` set, only that many randomly chosen parameter elements are
    perturbed.
    """
    start = time.perf_counter()
    params = list(module.named_parameters())
    module.zero_grad()
    backward(loss_fn())
    slots = [(pi, idx) for pi, (_, p) in enumerate(params) for idx in np.ndindex(p.shape)]
    if sample is not None and sample < len(slots):
        rng = np.random.default_rng(seed)
        slots = [slots[i] for i in rng.choice(len(slots), size=sample, replace=False)]
    worst, worst_at = 0.0, "-"
    for pi, idx in slots:
        pname, p = params[pi]
        analytic = p.grad[idx] if p.grad is not None else 0.0
        orig = p.data[idx]
        with no_grad():
            p.data[idx] = orig + eps
            up = float(loss_fn().data)
            p.data[idx] = orig - eps
            down = float(loss_fn().data)
        p.data[idx] = orig
        numeric = (up - down) / (2 * eps)
        err = float(rel_error(np.float64(analytic), numeric))
        if err > worst or worst_at == "-":
            worst, worst_at = max(err, worst), f"{pname}{list(idx)}"
    return CheckResult(name, worst, worst_at, tol, len(slots), time.perf_counter() - start)


# -- the suite ------------------------------------------------------------------------

def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _op_cases(rng: np.random.Generator) -> list[tuple]:
    r = rng.standard_normal
    cases = [
        ("add", lambda a, b: ops.add(a, b), [r((2, 3, 4)), r((2, 3, 4))]),
        ("add_broadcast", lambda a, b: ops.add(a, b), [r((2, 3, 4, 4)), r((1, 3, 1, 1))]),
        ("sub", lambda a, b: ops.sub(a, b), [r((3, 4)), r((3, 4))]),
        ("mul_elementwise", lambda a, b: ops.mul(a, b), [r((2, 3, 4)), r((2, 1, 4))]),
        ("scalar_mul", lambda a: ops.scalar_mul(a, -1.7), [r((3, 5))]),
        ("abs_", ops.abs_, [_away_from_zero(rng, (4, 5))]),
        ("relu", ops.relu, [_away_from_zero(rng, (4, 5))]),
        ("sigmoid", ops.sigmoid, [3 * r((4, 5))]),
        ("reshape", lambda a: ops.reshape(a, (6, 4)), [r((2, 3, 4))]),
        ("transpose", lambda a: ops.transpose(a, (2, 0, 1)), [r((2, 3, 4))]),
        ("getitem", lambda a: ops.getitem(a, (slice(None), slice(1, 3))), [r((3, 4, 2))]),
        ("flip", lambda a: ops.flip(a, -1), [r((2, 3, 5))]),
        ("concat", lambda a, b: ops.concat([a, b], axis=1), [r((2, 3)), r((2, 4))]),
        ("sum", lambda a: ops.sum_(a, axis=1), [r((3, 4, 2))]),
        ("mean", lambda a: ops.mean(a, axis=(0, 2)), [r((3, 4, 2))]),
        ("mean_all", ops.mean_all, [r((3, 4))]),
        ("global_avg_pool", ops.global_avg_pool, [r((2, 3, 4, 5))]),
        ("matmul", ops.matmul, [r((4, 3)), r((3, 5))]),
        ("matmul_batched", ops.matmul, [r((2, 4, 3)), r((2, 3, 5))]),
        ("softmax_lastdim", ops.softmax_lastdim, [2 * r((3, 6))]),
        ("layer_norm", lambda x, g, b: ops.layer_norm(x, g, b),
         [r((2, 5, 6)), 1 + 0.2 * r(6), 0.1 * r(6)]),
        ("batch_norm2d_train",
         lambda x, g, b: ops.batch_norm2d(x, g, b, np.zeros(3), np.ones(3), True),
         [r((2, 3, 3, 4)), 1 + 0.2 * r(3), 0.1 * r(3)]),
        ("batch_norm2d_eval",
         lambda x, g, b: ops.batch_norm2d(x, g, b, 0.1 * np.ones(3), 1.5 * np.ones(3), False),
         [r((2, 3, 3, 4)), 1 + 0.2 * r(3), 0.1 * r(3)]),
        ("cross_entropy_logits", lambda z: ops.cross_entropy_logits(z, [0, 2, 1, 2]), [r((4, 3))]),
        ("dropout", lambda a: ops.dropout(a, 0.3, np.random.default_rng(7)), [r((4, 6))]),
        ("conv1d", lambda x, w: ops.conv1d(x, w, padding=2), [r((2, 3, 7)), r((4, 3, 5))]),
        ("conv2d", lambda x, w: ops.conv2d(x, w, padding=1), [r((2, 5, 5)), r((3, 2, 3, 3))]),
        ("conv2d_strided", lambda x, w: ops.conv2d(x, w, stride=2, padding=1),
         [r((1, 2, 6, 5)), r((3, 2, 3, 3))]),
        ("conv3d", lambda x, w: ops.conv3d(x, w, stride=(1, 2, 2), padding=(1, 1, 1)),
         [r((1, 2, 3, 6, 6)), r((2, 2, 3, 3, 3))]),
        ("max_pool", lambda x: ops.max_pool(x, (1, 2, 2)), [r((1, 2, 2, 4, 4))]),
        ("soft_threshold", soft_threshold, [r((2, 3, 4, 4)), 0.3 + np.abs(r((2, 3, 1, 1)))]),
        ("scaled_dot_attention", scaled_dot_attention, [r((2, 5, 4)), r((2, 6, 4)), r((2, 6, 4))]),
    ]
    return cases


def _soft_threshold_skip(inputs):
    x, tau = inputs

    def skip(i, idx):
        if i == 0:
            t = tau[(idx[0], idx[1], 0, 0)]
            return abs(abs(x[idx]) - t) < 1e-3
        return False
    return skip


def run_suite(tol: Optional[float] = None, seed: int = 0, include_model: bool = True,
              report: Optional[Callable[[str], None]] = None) -> list[CheckResult]:
    """Run every check. ``tol`` overrides all tolerances when given."""
    rng = np.random.default_rng(seed)
    results = []

    def emit(res: CheckResult):
        results.append(res)
        if report is not None:
            report(res.line())

    for name, fn, inputs in _op_cases(rng):
        skip = _soft_threshold_skip(inputs) if name == "soft_threshold" else None
        emit(check_function(name, fn, inputs, tol=tol or OP_TOL, skip=skip))

    with precision("f64"):
        r = rng.standard_normal
        subnet = ThresholdSubnet(4, rng).astype(np.float64)
        x = r((2, 4, 3, 3))
        emit(check_function("rao_threshold", lambda t: estimate_threshold(t, subnet), [x],
                            tol=tol or OP_TOL))
        emit(check_module_params("rao_threshold_params", subnet,
                                 lambda: ops.sum_(ops.mul(estimate_threshold(Tensor(x), subnet),
                                                          Tensor(np.arange(8.0).reshape(2, 4, 1, 1)))),
                                 tol=tol or OP_TOL))

        block = DRSBlock(3, 4, rng, use_rao=True).astype(np.float64)
        bx = r((2, 3, 5, 4))
        bproj = r((2, 4, 5, 4))
        emit(check_function("drsblock", lambda t: block(t), [bx], tol=tol or BLOCK_TOL))
        emit(check_module_params("drsblock_params", block,
                                 lambda: ops.sum_(ops.mul(block(Tensor(bx)), Tensor(bproj))),
                                 tol=tol or BLOCK_TOL))

        acvi = ACVI(3, rng, alpha_init=0.7).astype(np.float64)
        xl, xr = r((2, 3, 3, 2)), r((2, 3, 3, 2))
        pl, pr = r((2, 3, 3, 2)), r((2, 3, 3, 2))

        def acvi_out(a, b):
            ml, mr = cross_view_interact(a, b, acvi)
            return ops.concat([ml, mr], axis=0)
        emit(check_function("acvi", acvi_out, [xl, xr], tol=tol or BLOCK_TOL))

        def acvi_loss():
            ml, mr = cross_view_interact(Tensor(xl), Tensor(xr), acvi)
            return ops.add(ops.sum_(ops.mul(ml, Tensor(pl))), ops.sum_(ops.mul(mr, Tensor(pr))))
        emit(check_module_params("acvi_params", acvi, acvi_loss, tol=tol or BLOCK_TOL))

        if include_model:
            emit(check_tiny_model(tol=tol or MODEL_TOL, seed=seed))
    return results


def tiny_config() -> RalConfig:
    return RalConfig(num_classes=2, frontend_channels=4, stage_channels=[4, 4],
                     blocks_per_stage=[1, 1], acvi_after_stage=[True, True],
                     ms_tcn_kernels=[3], decoder_channels=4, decoder_layers=1,
                     acvi_alpha_init=0.5)


def check_tiny_model(tol: float = MODEL_TOL, seed: int = 0, samples: int = 25) -> CheckResult:
    """End-to-end: 2-sample batch, T=4, 16x16, 2 classes, 25 sampled parameters."""
    with precision("f64"):
        model = RalModel(tiny_config(), seed=seed).astype(np.float64)
        rng = np.random.default_rng(seed + 1)
        x = rng.standard_normal((2, 1, 4, 16, 16))
        labels = np.array([0, 1])

        def loss_fn():
            # same dropout mask on every evaluation
            return ops.cross_entropy_logits(model(Tensor(x), rng=np.random.default_rng(3)), labels)
        return check_module_params("model_end_to_end", model, loss_fn, tol, sample=samples, seed=seed)
