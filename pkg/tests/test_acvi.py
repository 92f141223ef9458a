import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ral import ops
from ral.acvi import ACVI, cross_view_interact, scaled_dot_attention
from ral.errors import DimensionError
from ral.gradcheck import check_module_params
from ral.tensor import Tensor, no_grad, precision


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def acvi64(c, seed=0, alpha=0.0, **kw):
    return ACVI(c, np.random.default_rng(seed), alpha_init=alpha, **kw).astype(np.float64)


def _softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def test_single_token_returns_value():
    rng = np.random.default_rng(0)
    q, k, v = (rng.standard_normal((1, 4)) for _ in range(3))
    with precision("f64"):
        out = scaled_dot_attention(t(q), t(k), t(v)).data
    np.testing.assert_allclose(out, v, rtol=1e-15)


def test_identical_keys_average_values():
    rng = np.random.default_rng(1)
    q = rng.standard_normal((5, 3))
    k = np.tile(rng.standard_normal((1, 3)), (5, 1))
    v = rng.standard_normal((5, 3))
    with precision("f64"):
        out = scaled_dot_attention(t(q), t(k), t(v)).data
    np.testing.assert_allclose(out, np.tile(v.mean(0), (5, 1)), rtol=1e-13)


def test_attention_matches_direct_recompute():
    rng = np.random.default_rng(2)
    q, k, v = (rng.standard_normal((6, 4)) for _ in range(3))
    with precision("f64"):
        out, w = scaled_dot_attention(t(q), t(k), t(v), return_weights=True)
    assert np.all(w.data >= 0)
    assert np.max(np.abs(w.data.sum(-1) - 1)) < 1e-9
    ref = _softmax(q @ k.T / 2.0) @ v
    np.testing.assert_allclose(out.data, ref, rtol=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 5)), elements=st.floats(-20, 20, width=64)),
       st.integers(0, 100))
def test_attention_rows_are_distributions(q, seed):
    k = np.random.default_rng(seed).standard_normal(q.shape) * 5
    with precision("f64"):
        _, w = scaled_dot_attention(t(q), t(k), t(k), return_weights=True)
    assert np.all(w.data >= 0)
    assert np.all(np.abs(w.data.sum(-1) - 1) < 1e-9)


def test_attention_channel_mismatch():
    with pytest.raises(DimensionError):
        scaled_dot_attention(t(np.ones((3, 4))), t(np.ones((3, 5))), t(np.ones((3, 5))))


def test_view_shape_mismatch():
    with pytest.raises(DimensionError):
        cross_view_interact(t(np.ones((1, 3, 2, 2))), t(np.ones((1, 3, 2, 3))), acvi64(3))


def test_zero_alpha_is_exact_passthrough():
    rng = np.random.default_rng(3)
    xl, xr = rng.standard_normal((2, 2, 4, 3, 3))
    with precision("f64"):
        ml, mr = acvi64(4)(t(xl), t(xr))
    assert np.array_equal(ml.data, xl) and np.array_equal(mr.data, xr)


def test_output_shapes_match_inputs():
    rng = np.random.default_rng(4)
    xl, xr = rng.standard_normal((2, 3, 4, 5, 2))
    with precision("f64"):
        ml, mr = acvi64(4, alpha=0.5)(t(xl), t(xr))
    assert ml.shape == xl.shape and mr.shape == xr.shape


def _mirror(p: ACVI):
    p.w1_r.data[...] = p.w1_l.data
    p.w2_r.data[...] = p.w2_l.data
    p.ln_r.gain.data[...] = p.ln_l.gain.data
    p.ln_r.bias.data[...] = p.ln_l.bias.data
    p.alpha_r.data[...] = p.alpha_l.data
    return p


def test_swap_symmetry_with_mirrored_parameters():
    rng = np.random.default_rng(5)
    p = _mirror(acvi64(4, seed=6, alpha=0.8))
    p.ln_l.gain.data[...] = rng.uniform(0.5, 1.5, 4)
    p.ln_l.bias.data[...] = rng.standard_normal(4) * 0.1
    _mirror(p)
    xl, xr = rng.standard_normal((2, 2, 4, 3, 3))
    with precision("f64"):
        ml, mr = p(t(xl), t(xr))
        sl, sr = p(t(xr), t(xl))
    np.testing.assert_allclose(sl.data, mr.data, rtol=0, atol=1e-6)
    np.testing.assert_allclose(sr.data, ml.data, rtol=0, atol=1e-6)


def test_values_come_from_unnormalised_other_view():
    rng = np.random.default_rng(7)
    p = acvi64(3, alpha=1.0)
    xr = rng.standard_normal((1, 3, 2, 4)) * 3 + 1
    with precision("f64"), no_grad():
        ml, _ = p(t(np.zeros_like(xr)), t(xr))
    # zero left view: normalised queries are zero, so attention is uniform
    tokens = xr.reshape(3, -1).T
    expect = (tokens @ p.w2_r.data).mean(0)
    np.testing.assert_allclose(ml.data[0].reshape(3, -1).T, np.tile(expect, (8, 1)), rtol=1e-12)


def test_parameter_count():
    c = 5
    p = acvi64(c)
    assert p.num_parameters() == 4 * c * c + 2 * 2 * c + 2
    shared = acvi64(c, shared_ln=True)
    assert shared.num_parameters() == 4 * c * c + 2 * c + 2


def test_unbatched_input():
    rng = np.random.default_rng(8)
    xl, xr = rng.standard_normal((2, 4, 3, 3))
    with precision("f64"):
        ml, mr = acvi64(4, alpha=0.3)(t(xl), t(xr))
        bl, br = acvi64(4, alpha=0.3)(t(xl[None]), t(xr[None]))
    assert np.array_equal(ml.data, bl.data[0]) and np.array_equal(mr.data, br.data[0])


def test_gradients_over_all_parameters():
    rng = np.random.default_rng(9)
    with precision("f64"):
        p = acvi64(4, seed=10, alpha=0.7)
        xl, xr = rng.standard_normal((2, 4, 3, 3))
        pl, pr = rng.standard_normal((2, 4, 3, 3))

        def loss():
            ml, mr = p(t(xl), t(xr))
            return ops.add(ops.sum_(ops.mul(ml, t(pl))), ops.sum_(ops.mul(mr, t(pr))))

        res = check_module_params("acvi", p, loss, tol=1e-5)
    assert res.passed, res.line()
    assert res.checked == p.num_parameters()
