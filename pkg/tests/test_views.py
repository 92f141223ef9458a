import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ral import ops
from ral.errors import ContractError, DimensionError
from ral.rao import DRSBlock
from ral.tensor import Tensor, backward, no_grad, precision
from ral.views import SharedEncoder, ViewPair, encode_shared, flip_h, reassemble, split_views


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def columns(width):
    return np.arange(width, dtype=np.float64).reshape(1, 1, width)


def test_even_split_example():
    pair = split_views(t(columns(4)))
    assert pair.left.data.ravel().tolist() == [0, 1]
    assert pair.right.data.ravel().tolist() == [3, 2]
    assert pair.mirrored_right and pair.original_width == 4


def test_odd_split_shares_centre_column():
    pair = split_views(t(columns(5)))
    assert pair.left.data.ravel().tolist() == [0, 1, 2]
    assert pair.right.data.ravel().tolist() == [4, 3, 2]


def test_width_one_rejected():
    with pytest.raises(DimensionError):
        split_views(t(np.ones((2, 3, 1))))


def test_symmetric_input_gives_equal_views():
    x = np.random.default_rng(0).standard_normal((3, 4, 3))
    sym = np.concatenate([x, x[..., ::-1]], axis=-1)
    pair = split_views(t(sym))
    assert np.array_equal(pair.left.data, pair.right.data)


@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 6).map(lambda k: 2 * k)),
              elements=st.floats(-10, 10, width=64)))
def test_even_round_trip_bit_exact(x):
    with precision("f64"):
        assert np.array_equal(reassemble(split_views(t(x))).data, x)


def test_odd_round_trip_averages_centre():
    x = np.random.default_rng(1).standard_normal((2, 3, 5))
    with precision("f64"):
        pair = split_views(t(x))
        pair = ViewPair(pair.left, ops.scalar_mul(pair.right, 3.0), 5)
        out = reassemble(pair).data
    expect = np.concatenate([x[..., :2], (x[..., 2:3] + 3 * x[..., 2:3]) / 2, 3 * x[..., 3:]], axis=-1)
    np.testing.assert_allclose(out, expect, rtol=1e-15)


def test_odd_round_trip_exact_for_symmetric_input():
    half = np.random.default_rng(2).standard_normal((2, 3, 3))
    x = np.concatenate([half, half[..., 1::-1]], axis=-1)
    with precision("f64"):
        assert np.array_equal(reassemble(split_views(t(x))).data, x)


def test_reassemble_rejects_inconsistent_width():
    pair = split_views(t(np.ones((1, 2, 6))))
    with pytest.raises(ContractError):
        reassemble(ViewPair(pair.left, pair.right, 8))


def _encoder(rng, c_in=3, c=4):
    return SharedEncoder([DRSBlock(c_in, c, rng, use_rao=True), DRSBlock(c, c, rng, use_rao=True)]).astype(np.float64)


def test_identical_views_stay_identical():
    rng = np.random.default_rng(3)
    enc = _encoder(rng)
    v = rng.standard_normal((2, 3, 5, 4))
    with precision("f64"):
        out = encode_shared(ViewPair(t(v), t(v.copy()), 8), enc)
    assert np.array_equal(out.left.data, out.right.data)


def test_unbatched_views_are_supported():
    rng = np.random.default_rng(4)
    enc = _encoder(rng).eval()
    x = rng.standard_normal((3, 5, 6))
    with precision("f64"):
        out = encode_shared(split_views(t(x)), enc)
    assert out.left.shape == (4, 5, 3) and out.right.shape == (4, 5, 3)


@pytest.mark.parametrize("width", [6, 7])
def test_mirror_swap_equivariance_eval_mode(width):
    rng = np.random.default_rng(width)
    enc = _encoder(rng).eval()
    x = rng.standard_normal((2, 3, 5, width))
    with precision("f64"), no_grad():
        a = encode_shared(split_views(t(x)), enc)
        b = encode_shared(split_views(flip_h(t(x))), enc)
    assert np.array_equal(a.left.data, b.right.data)
    assert np.array_equal(a.right.data, b.left.data)


def test_mirror_swap_equivariance_train_mode_to_rounding():
    rng = np.random.default_rng(8)
    enc = _encoder(rng).train()
    x = rng.standard_normal((2, 3, 5, 6))
    with precision("f64"), no_grad():
        a = encode_shared(split_views(t(x)), enc)
        b = encode_shared(split_views(flip_h(t(x))), enc)
    np.testing.assert_allclose(a.left.data, b.right.data, rtol=0, atol=1e-13)


def test_both_views_feed_shared_gradients():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 3, 4, 6))
    grads = {}
    for mask_right in (False, True):
        enc = _encoder(np.random.default_rng(10)).eval()
        with precision("f64"):
            out = encode_shared(split_views(t(x)), enc)
            loss = ops.sum_(ops.mul(out.left, out.left))
            if not mask_right:
                loss = ops.add(loss, ops.sum_(ops.mul(out.right, out.right)))
            backward(loss)
        grads[mask_right] = enc.blocks[0].res.conv1.weight.grad.copy()
    assert np.abs(grads[True]).sum() > 0
    assert not np.allclose(grads[True], grads[False])


def test_two_view_encoder_has_single_view_parameter_count():
    enc = _encoder(np.random.default_rng(11))
    single = _encoder(np.random.default_rng(11))
    names = [n for n, _ in enc.named_parameters()]
    assert len(names) == len(set(names))
    assert enc.num_parameters() == single.num_parameters()
