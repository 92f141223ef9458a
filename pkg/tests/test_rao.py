import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ral import ops
from ral.errors import ContractError, DimensionError
from ral.gradcheck import check_module_params
from ral.rao import (DRSBlock, RAO, ThresholdSubnet, drsblock_forward, estimate_threshold,
                     hidden_width, soft_threshold)
from ral.tensor import Tensor, no_grad, precision

vals = st.floats(-4, 4, allow_nan=False, width=64)
maps = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)), elements=vals)


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def subnet64(c, seed=0):
    return ThresholdSubnet(c, np.random.default_rng(seed)).astype(np.float64)


def reference_threshold(x, net):
    """Threshold recomputed directly in numpy from the subnet weights."""
    m = np.abs(x).mean(axis=(1, 2))
    h = np.maximum(m @ net.fc1.weight.data + net.fc1.bias.data, 0)
    f = h @ net.fc2.weight.data + net.fc2.bias.data
    return (1 / (1 + np.exp(-f))) * m


def test_hidden_width_floor():
    assert hidden_width(64) == 16 and hidden_width(8) == 4 and hidden_width(3) == 4


def test_zero_input_gives_zero_threshold():
    with precision("f64"):
        tau = estimate_threshold(t(np.zeros((3, 4, 4))), subnet64(3))
    assert tau.shape == (3, 1, 1) and np.all(tau.data == 0)


def test_zero_subnet_gives_half_magnitude():
    with precision("f64"):
        net = subnet64(2)
        for p in net.parameters():
            p.data[...] = 0
        x = np.stack([np.full((3, 3), -1.5), np.full((3, 3), 0.8)])
        x[0, 1, 1] = 1.5  # constant magnitude, mixed sign
        tau = estimate_threshold(t(x), net).data.reshape(-1)
    np.testing.assert_allclose(tau, [0.75, 0.4], rtol=1e-15)


def test_threshold_matches_reference_and_bounds():
    rng = np.random.default_rng(1)
    with precision("f64"):
        for seed in range(20):
            net = subnet64(5, seed)
            x = rng.standard_normal((5, 4, 3)) * rng.uniform(0.1, 3)
            tau = estimate_threshold(t(x), net).data.reshape(-1)
            ref = reference_threshold(x, net)
            np.testing.assert_allclose(tau, ref, rtol=1e-12)
            gap = np.abs(x).mean(axis=(1, 2))
            assert np.all(tau > 0) and np.all(tau < gap)


def test_threshold_zero_exactly_on_zero_channel():
    x = np.random.default_rng(2).standard_normal((3, 4, 4))
    x[1] = 0
    with precision("f64"):
        tau = estimate_threshold(t(x), subnet64(3)).data.reshape(-1)
    assert tau[1] == 0 and tau[0] > 0 and tau[2] > 0


def test_threshold_is_per_sample():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 3, 3))
    net = subnet64(4)
    with precision("f64"):
        batched = estimate_threshold(t(x), net).data
        single = [estimate_threshold(t(x[i]), net).data for i in range(2)]
    np.testing.assert_array_equal(batched[0], single[0])
    np.testing.assert_array_equal(batched[1], single[1])


def test_threshold_channel_mismatch():
    with pytest.raises(DimensionError):
        estimate_threshold(t(np.ones((3, 2, 2))), subnet64(4))


def test_soft_threshold_examples():
    with precision("f64"):
        tau = t(np.full((1, 1, 1), 0.2))
        for x, y in [(0.5, 0.3), (-0.1, 0.0), (-0.7, -0.5)]:
            out = soft_threshold(t(np.full((1, 1, 1), x)), tau).data.item()
            assert out == pytest.approx(y, abs=1e-15)


def test_soft_threshold_rejects_negative_tau():
    with pytest.raises(ContractError):
        soft_threshold(t(np.ones((2, 2, 2))), t(np.array([[[0.1]], [[-0.1]]])))


def test_drsblock_zero_weights_is_identity():
    rng = np.random.default_rng(4)
    block = DRSBlock(3, 3, rng, use_rao=True).astype(np.float64)
    for name, p in block.named_parameters():
        if "conv" in name and name.endswith("weight"):
            p.data[...] = 0
    x = rng.standard_normal((2, 3, 5, 5))
    with precision("f64"):
        for mode in (True, False):
            block.train(mode)
            out = drsblock_forward(t(x), block).data
            np.testing.assert_array_equal(out, x)


def test_drsblock_shape_and_finiteness():
    rng = np.random.default_rng(5)
    block = DRSBlock(3, 6, rng, use_rao=True)
    out = block(Tensor(rng.standard_normal((2, 3, 7, 5)).astype(np.float32)))
    assert out.shape == (2, 6, 7, 5) and np.all(np.isfinite(out.data))


def test_rao_adds_exactly_subnet_parameters():
    plain = DRSBlock(8, 8, np.random.default_rng(0), use_rao=False)
    gated = DRSBlock(8, 8, np.random.default_rng(0), use_rao=True)
    c, h = 8, hidden_width(8)
    assert gated.num_parameters() - plain.num_parameters() == c * h + h + h * c + c


def test_drsblock_parameter_gradients():
    rng = np.random.default_rng(6)
    with precision("f64"):
        block = DRSBlock(2, 3, rng, use_rao=True).astype(np.float64)
        x = rng.standard_normal((2, 2, 4, 4))
        proj = rng.standard_normal((2, 3, 4, 4))
        res = check_module_params("drsblock", block,
                                  lambda: ops.sum_(ops.mul(block(Tensor(x)), Tensor(proj))), tol=1e-5)
    assert res.passed, res.line()


def test_rao_module_zeroes_dead_zone():
    rng = np.random.default_rng(7)
    rao = RAO(4, rng).astype(np.float64)
    x = rng.standard_normal((1, 4, 6, 6))
    with precision("f64"), no_grad():
        y = rao(t(x)).data
        tau = estimate_threshold(t(x), rao.subnet).data
    dead = np.abs(x) <= tau
    assert np.all(y[dead] == 0) and np.all(y[~dead] != 0)


# -- properties of the soft threshold ------------------------------------------------

@given(maps, st.data())
def test_shrinkage_and_sign(x, data):
    tau = data.draw(arrays(np.float64, (x.shape[0], 1, 1), elements=st.floats(0, 3, width=64)))
    with precision("f64"):
        y = soft_threshold(t(x), t(tau)).data
    assert np.all(np.abs(y) <= np.abs(x))
    assert np.all((y == 0) | (np.sign(y) == np.sign(x)))


# multiples of 2^-10: differences are exact in float64, so the bound can be
# checked with no tolerance
grid = st.integers(-4096, 4096).map(lambda k: k / 1024)


@given(st.data())
def test_one_lipschitz(data):
    shape = data.draw(st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)))
    x1 = data.draw(arrays(np.float64, shape, elements=grid))
    x2 = data.draw(arrays(np.float64, shape, elements=grid))
    tau = np.abs(data.draw(arrays(np.float64, (shape[0], 1, 1), elements=grid)))
    with precision("f64"):
        y1 = soft_threshold(t(x1), t(tau)).data
        y2 = soft_threshold(t(x2), t(tau)).data
    assert np.all(np.abs(y1 - y2) <= np.abs(x1 - x2))


@given(maps, st.data())
def test_zero_count_monotone_in_tau(x, data):
    tau = data.draw(arrays(np.float64, (x.shape[0], 1, 1), elements=st.floats(0, 3, width=64)))
    bump = data.draw(arrays(np.float64, (x.shape[0], 1, 1), elements=st.floats(0, 2, width=64)))
    with precision("f64"):
        z1 = np.count_nonzero(soft_threshold(t(x), t(tau)).data == 0)
        z2 = np.count_nonzero(soft_threshold(t(x), t(tau + bump)).data == 0)
    assert z2 >= z1


@given(maps, st.integers(0, 50))
def test_never_all_zero(x, seed):
    mags = np.abs(x)
    if not np.any(mags.max(axis=(1, 2)) > mags.mean(axis=(1, 2))):
        return
    with precision("f64"):
        net = subnet64(x.shape[0], seed)
        tau = estimate_threshold(t(x), net)
        y = soft_threshold(t(x), tau).data
    assert np.count_nonzero(y) > 0
