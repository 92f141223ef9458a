import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from ral import ops
from ral.errors import DimensionError
from ral.gradcheck import check_tiny_model
from ral.model import RalConfig, RalModel, load_checkpoint, save_checkpoint
from ral.rao import hidden_width
from ral.tensor import Tensor, no_grad, precision


def tiny(**kw):
    base = dict(num_classes=3, frontend_channels=4, stage_channels=[4, 6], blocks_per_stage=[1, 1],
                acvi_after_stage=[True, True], decoder_channels=6, ms_tcn_kernels=[3], dropout=0.0)
    base.update(kw)
    return RalConfig(**base)


def clip(rng, b=2, t=5, h=16, w=16):
    return rng.standard_normal((b, 1, t, h, w))


# -- independent numpy forward for the all-off model ---------------------------------

def np_conv(x, w, stride, pad):
    nd = w.ndim - 2
    stride = (stride,) * nd if isinstance(stride, int) else stride
    pad = (pad,) * nd if isinstance(pad, int) else pad
    x = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    win = sliding_window_view(x, w.shape[2:], axis=tuple(range(2, 2 + nd)))
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    out_ax, k_ax = "defg"[:nd], "pqrs"[:nd]
    return np.einsum(f"bc{out_ax}{k_ax},oc{k_ax}->bo{out_ax}", win, w)


def np_bn(x, state, prefix):
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    mu = x.mean(axis=axes, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * state[prefix + ".gain"].reshape(shape) + state[prefix + ".bias"].reshape(shape)


def np_baseline_forward(x, s, cfg):
    relu = lambda a: np.maximum(a, 0)
    f = relu(np_bn(np_conv(x, s["frontend.conv.weight"], (1, 2, 2), (2, 3, 3)), s, "frontend.norm"))
    b, c, t, h, w = f.shape
    f = f.reshape(b, c, t, h // 2, 2, w // 2, 2).max(axis=(4, 6))
    h = f.transpose(0, 2, 1, 3, 4).reshape(b * t, c, h // 2, w // 2)
    for i, nb in enumerate(cfg.blocks_per_stage):
        for j in range(nb):
            p = f"stages.{i}.blocks.{j}."
            r = relu(np_bn(np_conv(h, s[p + "res.conv1.weight"], 1, 1), s, p + "res.norm1"))
            r = relu(np_bn(np_conv(r, s[p + "res.conv2.weight"], 1, 1), s, p + "res.norm2"))
            skip = h
            if p + "res.skip.conv.weight" in s:
                skip = np_bn(np_conv(h, s[p + "res.skip.conv.weight"], 1, 0), s, p + "res.skip.norm")
            h = skip + r
            m = relu(np_bn(np_conv(h, s[p + "mod.conv1.weight"], 1, 1), s, p + "mod.norm1"))
            h = h + np_bn(np_conv(m, s[p + "mod.conv2.weight"], 1, 1), s, p + "mod.norm2")
    emb = h.mean(axis=(2, 3)).reshape(b, t, -1).transpose(0, 2, 1)
    for li in range(cfg.decoder_layers):
        outs = [np_conv(emb, s[f"decoder.{li}.branches.{k}.weight"], 1, ks // 2)
                for k, ks in enumerate(cfg.ms_tcn_kernels)]
        emb = relu(np_bn(np.concatenate(outs, axis=1), s, f"decoder.{li}.norm"))
    return emb.mean(axis=2) @ s["classifier.weight"] + s["classifier.bias"]


def test_output_shape():
    cfg = tiny(num_classes=10, stage_channels=[4], blocks_per_stage=[1], acvi_after_stage=[True])
    model = RalModel(cfg)
    out = model(Tensor(clip(np.random.default_rng(0), b=2, t=8, h=32, w=32).astype(np.float32)))
    assert out.shape == (2, 10)


@pytest.mark.parametrize("kernels", [[3], [3, 5]])
def test_all_switches_off_matches_hand_assembled_baseline(kernels):
    cfg = tiny(enable_dlsv=False, enable_rao=False, enable_acvi=False, ms_tcn_kernels=kernels)
    rng = np.random.default_rng(1)
    model = RalModel(cfg, seed=2).astype(np.float64)
    for _, p in model.named_parameters():
        if p.data.ndim == 1:
            p.data[...] = rng.uniform(0.5, 1.5, p.shape) if "gain" in _ else rng.standard_normal(p.shape) * 0.1
    x = clip(rng, t=6, h=16, w=20)
    with precision("f64"), no_grad():
        got = model(Tensor(x)).data
    state = {k: v.astype(np.float64) for k, v in model.state_dict().items()}
    np.testing.assert_allclose(got, np_baseline_forward(x, state, cfg), rtol=1e-9, atol=1e-12)


def test_baseline_has_no_acvi_or_rao_parameters():
    names = [n for n, _ in RalModel(tiny(enable_dlsv=False, enable_rao=False, enable_acvi=False)).named_parameters()]
    assert not any("rao" in n or "acvi" in n for n in names)


def test_parameter_bookkeeping():
    full = RalModel(tiny()).num_parameters()
    no_dlsv = RalModel(tiny(enable_dlsv=False)).num_parameters()
    no_rao = RalModel(tiny(enable_rao=False)).num_parameters()
    no_acvi = RalModel(tiny(enable_acvi=False)).num_parameters()
    base = RalModel(tiny(enable_dlsv=False, enable_rao=False, enable_acvi=False)).num_parameters()
    assert full == no_dlsv
    rao_extra = sum(c * hidden_width(c) * 2 + hidden_width(c) + c for c in [4, 6])
    assert full - no_rao == rao_extra
    acvi_extra = sum(4 * c * c + 4 * c + 2 for c in [4, 6])
    assert full - no_acvi == acvi_extra
    assert base < full and base == full - rao_extra - acvi_extra


def test_acvi_after_stage_flags_are_respected():
    partial = RalModel(tiny(acvi_after_stage=[False, True]))
    names = [n for n, _ in partial.named_parameters() if n.startswith("acvi")]
    assert names and all(n.startswith("acvi.1.") for n in names)


def test_clip_shorter_than_kernel_rejected():
    model = RalModel(tiny(ms_tcn_kernels=[3, 5], decoder_channels=6))
    with pytest.raises(DimensionError):
        model(Tensor(np.zeros((1, 1, 2, 16, 16), dtype=np.float32)))


def test_rejects_non_grayscale_input():
    with pytest.raises(DimensionError):
        RalModel(tiny())(Tensor(np.zeros((1, 3, 4, 16, 16), dtype=np.float32)))


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(3)
    model = RalModel(tiny(acvi_alpha_init=0.4), seed=4)
    x = Tensor(clip(rng).astype(np.float32))
    model(x)  # move running statistics away from their initial values
    model.eval()
    with no_grad():
        ref = model(x).data
    save_checkpoint(model, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt").eval()
    with no_grad():
        out = loaded(x).data
    assert out.tobytes() == ref.tobytes()
    for (na, a), (nb, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert na == nb and a.tobytes() == b.tobytes()


def test_loss_is_finite_over_random_batches():
    rng = np.random.default_rng(5)
    model = RalModel(tiny(stage_channels=[4], blocks_per_stage=[1], acvi_after_stage=[True], acvi_alpha_init=1.0))
    with no_grad():
        for _ in range(1000):
            x = Tensor((clip(rng, b=2, t=3, h=16, w=16) * rng.uniform(0.01, 50)).astype(np.float32))
            loss = ops.cross_entropy_logits(model(x), rng.integers(0, 3, 2))
            assert np.isfinite(loss.item())


def test_end_to_end_gradient_check():
    res = check_tiny_model()
    assert res.passed, res.line()
