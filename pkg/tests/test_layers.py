import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from caesr import layers
from caesr.layers import (GDN, Conv2d, MaskedConv2d, causal_mask, conv2d, gdn, grad_check, leaky_relu,
                          load_weights, masked_conv2d, relu, save_weights, subpixel_downscale,
                          subpixel_upscale)


def test_conv_identity_and_sum():
    x = torch.randn(1, 1, 6, 6)
    assert torch.equal(conv2d(x, torch.ones(1, 1, 1, 1)), x)
    out = conv2d(torch.ones(1, 1, 6, 6), torch.ones(1, 1, 3, 3))
    assert torch.all(out[0, 0, 1:-1, 1:-1] == 9.0)
    assert out[0, 0, 0, 0] == 4.0  # zero padding at the corner
    assert conv2d(torch.ones(1, 1, 8, 8), torch.ones(1, 1, 3, 3), stride=2).shape == (1, 1, 4, 4)
    assert conv2d(torch.ones(1, 1, 7, 7), torch.ones(1, 1, 3, 3), stride=2).shape == (1, 1, 4, 4)


def test_conv_matches_direct_sum(rng):
    x = torch.from_numpy(rng.normal(size=(1, 2, 5, 5)))
    w = torch.from_numpy(rng.normal(size=(3, 2, 3, 3)))
    out = conv2d(x, w).numpy()
    xp = np.pad(x.numpy(), ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                ref[o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o].numpy())
    assert np.allclose(out[0], ref)


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        conv2d(torch.ones(1, 2, 4, 4), torch.ones(1, 3, 3, 3))


def test_gdn_examples():
    beta, gamma = torch.ones(1), torch.ones(1, 1)
    assert gdn(torch.zeros(1, 1, 2, 2), beta, gamma).abs().sum() == 0
    x = torch.full((1, 1, 1, 1), 2.0)
    assert gdn(x, beta, gamma).item() == pytest.approx(2 / np.sqrt(5))
    assert gdn(x, beta, gamma, inverse=True).item() == pytest.approx(2 * np.sqrt(5))
    y = torch.randn(1, 3, 4, 4)
    assert torch.allclose(gdn(y, torch.ones(3), torch.zeros(3, 3)), y)
    with pytest.raises(ValueError):
        gdn(y, torch.zeros(3), torch.zeros(3, 3))
    with pytest.raises(ValueError):
        gdn(y, torch.ones(2), torch.zeros(2, 2))


def test_gdn_igdn_inverse_when_gamma_zero():
    x = torch.randn(2, 4, 5, 5, dtype=torch.float64)
    beta = torch.rand(4, dtype=torch.float64) + 0.5
    g = torch.zeros(4, 4, dtype=torch.float64)
    back = gdn(gdn(x, beta, g), beta, g, inverse=True)
    assert torch.max(torch.abs(back - x) / x.abs().clamp(min=1e-12)) < 1e-5


def test_activations():
    assert leaky_relu(torch.tensor(-1.0)).item() == pytest.approx(-0.01)
    assert relu(torch.tensor(-3.0)) == 0 and relu(torch.tensor(3.0)) == 3
    assert torch.allclose(leaky_relu(torch.tensor([-2.0, 0.0, 2.0])), torch.tensor([-0.02, 0.0, 2.0]))


def test_subpixel():
    x = torch.tensor([1.0, 2.0, 3.0, 4.0]).view(1, 4, 1, 1)
    assert torch.equal(subpixel_upscale(x, 2)[0, 0], torch.tensor([[1.0, 2.0], [3.0, 4.0]]))
    y = torch.randn(8, 4, 4)
    assert subpixel_upscale(y, 2).shape == (2, 8, 8)
    assert torch.equal(subpixel_upscale(y, 1), y)
    assert torch.equal(subpixel_downscale(subpixel_upscale(y, 2), 2), y)
    with pytest.raises(ValueError):
        subpixel_upscale(torch.randn(3, 2, 2), 2)


@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 7), st.integers(0, 1))
def test_subpixel_index_map(h, w, c, _):
    x = torch.arange(8 * 4 * 4, dtype=torch.float64).view(8, 4, 4)
    out = subpixel_upscale(x, 2)
    co, i, j = c // 4, (c % 4) // 2, c % 2
    assert out[co, 2 * h + i, 2 * w + j] == x[c, h, w]


def test_causal_mask():
    m = causal_mask(5, "A")
    assert int(m.sum()) == 12
    assert m[2, 2] == 0 and causal_mask(5, "B")[2, 2] == 1
    with pytest.raises(ValueError):
        causal_mask(4)
    w = torch.zeros(1, 1, 5, 5)
    w[0, 0, 2, 2] = 1
    assert masked_conv2d(torch.randn(1, 1, 6, 6), w).abs().sum() == 0


def test_masked_conv_causality_fuzz():
    gen = torch.Generator().manual_seed(0)
    w = torch.randn(2, 2, 5, 5, generator=gen)
    x = torch.randn(1, 2, 7, 7, generator=gen)
    base = masked_conv2d(x, w)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        t = int(rng.integers(49))
        c = int(rng.integers(2))
        x2 = x.clone()
        x2[0, c, t // 7, t % 7] += float(rng.normal()) * 10
        out = masked_conv2d(x2, w)
        diff = (out != base).any(dim=1)[0].flatten()
        assert not diff[:t + 1].any()


def test_modules_init_and_projection():
    torch.manual_seed(0)
    c = Conv2d(16, 8, 3)
    assert torch.all(c.bias == 0)
    std = 1 / np.sqrt(16 * 9)
    assert c.weight.abs().max() <= 2 * std + 1e-7
    g = GDN(4)
    assert torch.all(g.beta == 1) and torch.allclose(g.gamma, 0.1 * torch.eye(4))
    with torch.no_grad():
        g.beta.fill_(-1)
        g.gamma.fill_(-0.5)
    g.project_()
    assert torch.all(g.beta > 0) and torch.all(g.gamma >= 0)
    m = MaskedConv2d(2, 4, 5)
    assert torch.all(m.masked_weight()[:, :, 2, 2:] == 0)


def test_weights_file_layout(tmp_path):
    t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "bb": np.array([1.5], dtype=np.float32)}
    save_weights(tmp_path / "w.bin", t)
    raw = (tmp_path / "w.bin").read_bytes()
    assert raw[:4] == (1).to_bytes(4, "little") and raw[4:5] == b"a"
    assert raw[5:9] == (2).to_bytes(4, "little")
    back = load_weights(tmp_path / "w.bin")
    assert list(back) == ["a", "bb"] and np.array_equal(back["a"], t["a"])
    (tmp_path / "bad.bin").write_bytes(raw[:-2])
    with pytest.raises(ValueError):
        load_weights(tmp_path / "bad.bin")


def test_grad_check_examples():
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(1, 3, 4, 4, generator=gen)
    w = torch.randn(2, 3, 1, 1, generator=gen)
    rep = grad_check(lambda a, b: conv2d(a, b), [x, w], name="conv1x1", tolerance=1e-6)
    assert rep.ok, rep
    rep = grad_check(lambda a: subpixel_upscale(a, 2), [torch.randn(1, 4, 3, 3, generator=gen)],
                     tolerance=1e-6)
    assert rep.ok, rep
    beta = torch.rand(3, generator=gen) + 0.5
    gamma = torch.rand(3, 3, generator=gen) * 0.2
    rep = grad_check(lambda a, b, g: gdn(a, b, g), [x, beta, gamma], tolerance=1e-3)
    assert rep.ok, rep
    rep = grad_check(lambda a, b, g: gdn(a, b, g, inverse=True), [x, beta, gamma], tolerance=1e-3)
    assert rep.ok, rep


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x * g

    rep = grad_check(Wrong.apply, [torch.randn(5) + 3], tolerance=1e-3)
    assert not rep.ok


def test_project_parameters_on_model():
    from caesr.networks import CodingMode, ModelConfig, build_model
    m = build_model(ModelConfig.reduced(), CodingMode.conditional)
    with torch.no_grad():
        for mod in m.modules():
            if isinstance(mod, GDN):
                mod.beta.fill_(-3)
        m.z_scale.fill_(-1)
    layers.project_parameters_(m)
    assert all(bool((mod.beta > 0).all()) for mod in m.modules() if isinstance(mod, GDN))
    assert bool((m.z_scale > 0).all())
