import pytest
import torch

from partreid.focuser import FeatureFocuser, GatedConv2d, apply_attention, foreground_map, pool_parts
from partreid.model import PartReIDNet


def _random_simplex(n, k, h, w, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.softmax(torch.randn(n, k, h, w, generator=g, dtype=torch.float64) * 3, dim=1)


def test_foreground_is_complement_of_background():
    att = torch.zeros(7, 1, 1, dtype=torch.float64)
    att[:, 0, 0] = torch.tensor([0.1, 0.5, 0.4, 0, 0, 0, 0])
    assert float(foreground_map(att)) == pytest.approx(0.9)
    att = torch.zeros(7, 2, 2)
    att[0] = 1.0
    assert (foreground_map(att) == 0).all()
    uniform = torch.full((2, 7, 3, 3), 1 / 7)
    torch.testing.assert_close(foreground_map(uniform), torch.full((2, 1, 3, 3), 6 / 7))
    rand = _random_simplex(3, 7, 4, 4)
    torch.testing.assert_close(foreground_map(rand)[:, 0], 1 - rand[:, 0])


def test_embed_identity_zero_and_shape():
    foc = FeatureFocuser(4, 4)
    with torch.no_grad():
        foc.embed_conv.weight.copy_(torch.eye(4).view(4, 4, 1, 1))
        foc.embed_conv.bias.zero_()
    b = torch.randn(2, 4, 5, 3)
    torch.testing.assert_close(foc.embed(b), b)
    with torch.no_grad():
        foc.embed_conv.weight.zero_()
    assert (foc.embed(b) == 0).all()
    assert FeatureFocuser(256, 128).embed(torch.randn(1, 256, 16, 8)).shape == (1, 128, 16, 8)
    with pytest.raises(ValueError):
        foc.embed(torch.randn(1, 5, 2, 2))


def test_apply_attention_examples():
    k1 = torch.randn(3, 4, 2)
    torch.testing.assert_close(apply_attention(k1, torch.ones(1, 4, 2)), k1)
    assert (apply_attention(k1, torch.zeros(1, 4, 2)) == 0).all()
    k1 = torch.full((5, 1, 1), 2.0)
    torch.testing.assert_close(apply_attention(k1, torch.full((1, 1, 1), 0.25)), torch.full((5, 1, 1), 0.5))
    with pytest.raises(ValueError):
        apply_attention(torch.randn(3, 4, 2), torch.ones(1, 2, 4))


def test_gate_saturation():
    gate = GatedConv2d(3).double()
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    with torch.no_grad():
        gate.gate_conv.weight.zero_()
        gate.gate_conv.bias.fill_(20.0)
    torch.testing.assert_close(gate(x), gate.feature_conv(x), rtol=1e-8, atol=1e-7)
    with torch.no_grad():
        gate.gate_conv.bias.fill_(-20.0)
    assert gate(x).abs().max() < 1e-7 * (1 + gate.feature_conv(x).abs().max())


def test_gate_on_zero_input_is_bias_product():
    gate = GatedConv2d(3).double()
    q = gate(torch.zeros(1, 3, 4, 5, dtype=torch.float64))
    expected = gate.feature_conv.bias * torch.sigmoid(gate.gate_conv.bias)
    torch.testing.assert_close(q, expected.view(1, 3, 1, 1).expand(1, 3, 4, 5))


def test_pool_parts_examples():
    q = torch.randn(1, 3, 4, 5, 2, dtype=torch.float64)  # (N, M, D, H, W)
    uniform = torch.full((1, 3, 5, 2), 0.3, dtype=torch.float64)
    torch.testing.assert_close(pool_parts(q, uniform), q.mean(dim=(-2, -1)))
    point = torch.zeros(1, 3, 5, 2, dtype=torch.float64)
    point[:, :, 2, 1] = 0.7
    torch.testing.assert_close(pool_parts(q, point), q[..., 2, 1])
    assert (pool_parts(q, torch.zeros(1, 3, 5, 2, dtype=torch.float64)) == 0).all()


def test_forward_produces_six_parts_plus_foreground():
    torch.manual_seed(0)
    net = PartReIDNet(10, feat_channels=16, mid_channels=8, embed_dim=12, encoder_widths=(4, 8, 8)).eval()
    out = net(torch.rand(3, 3, 64, 32))
    assert out.parts.shape == (3, 6, 12)
    assert out.foreground.shape == (3, 12)
    assert out.visibility.shape == (3, 6) and out.visibility.dtype == torch.bool
    assert out.foreground_logits.shape == (3, 10) and out.part_logits.shape == (3, 6, 10)
    assert out.attention.shape == (3, 7, 16, 8)


def test_forward_deterministic_in_eval():
    torch.manual_seed(1)
    net = PartReIDNet(5, feat_channels=16, mid_channels=8, embed_dim=8, encoder_widths=(4, 8, 8)).eval()
    x = torch.rand(2, 3, 64, 32)
    a, b = net(x), net(x.clone())
    assert torch.equal(a.parts, b.parts) and torch.equal(a.foreground, b.foreground)


def test_zero_features_with_zero_bias_give_zero_embeddings():
    foc = FeatureFocuser(6, 5)
    with torch.no_grad():
        for conv in (foc.embed_conv, foc.gate.feature_conv, foc.gate.gate_conv):
            conv.bias.zero_()
    fg, parts = foc(torch.zeros(2, 6, 4, 3), _random_simplex(2, 7, 4, 3).float())
    assert (fg == 0).all() and (parts == 0).all()


def test_mask_locality_with_pointwise_gate():
    """Features where a part's mask is zero cannot leak into that part's embedding."""
    torch.manual_seed(0)
    foc = FeatureFocuser(6, 5, gate_kernel=1).double()
    att = _random_simplex(1, 7, 4, 3, seed=2)
    att[:, 2, :2] = 0.0  # part 2 absent from the top two rows
    att = att / att.sum(dim=1, keepdim=True)
    b = torch.randn(1, 6, 4, 3, dtype=torch.float64)
    b2 = b.clone()
    b2[..., :2, :] += torch.randn(1, 6, 2, 3, dtype=torch.float64) * 5
    _, parts = foc(b, att)
    _, parts2 = foc(b2, att)
    torch.testing.assert_close(parts[:, 1], parts2[:, 1])
    assert not torch.allclose(parts[:, 0], parts2[:, 0])


def test_permuting_part_channels_permutes_embeddings():
    torch.manual_seed(0)
    foc = FeatureFocuser(6, 5).double()
    att = _random_simplex(2, 7, 4, 3, seed=3)
    b = torch.randn(2, 6, 4, 3, dtype=torch.float64)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    att_perm = torch.cat([att[:, :1], att[:, 1:][:, perm]], dim=1)
    fg, parts = foc(b, att)
    fg_p, parts_p = foc(b, att_perm)
    torch.testing.assert_close(parts_p, parts[:, perm])
    torch.testing.assert_close(fg_p, fg)


def test_bypass_returns_global_average():
    foc = FeatureFocuser(6, 5, bypass=True)
    b = torch.randn(2, 6, 4, 3)
    fg, parts = foc(b, _random_simplex(2, 7, 4, 3).float())
    expected = foc.embed(b).mean(dim=(-2, -1))
    torch.testing.assert_close(fg, expected)
    torch.testing.assert_close(parts, expected.unsqueeze(1).expand(2, 6, 5))
