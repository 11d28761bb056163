import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from adversa.errors import ConfigurationError, DomainError, ShapeError
from adversa.scenario import BBoxTrack
from adversa.unet import (
    CAB3D,
    Conv3dBlock,
    CrossAttention,
    GatedSelfAttention,
    GroundingInput,
    GroundingNet,
    MultiHeadAttention,
    SpatialAttention,
    TemporalAttention,
    UNet3D,
    UNetConfig,
    attention,
    build_grounding_tokens,
    fourier_embed,
    select_boxes,
    sinusoid,
)


def _track(box, present=True, cls=0):
    return BBoxTrack(cls, np.asarray([box], float) if present else np.full((1, 4), np.nan), np.array([present]))


def _randomize(module, seed=0, scale=0.2):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * scale)


# -- Fourier features ----------------------------------------------------------------


def test_fourier_zero_box():
    out = fourier_embed(np.zeros(4), 5)
    assert out.shape == (40,)
    np.testing.assert_array_equal(out[0::2], 0.0)
    np.testing.assert_array_equal(out[1::2], 1.0)


def test_fourier_half():
    out = fourier_embed(np.array([0.5, 0, 0, 0]), 1)
    assert out[0] == pytest.approx(1.0, abs=1e-15) and out[1] == pytest.approx(0.0, abs=1e-15)


def test_fourier_matches_direct_trig():
    box = (0.1, 0.2, 0.6, 0.9)
    F_ = 2
    want = []
    for x in box:
        for f in range(F_):
            want += [math.sin(2**f * math.pi * x), math.cos(2**f * math.pi * x)]
    np.testing.assert_allclose(fourier_embed(np.array(box), F_), want, rtol=0, atol=1e-12)
    t = fourier_embed(torch.tensor(box, dtype=torch.float64), F_)
    np.testing.assert_allclose(t.numpy(), want, rtol=0, atol=1e-12)


def test_fourier_random_matches_direct_and_is_bounded():
    rng = np.random.default_rng(0)
    boxes = rng.random((50, 4))
    out = fourier_embed(boxes, 8)
    assert out.shape == (50, 64) and np.abs(out).max() <= 1
    for n in range(50):
        for c in range(4):
            for f in range(8):
                ang = 2**f * math.pi * boxes[n, c]
                assert abs(out[n, c * 16 + 2 * f] - math.sin(ang)) <= 1e-12
                assert abs(out[n, c * 16 + 2 * f + 1] - math.cos(ang)) <= 1e-12


@pytest.mark.parametrize("box", [(-0.1, 0, 0.5, 0.5), (0, 0, 1.2, 0.5)])
def test_fourier_domain(box):
    with pytest.raises(DomainError):
        fourier_embed(np.array(box), 4)


# -- token selection -----------------------------------------------------------------


def test_token_selection_matches_brute_force():
    """A box is kept iff fewer than N boxes beat it (larger area, or equal area and lower index)."""
    rng = np.random.default_rng(1)
    for _ in range(100):
        n_boxes = int(rng.integers(0, 14))
        N = int(rng.integers(1, 10))
        tracks = []
        for _ in range(n_boxes):
            # coarse sizes so equal areas occur
            w, h = rng.integers(1, 4, 2) / 10
            x0, y0 = rng.integers(0, 6, 2) / 10
            tracks.append(_track((x0, y0, x0 + w, y0 + h), present=bool(rng.random() > 0.15)))
        got = select_boxes(tracks, 0, N)
        areas = {i: (t.boxes[0, 2] - t.boxes[0, 0]) * (t.boxes[0, 3] - t.boxes[0, 1]) for i, t in enumerate(tracks) if t.present[0]}
        keep = []
        for i, a in areas.items():
            beaten_by = sum(1 for j, b in areas.items() if b > a or (b == a and j < i))
            if beaten_by < N:
                keep.append(i)
        assert sorted(got) == sorted(keep)
        assert len(got) == min(N, len(areas))
        assert [areas[i] for i in got] == sorted((areas[i] for i in got), reverse=True)


def test_token_selection_cases():
    assert select_boxes([], 0, 8) == []
    equal = [_track((0.1, 0.1, 0.3, 0.3)), _track((0.5, 0.5, 0.7, 0.7))]
    assert select_boxes(equal, 0, 1) == [0]
    many = [_track((0, 0, 0.05 * (i + 1), 0.1)) for i in range(10)]
    assert select_boxes(many, 0, 8) == [9, 8, 7, 6, 5, 4, 3, 2]


def test_grounding_tokens():
    net = GroundingNet(8, 16)
    tok, valid = build_grounding_tokens([], 0, net, 8)
    assert tok.shape == (8, 16) and not valid.any() and not tok.any()
    tracks = [_track((0.1, 0.1, 0.2, 0.2)), _track((0, 0, 1, 1), present=False), _track((0.3, 0.3, 0.9, 0.8))]
    tok, valid = build_grounding_tokens(tracks, 0, net, 8)
    assert valid.tolist() == [True, True] + [False] * 6
    want = net.mlp(fourier_embed(torch.tensor([0.3, 0.3, 0.9, 0.8], dtype=torch.float32), 8))
    torch.testing.assert_close(tok[0], want)
    g = GroundingInput.from_tracks(tracks, 2)
    assert g.boxes.shape == (1, 2, 4) and g.valid.all() and g.classes.tolist() == [[0, 0]]


def test_class_embedding_changes_tokens():
    net = GroundingNet(4, 8, use_class=True)
    boxes = torch.rand(1, 2, 4)
    valid = torch.ones(1, 2, dtype=torch.bool)
    a = net(boxes, valid, torch.tensor([[0, 0]]))
    b = net(boxes, valid, torch.tensor([[1, 0]]))
    assert not torch.equal(a[0, 0], b[0, 0]) and torch.equal(a[0, 1], b[0, 1])


# -- attention blocks ----------------------------------------------------------------


def test_attention_rows_are_stochastic():
    torch.manual_seed(0)
    q, k, v = torch.randn(3, 5, 8), torch.randn(3, 7, 8), torch.randn(3, 7, 8)
    mask = torch.rand(3, 7) > 0.4
    mask[:, 0] = True
    _, w = attention(q, k, v, 2, mask, return_weights=True)
    assert w.shape == (3, 2, 5, 7)
    assert (w.sum(-1) - 1).abs().max() <= 1e-6
    assert (w * ~mask[:, None, None, :]).abs().max() == 0


def test_attention_with_no_keys_outputs_zero():
    q, k = torch.randn(1, 2, 4), torch.randn(1, 3, 4)
    out = attention(q, k, k, 1, torch.zeros(1, 3, dtype=torch.bool))
    assert torch.isfinite(out).all() and not out.any()


@pytest.mark.parametrize("block", ["sa", "ca", "ta"])
def test_attention_blocks_identity_at_init(block):
    torch.manual_seed(1)
    x = torch.randn(2, 16, 4, 3, 3)
    ctx = torch.randn(2, 5, 12)
    m = {"sa": SpatialAttention(16, 4), "ca": CrossAttention(16, 4, 12), "ta": TemporalAttention(16, 4)}[block]
    assert torch.equal(m(x, context=ctx, context_mask=torch.ones(2, 5, dtype=torch.bool)), x)


def test_cross_attention_rejects_long_text():
    m = CrossAttention(8, 2, 8)
    with pytest.raises(DomainError):
        m(torch.randn(1, 8, 2, 2, 2), context=torch.randn(1, 78, 8))


def test_temporal_attention_single_frame():
    torch.manual_seed(2)
    m = TemporalAttention(8, 2)
    _randomize(m, 2)
    x = torch.randn(1, 8, 1, 2, 2)
    tok = x.permute(0, 3, 4, 2, 1).reshape(4, 1, 8)
    pos = sinusoid(torch.arange(1), 8)
    expect = tok + m.attn.to_out(m.attn.to_v(m.norm(tok) + pos))
    got = m(x).permute(0, 3, 4, 2, 1).reshape(4, 1, 8)
    torch.testing.assert_close(got, expect)


def test_spatial_attention_matches_dense_reference():
    torch.manual_seed(3)
    m = SpatialAttention(8, 2)
    _randomize(m, 3)
    x = torch.randn(1, 8, 2, 2, 3)
    out = m(x)
    for t in range(2):
        tok = x[0, :, t].reshape(8, -1).T  # positions x channels
        h = m.norm(tok)
        q, k, v = m.attn.to_q(h), m.attn.to_k(h), m.attn.to_v(h)
        heads = []
        for hd in range(2):
            sl = slice(4 * hd, 4 * hd + 4)
            w = torch.softmax(q[:, sl] @ k[:, sl].T / 2.0, -1)
            heads.append(w @ v[:, sl])
        ref = tok + m.attn.to_out(torch.cat(heads, -1))
        torch.testing.assert_close(out[0, :, t].reshape(8, -1).T, ref)


def test_gated_attention_gate_zero_is_identity():
    torch.manual_seed(4)
    ga = GatedSelfAttention(16, 4, 10)
    _randomize(ga, 4)
    with torch.no_grad():
        ga.gate.zero_()
    x = torch.randn(2, 16, 3, 2, 2)
    g = torch.randn(2, 3, 5, 10)
    assert torch.equal(ga(x, grounding=g, grounding_valid=torch.ones(2, 3, 5, dtype=torch.bool)), x)


def test_gated_attention_without_valid_tokens_is_visual_self_attention():
    torch.manual_seed(5)
    ga = GatedSelfAttention(16, 4, 10)
    _randomize(ga, 5)
    x = torch.randn(1, 16, 2, 2, 2)
    g = torch.randn(1, 2, 3, 10)
    none_valid = ga(x, grounding=g, grounding_valid=torch.zeros(1, 2, 3, dtype=torch.bool))
    torch.testing.assert_close(none_valid, ga(x))
    assert not torch.allclose(ga(x, grounding=g, grounding_valid=torch.ones(1, 2, 3, dtype=torch.bool)), none_valid)


def test_gated_attention_gradient_reaches_grounding_mlp():
    torch.manual_seed(6)
    net = GroundingNet(4, 10).double()
    ga = GatedSelfAttention(8, 2, 10).double()
    _randomize(ga, 6, 0.5)
    x = torch.randn(1, 8, 2, 2, 2, dtype=torch.float64)
    boxes = torch.rand(1, 2, 3, 4, dtype=torch.float64)
    valid = torch.ones(1, 2, 3, dtype=torch.bool)

    def f():
        return ga(x, grounding=net(boxes, valid), grounding_valid=valid).pow(2).sum()

    assert not torch.equal(ga(x, grounding=net(boxes, valid), grounding_valid=valid), x)
    f().backward()
    w = net.mlp[0].weight
    eps = 1e-6
    for idx in [(0, 0), (3, 5), (7, 12)]:
        with torch.no_grad():
            w[idx] += eps
            up = f().item()
            w[idx] -= 2 * eps
            down = f().item()
            w[idx] += eps
        fd = (up - down) / (2 * eps)
        assert w.grad[idx].item() == pytest.approx(fd, rel=1e-5, abs=1e-9)
    assert w.grad.abs().sum() > 0


def test_gated_attention_dim_mismatch():
    ga = GatedSelfAttention(8, 2, 10)
    with pytest.raises(RuntimeError):
        ga(torch.randn(1, 8, 2, 2, 2), grounding=torch.randn(1, 2, 3, 7), grounding_valid=torch.ones(1, 2, 3, dtype=torch.bool))


# -- temporal convolution -------------------------------------------------------------


def test_conv_block_preserves_frames_and_constant_input():
    torch.manual_seed(7)
    blk = Conv3dBlock(6)
    with torch.no_grad():
        for c in blk.convs:
            c.weight[:, :, 2] = c.weight[:, :, 0]
    x = torch.randn(2, 6, 1, 3, 3).expand(2, 6, 9, 3, 3).contiguous()
    out = blk(x)
    assert out.shape == x.shape
    torch.testing.assert_close(out, out[:, :, :1].expand_as(out), rtol=0, atol=1e-6)
    with pytest.raises(ShapeError):
        blk(torch.randn(1, 6, 0, 2, 2))


def test_conv_block_matches_sliding_window_loop():
    torch.manual_seed(8)
    C = 2
    blk = Conv3dBlock(C).double()
    x = torch.randn(1, C, 3, 2, 2, dtype=torch.float64)  # 3 frames, 2x2
    h = x[0].numpy().copy()
    for n, conv in enumerate(blk.convs):
        w = conv.weight.detach().numpy()[:, :, :, 0, 0]  # (out, in, 3)
        b = conv.bias.detach().numpy()
        out = np.zeros_like(h)
        T = h.shape[1]
        for o in range(C):
            for t in range(T):
                for i in range(2):
                    for j in range(2):
                        acc = b[o]
                        for c in range(C):
                            for dt in range(3):
                                tt = min(max(t + dt - 1, 0), T - 1)  # replicate padding
                                acc += w[o, c, dt] * h[c, tt, i, j]
                        out[o, t, i, j] = acc
        if n < 3:
            out = out / (1 + np.exp(-out))
        h = out
    np.testing.assert_allclose(blk(x)[0].detach().numpy(), x[0].numpy() + h, rtol=1e-12, atol=1e-12)


# -- full network ----------------------------------------------------------------------

CONFIGS = [
    UNetConfig(),
    UNetConfig(latent_channels=12, base_channels=16, channel_mult=(1, 2), heads=2, context_dim=8, grounding_dim=8),
    UNetConfig(latent_channels=12, base_channels=16, channel_mult=(1,), heads=4, context_dim=8,
               use_class_embedding=True, block_order=("conv", "sa", "ca", "ga", "ta")),
]


def _inputs(cfg, B=2, T=4, hw=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(B, cfg.latent_channels, T, hw, hw, generator=g)
    k = torch.tensor([3, 150][:B])
    ctx = torch.randn(B, 6, cfg.context_dim, generator=g)
    ctx_mask = torch.ones(B, 6, dtype=torch.bool)
    ctx_mask[:, 4:] = False
    boxes = torch.rand(B, T, cfg.max_tokens, 4, generator=g)
    boxes[..., 2:] = torch.maximum(boxes[..., 2:], boxes[..., :2])
    valid = torch.rand(B, T, cfg.max_tokens, generator=g) > 0.3
    classes = torch.randint(0, 4, (B, T, cfg.max_tokens), generator=g)
    return z, k, dict(context=ctx, context_mask=ctx_mask, boxes=boxes, box_valid=valid, box_classes=classes)


@pytest.mark.parametrize("cfg", CONFIGS)
def test_zero_output_at_init_and_shape(cfg):
    torch.manual_seed(0)
    net = UNet3D(cfg)
    z, k, cond = _inputs(cfg)
    out = net(z, k, **cond)
    assert out.shape == z.shape
    assert not out.any()


def test_gates_zero_make_output_independent_of_grounding():
    cfg = CONFIGS[1]
    net = UNet3D(cfg)
    _randomize(net, 9, 0.1)
    for g in net.gates():
        with torch.no_grad():
            g.zero_()
    z, k, cond = _inputs(cfg)
    a = net(z, k, **cond)
    cond2 = dict(cond, boxes=cond["boxes"] * 0.5, box_valid=~cond["box_valid"])
    assert torch.equal(a, net(z, k, **cond2))
    assert torch.equal(a, net(z, k, context=cond["context"], context_mask=cond["context_mask"]))


def test_grounding_and_text_change_output_when_active():
    cfg = CONFIGS[1]
    net = UNet3D(cfg)
    _randomize(net, 10, 0.1)
    z, k, cond = _inputs(cfg)
    a = net(z, k, **cond)
    shifted = cond["boxes"].clone()
    shifted[..., [0, 2]] = (shifted[..., [0, 2]] * 0.5 + 0.5)
    assert (a - net(z, k, **dict(cond, boxes=shifted))).norm() > 0
    assert (a - net(z, k, **dict(cond, context=torch.roll(cond["context"], 1, 1)))).norm() > 0


def test_rejects_bad_shapes():
    net = UNet3D(CONFIGS[1])
    with pytest.raises(ShapeError):
        net(torch.randn(1, 5, 2, 8, 8), torch.tensor([1]))
    with pytest.raises(ShapeError):
        net(torch.randn(1, 12, 2, 7, 7), torch.tensor([1]))
    z, k, cond = _inputs(CONFIGS[1], B=1, T=2)
    with pytest.raises(ShapeError):
        net(z, k, **dict(cond, boxes=torch.rand(1, 3, 8, 4)))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        UNetConfig(base_channels=30, heads=4)
    with pytest.raises(ConfigurationError):
        UNetConfig(block_order=("conv", "sa", "ca", "ta"))


def test_one_gradient_step_reduces_single_sample_loss():
    cfg = CONFIGS[1]
    torch.manual_seed(11)
    net = UNet3D(cfg)
    z, k, cond = _inputs(cfg, B=1, T=4)
    e = torch.randn_like(z)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    before = F.mse_loss(net(z, k[:1], **cond), e)
    before.backward()
    opt.step()
    after = F.mse_loss(net(z, k[:1], **cond), e)
    assert after.item() < before.item()


def test_attention_only_parameters():
    net = UNet3D(CONFIGS[1])
    names = {id(p) for p in net.attention_parameters()}
    named = dict(net.named_parameters())
    assert id(named["stem.weight"]) not in names
    assert id(named["down_cab.0.parts.ga.gate"]) in names
    assert id(named["down_cab.0.parts.ca.attn.to_k.weight"]) in names
    assert 0 < len(names) < len(named)


def test_cab_runs_in_configured_order():
    cfg = UNetConfig(latent_channels=12, base_channels=8, channel_mult=(1,), heads=2, context_dim=4,
                     block_order=("ta", "ca", "ga", "sa", "conv"))
    cab = CAB3D(8, cfg)
    seen = []
    for name, part in cab.parts.items():
        part.register_forward_hook(lambda m, i, o, n=name: seen.append(n))
    cab(torch.randn(1, 8, 2, 2, 2))
    assert seen == ["ta", "ca", "ga", "sa", "conv"]
