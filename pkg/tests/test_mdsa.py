import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from proavdit.core import ConfigError, DimensionError, fan_in_uniform_
from proavdit.mdsa import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    MDSA,
    AxisProjector,
    BiBlockCrossAttn,
    Decoder,
    Encoder3D,
    ExpandFuse,
    GCMAttn,
    LatentPair,
    MDSAConfig,
    MTSelfAttn,
    OrthoLatents,
    SpatialSelfAttn,
    merge_blocks,
    partition_blocks,
    sample_posterior,
)

from conftest import TINY, randomize_


def mha_oracle(mha, x, ctx=None):
    """Per-head, per-query loop over the attention definition using ``mha``'s weights."""
    ctx = x if ctx is None else ctx
    q, k, v = mha.to_q(x), mha.to_k(ctx), mha.to_v(ctx)
    d = mha.dim // mha.heads
    out = torch.zeros_like(q)
    for h in range(mha.heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(q.shape[0]):
            scores = torch.stack([q[i, sl] @ k[j, sl] / math.sqrt(d) for j in range(k.shape[0])])
            w = torch.exp(scores - scores.max())
            w = w / w.sum()
            out[i, sl] = (w[:, None] * v[:, sl]).sum(0)
    return mha.to_out(out)


def tiny_clip(B=1, cfg=TINY, seed=0):
    gen = torch.Generator().manual_seed(seed)
    video = torch.rand(B, cfg.frames, cfg.height, cfg.width, 3, generator=gen)
    audio = torch.rand(B, cfg.frames, cfg.height, cfg.width, generator=gen)
    return video, audio


def random_latents(cfg=TINY, B=1, C=None, seed=0):
    gen = torch.Generator().manual_seed(seed)
    C = cfg.c_lat if C is None else C
    T, H, W = cfg.frames, cfg.latent_height, cfg.latent_width
    return OrthoLatents(torch.randn(B, H, W, C, generator=gen), torch.randn(B, T, W, C, generator=gen),
                        torch.randn(B, T, H, C, generator=gen))


# ---------------------------------------------------------------- encoder and latent accounting


def test_desk_encoder_shape():
    cfg = MDSAConfig(enc_blocks=1)
    u = Encoder3D(cfg, 3)(torch.rand(1, 16, 32, 32, 3))
    assert u.shape == (1, 16, 16, 16, 64)


def test_full_scale_latent_accounting():
    cfg = MDSAConfig(frames=16, height=256, width=256, downsample=8)
    assert (cfg.latent_height, cfg.latent_width) == (32, 32)
    assert cfg.latent_size() == (32 * 32 + 16 * 32 + 16 * 32) * 4 == 8192


@given(st.integers(1, 8), st.sampled_from([1, 2, 4]), st.integers(1, 4), st.integers(1, 4), st.integers(1, 8))
@settings(max_examples=40, deadline=None)
def test_latent_size_formula(T, d, hm, wm, C):
    cfg = MDSAConfig(frames=T, height=d * hm, width=d * wm, downsample=d, c_lat=C)
    assert cfg.latent_size() == (hm * wm + T * wm + T * hm) * C


def test_non_divisible_frame_is_config_error():
    with pytest.raises(ConfigError):
        MDSAConfig(height=30, downsample=4)
    enc = Encoder3D(TINY, 3)
    with pytest.raises(ConfigError):
        enc(torch.rand(1, 8, 7, 8, 3))


def test_gradient_reaches_every_input_frame():
    enc = Encoder3D(TINY, 3)
    fan_in_uniform_(enc)
    x = torch.rand(1, TINY.frames, 8, 8, 3, requires_grad=True)
    enc(x).pow(2).sum().backward()
    per_frame = x.grad.abs().sum(dim=(0, 2, 3, 4))
    assert bool((per_frame > 0).all())


def test_projector_shapes_and_defaults():
    cfg = MDSAConfig()
    assert (cfg.proj_layers, cfg.proj_heads, cfg.proj_hidden, cfg.proj_mlp) == (4, 4, 384, 512)
    assert cfg.c_lat == 4
    u = torch.randn(1, 16, 16, 16, 64)
    small = cfg.with_(proj_layers=1, proj_hidden=32, proj_mlp=32)
    for axis, shape in small.latent_shapes().items():
        mean, logvar = AxisProjector(small, axis)(u)
        assert mean.shape == (1, *shape) == logvar.shape


def test_uniform_pooling_matches_time_average_loop():
    proj = AxisProjector(TINY, "t")
    with torch.no_grad():
        proj.to_k.weight.zero_()
        proj.to_k.bias.zero_()
    u = torch.randn(2, TINY.frames, 4, 4, TINY.c_mid)
    expected = sum(proj.to_v(u[:, t]) for t in range(TINY.frames)) / TINY.frames
    assert torch.allclose(proj.pool(u), expected, atol=1e-6)
    mean, _ = proj(u)
    ref_mean, _ = proj.refine(expected)
    assert torch.allclose(mean, ref_mean, atol=1e-5)


def test_logvar_is_clamped():
    proj = AxisProjector(TINY, "h")
    with torch.no_grad():
        proj.head.bias[TINY.c_lat:] = 1e4
        _, lv = proj(torch.randn(1, TINY.frames, 4, 4, TINY.c_mid))
    assert lv.max().item() == LOGVAR_MAX
    with torch.no_grad():
        proj.head.bias[TINY.c_lat:] = -1e4
        _, lv = proj(torch.randn(1, TINY.frames, 4, 4, TINY.c_mid))
    assert lv.min().item() == LOGVAR_MIN


# ---------------------------------------------------------------- posterior


def _posterior(mean_val=0.0, logvar_val=0.0, shape=(1, 4, 4, 2)):
    means = tuple(torch.full(shape, mean_val) for _ in range(3))
    logvars = tuple(torch.full(shape, logvar_val) for _ in range(3))
    return OrthoLatents(*means, mean=means, logvar=logvars)


def test_posterior_mean_mode_deterministic():
    z = _posterior(0.7, 0.0)
    a, b = sample_posterior(z, "mean"), sample_posterior(z, "mean")
    assert all(torch.equal(x, y) for x, y in zip(a.as_tuple(), b.as_tuple()))


def test_tiny_logvar_sample_equals_mean():
    z = _posterior(1.3, -30.0)
    s = sample_posterior(z, "sample", torch.Generator().manual_seed(0))
    assert all(torch.allclose(x, torch.full_like(x, 1.3), atol=1e-5) for x in s.as_tuple())


def test_posterior_monte_carlo_statistics():
    mu, logvar, n = 0.4, math.log(2.25), 10_000
    z = _posterior(mu, logvar, shape=(n, 1))
    draws = sample_posterior(z, "sample", torch.Generator().manual_seed(1)).t.double().flatten()
    sigma = math.sqrt(2.25)
    assert abs(draws.mean().item() - mu) < 3 * sigma / math.sqrt(n)
    # standard error of a sample variance for a Gaussian is sigma^2 * sqrt(2/(n-1))
    assert abs(draws.var().item() - 2.25) < 3 * 2.25 * math.sqrt(2 / (n - 1))


def test_posterior_rejects_bad_mode():
    with pytest.raises(ValueError):
        sample_posterior(_posterior(), "mode")


# ---------------------------------------------------------------- multi-scale temporal attention


def test_mt_shape_and_branch_lengths():
    mt = MTSelfAttn(16, 2)
    z = torch.randn(2, 16, 16, 16)
    assert mt(z).shape == z.shape
    assert [b.shape[1] for b in mt.branch_inputs(z)] == [16, 8, 4]


def test_mt_pads_non_multiple_length():
    mt = MTSelfAttn(8, 2)
    z = torch.randn(1, 6, 3, 8)
    assert mt(z).shape == z.shape


def test_mt_single_scale_matches_oracle():
    mt = MTSelfAttn(8, 2).double()
    with torch.no_grad():
        mt.deconv[1].weight.zero_()
        mt.deconv[2].weight.zero_()
    z = torch.randn(1, 8, 3, 8, dtype=torch.float64)
    h = F.layer_norm(z, (8,), mt.norm.weight, mt.norm.bias)
    attended = torch.zeros_like(z)
    for s in range(3):
        attended[0, :, s] = mha_oracle(mt.attn[0], h[0, :, s])
    w = mt.deconv[0].weight[:, :, 0]  # pointwise (C_in, C_out)
    expected = z + attended @ w
    assert torch.allclose(mt(z), expected, atol=1e-10)


# ---------------------------------------------------------------- spatial self-attention


def test_spatial_permutation_equivariance():
    sa = SpatialSelfAttn(8, 2)
    z = torch.randn(1, 4, 4, 8)
    perm = torch.randperm(16)
    tokens = z.reshape(1, 16, 8)
    out = sa(tokens[:, perm].reshape(1, 4, 4, 8)).reshape(1, 16, 8)
    inv = torch.argsort(perm)
    assert torch.allclose(out[:, inv], sa(z).reshape(1, 16, 8), atol=1e-6)


def test_spatial_single_token_is_value_path():
    sa = SpatialSelfAttn(8, 2)
    z = torch.randn(3, 1, 1, 8)
    n = sa.norm(z)
    expected = z + sa.attn.to_out(sa.attn.to_v(n))
    assert torch.allclose(sa(z), expected, atol=1e-6)


def test_spatial_matches_brute_force():
    sa = SpatialSelfAttn(8, 2).double()
    z = torch.randn(1, 4, 4, 8, dtype=torch.float64)
    tokens = z.reshape(16, 8)
    expected = tokens + mha_oracle(sa.attn, sa.norm(tokens))
    assert torch.allclose(sa(z).reshape(16, 8), expected, atol=1e-10)


# ---------------------------------------------------------------- group cross-modal attention


def _pair(seed=0):
    return LatentPair(random_latents(C=TINY.c_mid, seed=seed), random_latents(C=TINY.c_mid, seed=seed + 1))


def test_gcm_zero_value_is_identity():
    gcm = GCMAttn(TINY.c_mid, 2)
    for m in gcm.attention_modules():
        m.zero_value_()
    pair = _pair()
    out = gcm(pair)
    for a, b in zip(out.video.as_tuple() + out.audio.as_tuple(), pair.video.as_tuple() + pair.audio.as_tuple()):
        assert torch.equal(a, b)


def test_gcm_updates_all_six_latents():
    gcm = GCMAttn(TINY.c_mid, 2)
    pair = _pair()
    out = gcm(pair)
    changed = [not torch.allclose(a, b) for a, b in
               zip(out.video.as_tuple() + out.audio.as_tuple(), pair.video.as_tuple() + pair.audio.as_tuple())]
    assert all(changed)


def test_gcm_groups_are_isolated_and_global():
    """Perturbing one audio cell of group h moves every video cell of group h and nothing else."""
    gcm = GCMAttn(TINY.c_mid, 2).double()
    pair = _pair()
    pair = LatentPair(pair.video.map(torch.Tensor.double), pair.audio.map(torch.Tensor.double))
    base = gcm(pair)
    audio = list(pair.audio.as_tuple())
    audio[1] = audio[1].clone()
    audio[1][0, 0, 0] += torch.randn(TINY.c_mid, dtype=torch.float64)  # not a constant shift: LayerNorm would erase it
    moved = gcm(LatentPair(pair.video, OrthoLatents(*audio)))
    diffs = [(a - b).abs().amax(-1) for a, b in zip(moved.video.as_tuple(), base.video.as_tuple())]
    assert torch.equal(diffs[0], torch.zeros_like(diffs[0]))
    assert torch.equal(diffs[2], torch.zeros_like(diffs[2]))
    assert bool((diffs[1] > 0).all())  # T*W' tokens all attend the changed key


def test_gcm_simultaneous_update():
    gcm = GCMAttn(TINY.c_mid, 2)
    pair = _pair()
    out = gcm(pair)
    zv, za = pair.video.t.reshape(1, -1, TINY.c_mid), pair.audio.t.reshape(1, -1, TINY.c_mid)
    expected_a = za + gcm.audio_from_video[0](gcm.norm_q_a[0](za), gcm.norm_kv_v[0](zv))
    assert torch.allclose(out.audio.t.reshape(1, -1, TINY.c_mid), expected_a, atol=1e-6)


def test_gcm_shape_mismatch():
    pair = _pair()
    bad = OrthoLatents(pair.audio.t[:, :2], pair.audio.h, pair.audio.w)
    with pytest.raises(DimensionError):
        GCMAttn(TINY.c_mid, 2)(LatentPair(pair.video, bad))


def test_gcm_shared_weights_flag():
    assert len(GCMAttn(8, 2, share=True).attention_modules()) == 2
    assert len(GCMAttn(8, 2, share=False).attention_modules()) == 6


# ---------------------------------------------------------------- expand and fuse


def _identity_fuse(C):
    ef = ExpandFuse(C, C)
    with torch.no_grad():
        for lin in (ef.proj_t, ef.proj_h, ef.proj_w):
            lin.weight.copy_(torch.eye(C))
            lin.bias.zero_()
    return ef


def test_fuse_zero_latents_zero_output():
    ef = ExpandFuse(4, 8)
    fan_in_uniform_(ef)
    z = OrthoLatents(torch.zeros(1, 4, 4, 4), torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 4, 4))
    assert torch.equal(ef(z), torch.zeros(1, 8, 4, 4, 8))


def test_fuse_identity_loop_oracle():
    z = random_latents()
    out = _identity_fuse(TINY.c_lat)(z)
    T, H, W = TINY.frames, TINY.latent_height, TINY.latent_width
    for t in range(T):
        for h in range(H):
            for w in range(W):
                ref = z.t[0, h, w] + z.h[0, t, w] + z.w[0, t, h]
                assert torch.allclose(out[0, t, h, w], ref)


def test_fuse_constant_along_time_iff_inputs_constant():
    ef = _identity_fuse(TINY.c_lat)
    z = random_latents()
    const = OrthoLatents(z.t, z.h[:, :1].expand_as(z.h), z.w[:, :1].expand_as(z.w))
    out = ef(const)
    assert torch.allclose(out, out[:, :1].expand_as(out))
    out = ef(z)
    assert not torch.allclose(out, out[:, :1].expand_as(out))


# ---------------------------------------------------------------- bi-block cross-attention


def test_block_partition_tiles_once():
    Z = torch.arange(1 * 8 * 4 * 4 * 1, dtype=torch.float32).reshape(1, 8, 4, 4, 1)
    blocks = partition_blocks(Z, 4, 2, 2)
    assert blocks.shape[0] == (8 // 4) * (4 // 2) * (4 // 2)
    assert sorted(blocks.flatten().tolist()) == Z.flatten().tolist()
    assert torch.equal(merge_blocks(blocks, Z.shape, 4, 2, 2), Z)


def test_block_rows_sum_to_one():
    bb = BiBlockCrossAttn(8, 2, (2, 2, 2))
    Zv, Za = torch.randn(1, 4, 4, 4, 8), torch.randn(1, 4, 4, 4, 8)
    _, _, (wv, wa) = bb(Zv, Za, return_weights=True)
    assert wv.shape[-1] == 8  # keys restricted to one 2x2x2 block
    assert torch.allclose(wv.sum(-1), torch.ones_like(wv.sum(-1)), atol=1e-6)
    assert torch.allclose(wa.sum(-1), torch.ones_like(wa.sum(-1)), atol=1e-6)


def test_block_fused_and_explicit_paths_agree():
    bb = BiBlockCrossAttn(8, 2, (2, 2, 2)).double()
    Zv, Za = torch.randn(1, 4, 4, 4, 8, dtype=torch.float64), torch.randn(1, 4, 4, 4, 8, dtype=torch.float64)
    a = bb(Zv, Za)
    b = bb(Zv, Za, return_weights=True)
    assert torch.allclose(a[0], b[0]) and torch.allclose(a[1], b[1])


def test_block_locality():
    bb = BiBlockCrossAttn(8, 2, (2, 2, 2)).double()
    Zv, Za = torch.randn(1, 4, 4, 4, 8, dtype=torch.float64), torch.randn(1, 4, 4, 4, 8, dtype=torch.float64)
    base_v, _ = bb(Zv, Za)
    Za2 = Za.clone()
    Za2[0, 2:4, 0:2, 2:4] += torch.randn(2, 2, 2, 8, dtype=torch.float64)
    moved_v, _ = bb(Zv, Za2)
    diff = (moved_v - base_v).abs().amax(-1)[0]
    inside = torch.zeros_like(diff, dtype=torch.bool)
    inside[2:4, 0:2, 2:4] = True
    assert bool((diff[inside] > 0).all())
    assert torch.equal(diff[~inside], torch.zeros_like(diff[~inside]))


def test_block_non_divisible_lists_sizes():
    bb = BiBlockCrossAttn(8, 2, (3, 2, 2))
    with pytest.raises(ConfigError, match=r"t \[1, 2, 4\]"):
        bb(torch.randn(1, 4, 4, 4, 8), torch.randn(1, 4, 4, 4, 8))


# ---------------------------------------------------------------- decoder and full model


def test_desk_decoder_shapes():
    cfg = MDSAConfig(dec_blocks=1)
    Z = torch.randn(1, 16, 16, 16, 64)
    assert Decoder(cfg, 3)(Z).shape == (1, 16, 32, 32, 3)
    assert Decoder(cfg, 1)(Z).shape == (1, 16, 32, 32, 1)


def test_model_outputs_clamped_for_extreme_input():
    model = MDSA(TINY)
    video, audio = tiny_clip()
    with torch.no_grad():
        out = model(video * 1e3 - 500, audio * 1e3, mode="mean")
    for key in ("video", "audio"):
        assert float(out[key].min()) >= 0 and float(out[key].max()) <= 1
    assert out["video"].shape == video.shape and out["audio"].shape == audio.shape


def test_every_attention_block_is_residual():
    gen = torch.Generator().manual_seed(0)
    model = MDSA(TINY)
    zl = lambda s: random_latents(C=TINY.c_mid, seed=s)  # noqa: E731
    inputs = {
        "spatial_v": (zl(0).t,), "spatial_a": (zl(1).t,),
        "mt_h_v": (zl(2).h,), "mt_w_v": (zl(3).w,), "mt_h_a": (zl(4).h,), "mt_w_a": (zl(5).w,),
        "gcm": (_pair(),),
        "bi_block": (torch.randn(1, 8, 4, 4, TINY.c_mid, generator=gen),
                     torch.randn(1, 8, 4, 4, TINY.c_mid, generator=gen)),
    }
    blocks = model.attention_blocks()
    assert set(blocks) == set(inputs)
    for name, block in blocks.items():
        for m in block.attention_modules():
            m.zero_value_()
        out = block(*inputs[name])
        if name == "gcm":
            ins, outs = inputs[name][0], out
            pairs = zip(outs.video.as_tuple() + outs.audio.as_tuple(), ins.video.as_tuple() + ins.audio.as_tuple())
        elif name == "bi_block":
            pairs = zip(out, inputs[name])
        else:
            pairs = [(out, inputs[name][0])]
        assert all(torch.equal(a, b) for a, b in pairs), name


def test_no_dead_parameters():
    model = MDSA(TINY)
    randomize_(model, scale=0.2)
    video, audio = tiny_clip(B=2)
    out = model(video, audio, mode="sample", generator=torch.Generator().manual_seed(0))
    loss = (out["video_raw"] - video).abs().mean() + (out["audio_raw"] - audio).abs().mean()
    loss.backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not bool(p.grad.abs().sum() > 0)]
    assert dead == []


def test_encode_shapes_and_pair_check():
    model = MDSA(TINY)
    pair = model.encode(*tiny_clip(B=2))
    pair.check()
    shapes = TINY.latent_shapes()
    for axis, z in zip("thw", pair.video.as_tuple()):
        assert z.shape == (2, *shapes[axis])
    assert pair.video.numel_per_sample() == TINY.latent_size()
