import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from proavdit.core import ConfigError, DimensionError
from proavdit.diffusion import (
    FRAME_ORDER,
    N_FRAMES,
    DiffusionConfig,
    SamplingError,
    STDiT,
    ToyMixture,
    flow_matching_loss,
    frame_size,
    latent_scale,
    masked_mse,
    model_velocity,
    reflect,
    sample,
    stack_latents,
    timestep_embedding,
    unstack_latents,
)
from proavdit.mdsa import LatentPair, OrthoLatents

from conftest import randomize_

SMALL = DiffusionConfig(depth=2, heads=2, hidden=32, mlp_ratio=2, c_lat=2, frame_h=8, frame_w=8)


def make_pair(T, Hp, Wp, C=4, B=1, seed=0):
    gen = torch.Generator().manual_seed(seed)

    def ortho():
        return OrthoLatents(torch.randn(B, Hp, Wp, C, generator=gen), torch.randn(B, T, Wp, C, generator=gen),
                            torch.randn(B, T, Hp, C, generator=gen))

    return LatentPair(ortho(), ortho())


def small_model(seed=0, cfg=SMALL):
    torch.manual_seed(seed)
    return randomize_(STDiT(cfg), scale=0.2, seed=seed)


# ---------------------------------------------------------------- stacking


def test_full_scale_dims_padding():
    s = stack_latents(make_pair(16, 32, 32))
    assert s.P.shape == (1, 6, 32, 32, 4)
    padded_frames = [i for i in range(6) if bool(s.pad_mask[i].any())]
    assert padded_frames == [1, 2, 4, 5]
    for i in padded_frames:
        assert bool(s.pad_mask[i, 16:].all()) and not bool(s.pad_mask[i, :16].any())
        assert torch.equal(s.P[0, i, 16:], torch.zeros(16, 32, 4))


def test_desk_dims_no_padding():
    s = stack_latents(make_pair(16, 16, 16))
    assert s.P.shape == (1, 6, 16, 16, 4)
    assert not bool(s.pad_mask.any())


def test_frame_order_is_canonical():
    pair = make_pair(4, 4, 4)
    s = stack_latents(pair)
    frames = [*pair.video.as_tuple(), *pair.audio.as_tuple()]
    assert FRAME_ORDER == ("v_t", "v_h", "v_w", "a_t", "a_h", "a_w")
    for i, z in enumerate(frames):
        assert torch.equal(s.P[:, i], z)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(1, 3))
@settings(max_examples=40, deadline=None)
def test_stack_round_trip(T, Hp, Wp, C):
    pair = make_pair(T, Hp, Wp, C)
    scale = torch.rand(C) + 0.5
    s = stack_latents(pair, scale=scale)
    back = unstack_latents(s)
    assert s.P.shape[2:4] == frame_size(T, Hp, Wp)
    for a, b in zip(back.video.as_tuple() + back.audio.as_tuple(), pair.video.as_tuple() + pair.audio.as_tuple()):
        assert a.shape == b.shape
        assert (a - b).abs().max().item() < 1e-6
    assert not bool((s.P[:, s.pad_mask] != 0).any())


def test_frame_permutation_breaks_round_trip():
    pair = make_pair(8, 8, 8)
    s = stack_latents(pair)
    shuffled = s.P[:, [1, 0, 2, 3, 4, 5]]
    back = unstack_latents(s, shuffled)
    assert not torch.equal(back.video.t, pair.video.t)


def test_inconsistent_shapes_raise():
    pair = make_pair(8, 8, 8)
    bad = LatentPair(OrthoLatents(pair.video.t, pair.video.h[:, :4], pair.video.w), pair.audio)
    with pytest.raises(DimensionError):
        stack_latents(bad)
    bad_c = LatentPair(OrthoLatents(pair.video.t[..., :2], pair.video.h, pair.video.w), pair.audio)
    with pytest.raises(DimensionError):
        stack_latents(bad_c)


def test_latent_scale_is_per_channel_std():
    pairs = [make_pair(4, 4, 4, C=3, seed=s) for s in range(3)]
    frames = torch.cat([z.reshape(-1, 3) for p in pairs for z in p.video.as_tuple() + p.audio.as_tuple()])
    assert torch.allclose(latent_scale(pairs), frames.std(0))
    assert torch.allclose(latent_scale(pairs, max_clips=1), latent_scale(pairs[:1]))


# ---------------------------------------------------------------- STDiT


def test_config_validation():
    with pytest.raises(ConfigError):
        DiffusionConfig(frame_h=10)
    with pytest.raises(ConfigError):
        DiffusionConfig(patch_t=2)
    d = DiffusionConfig()
    assert (d.depth, d.patch_h, d.patch_w, d.patch_t, d.steps) == (16, 4, 4, 1, 30)


def test_output_shape_matches_input():
    model = small_model()
    x = torch.randn(2, 6, 8, 8, 2)
    assert model(x, torch.tensor([0.1, 0.9])).shape == x.shape


def test_fresh_model_predicts_zero():
    model = STDiT(SMALL)
    assert torch.equal(model(torch.randn(1, 6, 8, 8, 2), 0.5), torch.zeros(1, 6, 8, 8, 2))


def test_token_count_and_temporal_span():
    model = small_model()
    seen = []
    model.blocks[0].attn_t.register_forward_hook(lambda m, inp, out: seen.append(inp[0].shape))
    model(torch.randn(1, 6, 8, 8, 2), 0.3)
    assert seen[0][-2] == N_FRAMES
    assert SMALL.tokens_per_frame * N_FRAMES == 6 * (8 // 4) * (8 // 4)


def test_time_out_of_range():
    model = small_model()
    with pytest.raises(ValueError):
        model(torch.randn(1, 6, 8, 8, 2), 1.5)
    with pytest.raises(DimensionError):
        model(torch.randn(1, 5, 8, 8, 2), 0.5)


def test_null_label_equals_no_condition():
    model = small_model()
    with torch.no_grad():
        model.label_embed.weight[SMALL.null_label].zero_()
    x = torch.randn(2, 6, 8, 8, 2)
    assert torch.equal(model(x, 0.4), model(x, 0.4, condition=SMALL.null_label))
    assert not torch.equal(model(x, 0.4), model(x, 0.4, condition=0))


def _permute_patches(model, x, perm):
    tokens = model.patchify(x)
    return model.unpatchify(tokens[:, :, perm])


def test_positional_embeddings_break_patch_equivariance():
    model = small_model().double()
    x = torch.randn(1, 6, 8, 8, 2, dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    no_pos = model(_permute_patches(model, x, perm), 0.5, use_pos=False)
    assert torch.allclose(no_pos, _permute_patches(model, model(x, 0.5, use_pos=False), perm), atol=1e-10)
    with_pos = model(_permute_patches(model, x, perm), 0.5)
    assert not torch.allclose(with_pos, _permute_patches(model, model(x, 0.5), perm), atol=1e-6)


def test_timestep_embedding_distinguishes_times():
    e = timestep_embedding(torch.tensor([0.0, 0.5, 1.0]), 32)
    assert e.shape == (3, 32)
    assert not torch.allclose(e[0], e[1]) and not torch.allclose(e[1], e[2])


# ---------------------------------------------------------------- flow matching


def _padded_batch():
    s = stack_latents(make_pair(4, 8, 8, C=2, B=2))
    gen = torch.Generator().manual_seed(3)
    P0 = torch.randn(s.P.shape, generator=gen)
    return s, P0


def test_oracle_predictor_zero_loss():
    s, P0 = _padded_batch()
    oracle = lambda x, t, c: s.P - P0  # noqa: E731
    assert flow_matching_loss(oracle, P0, s.P, torch.tensor([0.2, 0.7]), pad_mask=s.pad_mask).item() == 0.0


def test_zero_predictor_loss_is_masked_target_energy():
    s, P0 = _padded_batch()
    zero = lambda x, t, c: torch.zeros_like(x)  # noqa: E731
    loss = flow_matching_loss(zero, P0, s.P, torch.tensor([0.2, 0.7]), pad_mask=s.pad_mask)
    valid = ~s.pad_mask
    diff = (s.P - P0)[:, valid]
    assert loss.item() == pytest.approx(diff.pow(2).mean().item(), rel=1e-6)


def test_loss_ignores_padded_cells():
    s, P0 = _padded_batch()
    model = small_model()
    vel = model_velocity(model)
    t = torch.tensor([0.3, 0.6])
    base = flow_matching_loss(vel, P0, s.P, t, pad_mask=s.pad_mask)
    junk = s.P.clone()
    junk[:, s.pad_mask] = 1e3 * torch.randn_like(junk[:, s.pad_mask])
    noisy0 = P0.clone()
    noisy0[:, s.pad_mask] = -7.0
    assert torch.equal(flow_matching_loss(vel, noisy0, junk, t, pad_mask=s.pad_mask), base)


def test_masked_mse_without_mask_is_plain_mse():
    a, b = torch.randn(2, 6, 4, 4, 1), torch.randn(2, 6, 4, 4, 1)
    assert torch.allclose(masked_mse(a, b), (a - b).pow(2).mean())


# ---------------------------------------------------------------- sampler


def test_default_steps_is_thirty():
    assert DiffusionConfig().steps == 30
    trace = []
    sample(lambda x, t, c: torch.zeros_like(x), (1, 4), trace=trace)
    assert [r["step"] for r in trace] == list(range(30))


def test_constant_field_exact_euler():
    c = 0.25
    out = sample(lambda x, t, cond: torch.full_like(x, c), (3, 5), steps=30, seed=7, dtype=torch.float64)
    noise = reflect(torch.randn((3, 5), generator=torch.Generator().manual_seed(7), dtype=torch.float64), 5.0)
    assert (noise.abs() < 4.5).all()
    assert torch.allclose(out, noise + c, atol=1e-6)


def test_sampler_deterministic_bitwise():
    model = small_model()
    shape = (2, 6, 8, 8, 2)
    a = sample(model_velocity(model), shape, steps=5, seed=11, condition=1)
    b = sample(model_velocity(model), shape, steps=5, seed=11, condition=1)
    assert torch.equal(a, b)


def test_linear_field_first_order_convergence():
    x0 = 0.5 + torch.rand(64, generator=torch.Generator().manual_seed(0), dtype=torch.float64)

    def euler(n):
        x = x0.clone()
        for i in range(n):
            x = reflect(x + (1 / n) * (-x), 5.0)
        return x

    exact = x0 * math.exp(-1.0)
    errs = [(euler(n) - exact).abs().max().item() for n in (30, 60, 120)]
    assert 1.8 < errs[0] / errs[1] < 2.2 and 1.8 < errs[1] / errs[2] < 2.2


@given(st.floats(-1e3, 1e3, allow_nan=False), st.sampled_from([0.5, 1.0, 5.0]))
def test_reflect_stays_in_box(v, bound):
    y = reflect(torch.tensor([v], dtype=torch.float64), bound).item()
    assert -bound - 1e-9 <= y <= bound + 1e-9
    if abs(v) <= bound:
        assert y == pytest.approx(v)


def test_reflection_mirrors_overshoot():
    assert reflect(torch.tensor([5.5]), 5.0).item() == pytest.approx(4.5)
    assert reflect(torch.tensor([-6.0]), 5.0).item() == pytest.approx(-4.0)


def test_sampler_keeps_values_in_box_and_padding_zero():
    s = stack_latents(make_pair(4, 8, 8, C=2))
    trace = []
    out = sample(lambda x, t, c: 40 * torch.ones_like(x), s.P.shape, steps=30, pad_mask=s.pad_mask, trace=trace)
    assert out.abs().max().item() <= 5.0
    assert torch.equal(out[:, s.pad_mask], torch.zeros_like(out[:, s.pad_mask]))
    assert all(r["max_abs"] <= 5.0 for r in trace) and any(r["clamped"] > 0 for r in trace)


def test_sampler_reports_nonfinite_step():
    def blowup(x, t, c):
        return torch.full_like(x, float("inf")) if float(t[0]) >= 0.5 else torch.zeros_like(x)

    with pytest.raises(SamplingError) as exc:
        sample(blowup, (1, 3), steps=30)
    assert exc.value.step == 15


def test_verbose_sampler_logs(caplog):
    caplog.set_level("INFO")
    sample(lambda x, t, c: torch.zeros_like(x), (1, 3), steps=3, verbose=True)
    assert sum("sample step=" in r.message for r in caplog.records) == 3


# ---------------------------------------------------------------- toy target moments


def test_toy_mixture_closed_form_moments():
    toy = ToyMixture()
    draws = toy.sample(200_000, torch.Generator().manual_seed(0)).double()
    assert torch.allclose(draws.mean(0), toy.mean().double(), atol=0.01)
    assert torch.allclose(torch.cov(draws.T), toy.covariance().double(), atol=0.02)
