"""Six-frame stacked latents, the spatio-temporal diffusion transformer, the
flow-matching objective and the reflected fixed-step Euler sampler."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, DimensionError, MultiHeadAttention, Mlp, fan_in_uniform_
from .mdsa import LatentPair, OrthoLatents

log = logging.getLogger(__name__)

N_FRAMES = 6
FRAME_ORDER = ("v_t", "v_h", "v_w", "a_t", "a_h", "a_w")
DEFAULT_BOUND = 5.0


class SamplingError(RuntimeError):
    def __init__(self, step, message):
        self.step = step
        super().__init__(f"step {step}: {message}")


# ---------------------------------------------------------------- stacking


@dataclass
class StackedLatent:
    P: torch.Tensor  # (B, 6, F_h, F_w, C)
    pad_mask: torch.Tensor  # (6, F_h, F_w), True on padded cells
    shapes: tuple  # per-frame (rows, cols) before padding
    scale: torch.Tensor  # (C,) per-channel normalisation

    @property
    def valid(self):
        return ~self.pad_mask


def frame_size(T, Hp, Wp):
    """(F_h, F_w) that holds all six frames: rows max(H', T), cols max(W', H', T)."""
    return max(Hp, T), max(Wp, Hp, T)


def make_pad_mask(shapes, Fh, Fw):
    mask = torch.ones(len(shapes), Fh, Fw, dtype=torch.bool)
    for i, (r, c) in enumerate(shapes):
        mask[i, :r, :c] = False
    return mask


def _frames(pair):
    return [*pair.video.as_tuple(), *pair.audio.as_tuple()]


def stack_latents(pair, scale=None, size=None):
    """LatentPair -> StackedLatent in order [v_t, v_h, v_w, a_t, a_h, a_w].

    Each latent is divided by the per-channel ``scale`` and zero-padded to a
    common (F_h, F_w); ``size`` overrides the padded frame size.
    """
    frames = _frames(pair)
    B, C = frames[0].shape[0], frames[0].shape[-1]
    for z in frames:
        if z.dim() != 4 or z.shape[0] != B or z.shape[-1] != C:
            raise DimensionError(f"inconsistent latent shapes: {[tuple(f.shape) for f in frames]}")
    vt, vh, vw = pair.video.as_tuple()
    if vh.shape[1] != vw.shape[1] or (vt.shape[1], vt.shape[2]) != (vw.shape[2], vh.shape[2]):
        raise DimensionError(f"latents do not share (T, H', W'): {[tuple(f.shape) for f in frames[:3]]}")
    if [tuple(z.shape) for z in frames[:3]] != [tuple(z.shape) for z in frames[3:]]:
        raise DimensionError("video and audio latent shapes differ")
    T, Hp, Wp = vh.shape[1], vt.shape[1], vt.shape[2]
    Fh, Fw = size or frame_size(T, Hp, Wp)
    scale = torch.ones(C, dtype=vt.dtype) if scale is None else torch.as_tensor(scale, dtype=vt.dtype)
    P = vt.new_zeros(B, N_FRAMES, Fh, Fw, C)
    shapes = []
    for i, z in enumerate(frames):
        r, c = z.shape[1:3]
        if r > Fh or c > Fw:
            raise DimensionError(f"frame {FRAME_ORDER[i]} of size {r}x{c} exceeds {Fh}x{Fw}")
        P[:, i, :r, :c] = z / scale
        shapes.append((r, c))
    return StackedLatent(P, make_pad_mask(shapes, Fh, Fw), tuple(shapes), scale)


def unstack_latents(s, P=None):
    """Crop padding and undo the scale; returns a LatentPair."""
    P = s.P if P is None else P
    out = [P[:, i, :r, :c] * s.scale for i, (r, c) in enumerate(s.shapes)]
    return LatentPair(OrthoLatents(*out[:3]), OrthoLatents(*out[3:]))


def latent_scale(pairs, max_clips=256):
    """Per-channel standard deviation over all six latents of the first clips."""
    chunks, seen = [], 0
    for pair in pairs:
        frames = _frames(pair)
        chunks.append(torch.cat([z.reshape(-1, z.shape[-1]) for z in frames]))
        seen += frames[0].shape[0]
        if seen >= max_clips:
            break
    std = torch.cat(chunks).std(dim=0)
    return torch.where(std > 0, std, torch.ones_like(std))


# ---------------------------------------------------------------- model


@dataclass(frozen=True)
class DiffusionConfig:
    depth: int = 16
    heads: int = 4
    hidden: int = 256
    mlp_ratio: int = 4
    patch_h: int = 4
    patch_w: int = 4
    patch_t: int = 1
    c_lat: int = 4
    frame_h: int = 16
    frame_w: int = 16
    num_classes: int = 2
    steps: int = 30
    bound: float = DEFAULT_BOUND

    def __post_init__(self):
        if self.frame_h % self.patch_h or self.frame_w % self.patch_w:
            raise ConfigError(
                f"frame {self.frame_h}x{self.frame_w} not divisible by patch {self.patch_h}x{self.patch_w}"
            )
        if self.patch_t != 1:
            raise ConfigError("temporal patch size must be 1: each latent frame is one token row")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        if self.steps < 1:
            raise ConfigError("sampler needs at least one step")

    @property
    def tokens_per_frame(self):
        return (self.frame_h // self.patch_h) * (self.frame_w // self.patch_w)

    @property
    def null_label(self):
        return self.num_classes

    def with_(self, **kw):
        return replace(self, **kw)


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal features of ``t`` (B,), scaled by 1000 so t in [0, 1] spans many periods."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class STDiTBlock(nn.Module):
    """Spatial attention within frames, temporal attention across the six
    frames, then an MLP; each sub-layer is adaLN-modulated and gated."""

    def __init__(self, dim, heads, mlp_dim):
        super().__init__()
        self.norm_s = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn_s = MultiHeadAttention(dim, heads)
        self.norm_t = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn_t = MultiHeadAttention(dim, heads)
        self.norm_m = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = Mlp(dim, mlp_dim)
        self.ada = nn.Linear(dim, 9 * dim)

    def forward(self, x, c):
        """x is (B, 6, N, D); c is (B, D)."""
        mods = self.ada(F.silu(c))[:, None, None].chunk(9, dim=-1)
        s_shift, s_scale, s_gate, t_shift, t_scale, t_gate, m_shift, m_scale, m_gate = mods
        x = x + s_gate * self.attn_s(modulate(self.norm_s(x), s_shift, s_scale))
        h = modulate(self.norm_t(x), t_shift, t_scale).transpose(1, 2)  # (B, N, 6, D)
        x = x + t_gate * self.attn_t(h).transpose(1, 2)
        return x + m_gate * self.mlp(modulate(self.norm_m(x), m_shift, m_scale))


class STDiT(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or DiffusionConfig()
        self.cfg = cfg
        D = cfg.hidden
        patch_dim = cfg.patch_h * cfg.patch_w * cfg.c_lat
        self.patch_in = nn.Linear(patch_dim, D)
        self.pos_space = nn.Parameter(torch.randn(cfg.tokens_per_frame, D) * 0.02)
        self.pos_frame = nn.Parameter(torch.randn(N_FRAMES, D) * 0.02)
        self.t_embed = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.label_embed = nn.Embedding(cfg.num_classes + 1, D, padding_idx=cfg.null_label)
        self.blocks = nn.ModuleList(STDiTBlock(D, cfg.heads, cfg.mlp_ratio * D) for _ in range(cfg.depth))
        self.norm_out = nn.LayerNorm(D, elementwise_affine=False)
        self.ada_out = nn.Linear(D, 2 * D)
        self.head = nn.Linear(D, patch_dim)
        pos = [self.pos_space.data.clone(), self.pos_frame.data.clone()]
        fan_in_uniform_(self)
        self.pos_space.data, self.pos_frame.data = pos
        nn.init.normal_(self.label_embed.weight, std=0.02)
        with torch.no_grad():
            self.label_embed.weight[cfg.null_label].zero_()
        self.zero_init_()

    def zero_init_(self):
        """Zero every modulation and the output head so each block starts as identity."""
        with torch.no_grad():
            for blk in self.blocks:
                blk.ada.weight.zero_()
                blk.ada.bias.zero_()
            for m in (self.ada_out, self.head):
                m.weight.zero_()
                m.bias.zero_()

    def patchify(self, x):
        """(B, 6, F_h, F_w, C) -> (B, 6, N, ph*pw*C)."""
        B, S, Fh, Fw, C = x.shape
        ph, pw = self.cfg.patch_h, self.cfg.patch_w
        x = x.reshape(B, S, Fh // ph, ph, Fw // pw, pw, C).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(B, S, (Fh // ph) * (Fw // pw), ph * pw * C)

    def unpatchify(self, x):
        cfg = self.cfg
        B, S = x.shape[:2]
        gh, gw = cfg.frame_h // cfg.patch_h, cfg.frame_w // cfg.patch_w
        x = x.reshape(B, S, gh, gw, cfg.patch_h, cfg.patch_w, cfg.c_lat).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(B, S, cfg.frame_h, cfg.frame_w, cfg.c_lat)

    def conditioning(self, t, condition):
        c = self.t_embed(timestep_embedding(t, self.cfg.hidden))
        if condition is not None:
            c = c + self.label_embed(torch.as_tensor(condition).reshape(-1).expand(t.shape[0]))
        return c

    def forward(self, x, t, condition=None, use_pos=True):
        """Velocity prediction with the shape of ``x`` (B, 6, F_h, F_w, C)."""
        cfg = self.cfg
        if x.shape[1:] != (N_FRAMES, cfg.frame_h, cfg.frame_w, cfg.c_lat):
            raise DimensionError(
                f"expected (B, {N_FRAMES}, {cfg.frame_h}, {cfg.frame_w}, {cfg.c_lat}), got {tuple(x.shape)}"
            )
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(x.shape[0])
        if not bool(((t >= 0) & (t <= 1)).all()):
            raise ValueError(f"diffusion time must lie in [0, 1], got {t.tolist()}")
        h = self.patch_in(self.patchify(x))
        if use_pos:
            h = h + self.pos_space[None, None] + self.pos_frame[None, :, None]
        c = self.conditioning(t, condition)
        for blk in self.blocks:
            h = blk(h, c)
        shift, scale = self.ada_out(F.silu(c))[:, None, None].chunk(2, dim=-1)
        return self.unpatchify(self.head(modulate(self.norm_out(h), shift, scale)))


# ---------------------------------------------------------------- objective


def _broadcast_valid(pad_mask, like):
    if pad_mask is None:
        return None
    valid = ~pad_mask
    return valid.reshape(*valid.shape, *([1] * (like.dim() - valid.dim() - 1))).expand(like.shape[1:])


def masked_mse(pred, target, pad_mask=None):
    sq = (pred - target) ** 2
    valid = _broadcast_valid(pad_mask, pred)
    if valid is None:
        return sq.mean()
    w = valid.to(sq.dtype).expand_as(sq)
    return (sq * w).sum() / w.sum()


def flow_matching_loss(velocity_fn, P0, P1, t, condition=None, pad_mask=None):
    """Masked MSE between ``velocity_fn(x_t, t, condition)`` and ``P1 - P0``
    along the straight path ``x_t = (1 - t) P0 + t P1``.

    Padded cells of both endpoints are zeroed first, so whatever they held
    cannot reach the prediction or the loss.
    """
    valid = _broadcast_valid(pad_mask, P1)
    if valid is not None:
        P0, P1 = P0 * valid, P1 * valid
    t = torch.as_tensor(t, dtype=P1.dtype).reshape(-1)
    tb = t.reshape(-1, *([1] * (P1.dim() - 1)))
    x_t = (1 - tb) * P0 + tb * P1
    return masked_mse(velocity_fn(x_t, t, condition), P1 - P0, pad_mask)


# ---------------------------------------------------------------- sampler


def reflect(x, bound):
    """Mirror values back into [-bound, bound] (repeatedly, for large overshoots)."""
    period = 4 * bound
    y = torch.remainder(x + bound, period)
    y = torch.where(y > 2 * bound, period - y, y)
    return y - bound


@torch.no_grad()
def sample(velocity_fn, shape, steps=30, seed=0, condition=None, pad_mask=None, bound=DEFAULT_BOUND,
           verbose=False, trace=None, dtype=torch.float32):
    """Integrate ``dx/dt = v(x, t)`` from Gaussian noise at t=0 to t=1 with
    ``steps`` Euler steps, reflecting into [-bound, bound] after every step.

    Padded cells are held at zero. ``trace`` (a list) receives one record
    per step.
    """
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=gen, dtype=dtype)
    valid = _broadcast_valid(pad_mask, x)
    if valid is not None:
        x = x * valid
    x = reflect(x, bound)
    dt = 1.0 / steps
    for i in range(steps):
        t = torch.full((shape[0],), i / steps, dtype=dtype)
        x = x + dt * velocity_fn(x, t, condition)
        if not bool(torch.isfinite(x).all()):
            raise SamplingError(i, "non-finite values in sampler state")
        clamped = int((x.abs() > bound).sum())
        x = reflect(x, bound)
        if valid is not None:
            x = x * valid
        rec = {"step": i, "t": i / steps, "mean": float(x.mean()), "std": float(x.std()),
               "clamped": clamped, "max_abs": float(x.abs().max())}
        if trace is not None:
            trace.append(rec)
        if verbose:
            log.info("sample step=%d t=%.4f mean=%.5f std=%.5f clamped=%d", i, rec["t"], rec["mean"], rec["std"], clamped)
    return x


def model_velocity(model):
    """Adapter from an STDiT to the ``velocity_fn(x, t, condition)`` interface."""
    return lambda x, t, condition: model(x, t, condition)


# ---------------------------------------------------------------- toy problem


@dataclass(frozen=True)
class ToyMixture:
    """Equal-weight mixture of two isotropic 2-D Gaussians."""

    mu_a: tuple = (1.0, 2.0)
    mu_b: tuple = (3.0, 0.5)
    sigma: float = 0.5

    def sample(self, n, generator=None):
        pick = torch.rand(n, generator=generator) < 0.5
        mu = torch.where(pick[:, None], torch.tensor(self.mu_a), torch.tensor(self.mu_b))
        return mu + self.sigma * torch.randn(n, 2, generator=generator)

    def mean(self):
        return 0.5 * (torch.tensor(self.mu_a) + torch.tensor(self.mu_b))

    def covariance(self):
        d = torch.tensor(self.mu_a) - torch.tensor(self.mu_b)
        return self.sigma ** 2 * torch.eye(2) + 0.25 * torch.outer(d, d)


class ToyVelocityMLP(nn.Module):
    def __init__(self, dim=2, hidden=128, t_dim=32):
        super().__init__()
        self.t_dim = t_dim
        self.net = nn.Sequential(
            nn.Linear(dim + t_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, dim),
        )
        fan_in_uniform_(self)

    def forward(self, x, t, condition=None):
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(x.shape[0])
        return self.net(torch.cat([x, timestep_embedding(t, self.t_dim)], dim=-1))


def train_toy_flow(target=None, steps=5000, batch=256, lr=1e-3, seed=0):
    """Fit a ToyVelocityMLP by flow matching; returns (model, final loss)."""
    from .core import OptimizerState, adamw_step, named_trainable

    target = target or ToyMixture()
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = ToyVelocityMLP()
    params = named_trainable(model)
    state = OptimizerState(lr=lr)
    loss = None
    for _ in range(steps):
        P1 = target.sample(batch, gen)
        P0 = torch.randn(batch, 2, generator=gen)
        t = torch.rand(batch, generator=gen)
        loss = flow_matching_loss(model, P0, P1, t)
        for p in params.values():
            p.grad = None
        loss.backward()
        adamw_step(params, state)
    return model, float(loss.detach())
