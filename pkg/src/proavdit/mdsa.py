"""Multi-scale dual-stream spatio-temporal autoencoder.

Tensors are batch-first and channels-last throughout: a clip is
(B, T, H, W, C), the three orthogonal latents are (B, H', W', C),
(B, T, W', C) and (B, T, H', C).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import torch
import torch.nn as nn

from .core import (
    ConfigError,
    DeConvTime,
    DimensionError,
    MultiHeadAttention,
    Mlp,
    TransformerBlock,
    avg_pool_time,
    fan_in_uniform_,
    pad_time,
)

AXES = ("t", "h", "w")
LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0
MT_SCALES = (1, 2, 4)


@dataclass(frozen=True)
class MDSAConfig:
    frames: int = 16
    height: int = 32
    width: int = 32
    video_channels: int = 3
    audio_channels: int = 1
    downsample: int = 2
    c_mid: int = 64
    c_lat: int = 4
    heads: int = 4
    enc_blocks: int = 1
    dec_blocks: int = 2
    proj_layers: int = 4
    proj_heads: int = 4
    proj_hidden: int = 384
    proj_mlp: int = 512
    block_t: int = 4
    block_h: int = 4
    block_w: int = 4
    share_gcm: bool = False

    def __post_init__(self):
        d = self.downsample
        if d < 1 or d & (d - 1):
            raise ConfigError(f"downsample factor must be a power of two, got {d}")
        if self.height % d or self.width % d:
            raise ConfigError(f"H={self.height}, W={self.width} not divisible by downsample {d}")

    @property
    def latent_height(self):
        return self.height // self.downsample

    @property
    def latent_width(self):
        return self.width // self.downsample

    def latent_shapes(self):
        T, Hp, Wp, C = self.frames, self.latent_height, self.latent_width, self.c_lat
        return {"t": (Hp, Wp, C), "h": (T, Wp, C), "w": (T, Hp, C)}

    def latent_size(self):
        """Scalars per modality across the three orthogonal latents."""
        return sum(math.prod(s) for s in self.latent_shapes().values())

    def with_(self, **kw):
        return replace(self, **kw)


def config_keys():
    return [f.name for f in fields(MDSAConfig)]


# ---------------------------------------------------------------- latent containers


@dataclass
class OrthoLatents:
    """Three orthogonal 2D latents plus their diagonal-Gaussian posterior."""

    t: torch.Tensor
    h: torch.Tensor
    w: torch.Tensor
    mean: tuple | None = None
    logvar: tuple | None = None

    def as_tuple(self):
        return (self.t, self.h, self.w)

    def map(self, fn):
        return OrthoLatents(*(fn(z) for z in self.as_tuple()))

    def numel_per_sample(self):
        return sum(z[0].numel() for z in self.as_tuple())


@dataclass
class LatentPair:
    video: OrthoLatents
    audio: OrthoLatents

    def check(self):
        for a, b in zip(self.video.as_tuple(), self.audio.as_tuple()):
            if a.shape != b.shape:
                raise DimensionError(f"video/audio latent shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def sample_posterior(z, mode="sample", generator=None):
    """Draw from (or take the mean of) a diagonal Gaussian posterior."""
    if z.mean is None:
        raise ValueError("latents carry no posterior parameters")
    if mode == "mean":
        return OrthoLatents(*z.mean, mean=z.mean, logvar=z.logvar)
    if mode != "sample":
        raise ValueError(f"unknown posterior mode {mode!r}")
    out = []
    for mu, lv in zip(z.mean, z.logvar):
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        out.append(mu + torch.exp(0.5 * lv) * eps)
    return OrthoLatents(*out, mean=z.mean, logvar=z.logvar)


# ---------------------------------------------------------------- encoder


def _conv_stack(c_in, c_mid, downsample):
    layers = [nn.Conv2d(c_in, c_mid // 2, 3, padding=1), nn.GELU()]
    c = c_mid // 2
    for i in range(int(math.log2(downsample))):
        layers += [nn.Conv2d(c, c_mid, 4, stride=2, padding=1), nn.GELU()]
        c = c_mid
    layers += [nn.Conv2d(c, c_mid, 3, padding=1)]
    return nn.Sequential(*layers)


class FactorizedBlock(nn.Module):
    """Divided space-time attention: per-frame spatial, then per-location temporal, then MLP."""

    def __init__(self, dim, heads, mlp_dim):
        super().__init__()
        self.norm_s = nn.LayerNorm(dim)
        self.attn_s = MultiHeadAttention(dim, heads)
        self.norm_t = nn.LayerNorm(dim)
        self.attn_t = MultiHeadAttention(dim, heads)
        self.norm_m = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_dim)

    def forward(self, x):
        B, T, H, W, C = x.shape
        s = x.reshape(B, T, H * W, C)
        s = s + self.attn_s(self.norm_s(s))
        t = s.reshape(B, T, H * W, C).transpose(1, 2)
        t = t + self.attn_t(self.norm_t(t))
        x = t.transpose(1, 2).reshape(B, T, H, W, C)
        return x + self.mlp(self.norm_m(x))


class Encoder3D(nn.Module):
    """Clip (B, T, H, W, C) -> intermediate 3D latent u (B, T, H', W', C_mid)."""

    def __init__(self, cfg, in_channels):
        super().__init__()
        self.cfg = cfg
        self.stem = _conv_stack(in_channels, cfg.c_mid, cfg.downsample)
        self.pos_space = nn.Parameter(torch.zeros(cfg.latent_height * cfg.latent_width, cfg.c_mid))
        self.pos_time = nn.Parameter(torch.zeros(cfg.frames, cfg.c_mid))
        self.blocks = nn.ModuleList(
            FactorizedBlock(cfg.c_mid, cfg.heads, 2 * cfg.c_mid) for _ in range(cfg.enc_blocks)
        )

    def forward(self, x):
        B, T, H, W, C = x.shape
        if H % self.cfg.downsample or W % self.cfg.downsample:
            raise ConfigError(f"frame {H}x{W} not divisible by downsample {self.cfg.downsample}")
        h = self.stem(x.reshape(B * T, H, W, C).permute(0, 3, 1, 2))
        _, Cm, Hp, Wp = h.shape
        u = h.permute(0, 2, 3, 1).reshape(B, T, Hp * Wp, Cm)
        u = u + self.pos_space[: Hp * Wp] + self.pos_time[:T, None, :]
        u = u.reshape(B, T, Hp, Wp, Cm)
        for blk in self.blocks:
            u = blk(u)
        return u


class AxisProjector(nn.Module):
    """Collapse one axis of u by learned attention pooling (one query per output
    cell), refine the 2D grid with a transformer and emit (mean, logvar)."""

    _AXIS_DIM = {"t": 1, "h": 2, "w": 3}

    def __init__(self, cfg, axis):
        super().__init__()
        self.axis = axis
        rows, cols, _ = cfg.latent_shapes()[axis]
        cells = rows * cols
        c = cfg.c_mid
        self.query = nn.Parameter(torch.randn(cells, c) * 0.02)
        self.to_k = nn.Linear(c, c)
        self.to_v = nn.Linear(c, c)
        self.in_proj = nn.Linear(c, cfg.proj_hidden)
        self.pos = nn.Parameter(torch.randn(cells, cfg.proj_hidden) * 0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.proj_hidden, cfg.proj_heads, cfg.proj_mlp) for _ in range(cfg.proj_layers)
        )
        self.norm = nn.LayerNorm(cfg.proj_hidden)
        self.head = nn.Linear(cfg.proj_hidden, 2 * cfg.c_lat)

    def pool(self, u):
        """(B, T, H', W', C) -> (B, rows, cols, C) attention-pooled over the axis."""
        moved = u.movedim(self._AXIS_DIM[self.axis], 3)  # (B, rows, cols, L, C)
        B, R, Cc, L, C = moved.shape
        tokens = moved.reshape(B, R * Cc, L, C)
        scores = torch.einsum("bnlc,nc->bnl", self.to_k(tokens), self.query) / math.sqrt(C)
        weights = torch.softmax(scores, dim=-1)
        pooled = torch.einsum("bnl,bnlc->bnc", weights, self.to_v(tokens))
        return pooled.reshape(B, R, Cc, C)

    def refine(self, pooled):
        B, R, Cc, C = pooled.shape
        x = self.in_proj(pooled.reshape(B, R * Cc, C)) + self.pos
        for blk in self.blocks:
            x = blk(x)
        stats = self.head(self.norm(x)).reshape(B, R, Cc, -1)
        mean, logvar = stats.chunk(2, dim=-1)
        return mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)

    def forward(self, u):
        return self.refine(self.pool(u))


class DualStreamEncoder(nn.Module):
    """One modality's encoder: 3D encoder followed by the three axis projectors."""

    def __init__(self, cfg, in_channels):
        super().__init__()
        self.encoder = Encoder3D(cfg, in_channels)
        self.proj_t = AxisProjector(cfg, "t")
        self.proj_h = AxisProjector(cfg, "h")
        self.proj_w = AxisProjector(cfg, "w")

    def project_axes(self, u):
        stats = [p(u) for p in (self.proj_t, self.proj_h, self.proj_w)]
        means = tuple(m for m, _ in stats)
        logvars = tuple(lv for _, lv in stats)
        return OrthoLatents(*means, mean=means, logvar=logvars)

    def forward(self, x):
        return self.project_axes(self.encoder(x))


# ---------------------------------------------------------------- multi-scale attention


class SpatialSelfAttn(nn.Module):
    """Residual self-attention over the H'·W' cells of the static latent."""

    def __init__(self, dim, heads):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, z):
        B, H, W, C = z.shape
        tokens = z.reshape(B, H * W, C)
        return (tokens + self.attn(self.norm(tokens))).reshape(B, H, W, C)

    def attention_modules(self):
        return [self.attn]


class MTSelfAttn(nn.Module):
    """Temporal self-attention at 1x/2x/4x pooled resolutions, upsampled by learned
    transposed convolutions, summed, with one residual around the block.

    Input (B, T, S, C); tokens run along T with S folded into the batch.
    """

    def __init__(self, dim, heads, scales=MT_SCALES):
        super().__init__()
        self.scales = tuple(scales)
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.ModuleList(MultiHeadAttention(dim, heads) for _ in self.scales)
        self.deconv = nn.ModuleList(DeConvTime(dim, k) for k in self.scales)

    def branch_inputs(self, z):
        h = pad_time(self.norm(z), max(self.scales), dim=1)
        return [avg_pool_time(h, k, dim=1) for k in self.scales]

    def forward(self, z):
        B, T, S, C = z.shape
        out = z
        for pooled, attn, up in zip(self.branch_inputs(z), self.attn, self.deconv):
            tokens = pooled.transpose(1, 2)  # (B, S, T/k, C)
            attended = attn(tokens).transpose(1, 2)
            out = out + up(attended, length=T, dim=1)
        return out

    def attention_modules(self):
        return list(self.attn)


class LatentAttention(nn.Module):
    """Per-modality stage: lift C_lat -> C_mid, spatial attention on z^t and
    multi-scale temporal attention on z^h and z^w."""

    def __init__(self, cfg):
        super().__init__()
        self.lift = nn.ModuleList(nn.Linear(cfg.c_lat, cfg.c_mid) for _ in AXES)
        self.spatial = SpatialSelfAttn(cfg.c_mid, cfg.heads)
        self.temporal_h = MTSelfAttn(cfg.c_mid, cfg.heads)
        self.temporal_w = MTSelfAttn(cfg.c_mid, cfg.heads)

    def forward(self, z):
        zt, zh, zw = (lift(x) for lift, x in zip(self.lift, z.as_tuple()))
        return OrthoLatents(self.spatial(zt), self.temporal_h(zh), self.temporal_w(zw))


class GCMAttn(nn.Module):
    """Group cross-modal attention: per axis group, audio queries video and video
    queries audio, both computed from the pre-update tensors."""

    def __init__(self, dim, heads, share=False):
        super().__init__()
        n = 1 if share else len(AXES)
        self.share = share
        self.norm_q_a = nn.ModuleList(nn.LayerNorm(dim) for _ in range(n))
        self.norm_kv_v = nn.ModuleList(nn.LayerNorm(dim) for _ in range(n))
        self.norm_q_v = nn.ModuleList(nn.LayerNorm(dim) for _ in range(n))
        self.norm_kv_a = nn.ModuleList(nn.LayerNorm(dim) for _ in range(n))
        self.audio_from_video = nn.ModuleList(MultiHeadAttention(dim, heads) for _ in range(n))
        self.video_from_audio = nn.ModuleList(MultiHeadAttention(dim, heads) for _ in range(n))

    def forward(self, pair):
        pair.check()
        new_v, new_a = [], []
        for g, (zv, za) in enumerate(zip(pair.video.as_tuple(), pair.audio.as_tuple())):
            i = 0 if self.share else g
            shape = zv.shape
            tv = zv.reshape(shape[0], -1, shape[-1])
            ta = za.reshape(shape[0], -1, shape[-1])
            ua = ta + self.audio_from_video[i](self.norm_q_a[i](ta), self.norm_kv_v[i](tv))
            uv = tv + self.video_from_audio[i](self.norm_q_v[i](tv), self.norm_kv_a[i](ta))
            new_v.append(uv.reshape(shape))
            new_a.append(ua.reshape(shape))
        return LatentPair(OrthoLatents(*new_v), OrthoLatents(*new_a))

    def attention_modules(self):
        return list(self.audio_from_video) + list(self.video_from_audio)


class ExpandFuse(nn.Module):
    """Project each axis latent to C_mid, broadcast along its collapsed axis and sum."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.proj_t = nn.Linear(c_in, c_out)
        self.proj_h = nn.Linear(c_in, c_out)
        self.proj_w = nn.Linear(c_in, c_out)

    def forward(self, z):
        zt, zh, zw = z.as_tuple()
        return (
            self.proj_t(zt)[:, None, :, :, :]   # along T
            + self.proj_h(zh)[:, :, None, :, :]  # along H'
            + self.proj_w(zw)[:, :, :, None, :]  # along W'
        )


def partition_blocks(Z, bt, bh, bw):
    B, T, H, W, C = Z.shape
    if T % bt or H % bh or W % bw:
        raise ConfigError(
            f"block ({bt},{bh},{bw}) does not tile ({T},{H},{W}); valid extents are divisors: "
            f"t {_divisors(T)}, h {_divisors(H)}, w {_divisors(W)}"
        )
    x = Z.reshape(B, T // bt, bt, H // bh, bh, W // bw, bw, C)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(B * (T // bt) * (H // bh) * (W // bw), bt * bh * bw, C)


def merge_blocks(x, shape, bt, bh, bw):
    B, T, H, W, C = shape
    x = x.reshape(B, T // bt, H // bh, W // bw, bt, bh, bw, C)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(B, T, H, W, C)


def _divisors(n):
    return [d for d in range(1, n + 1) if n % d == 0]


class BiBlockCrossAttn(nn.Module):
    """Bidirectional cross-attention restricted to co-located non-overlapping blocks."""

    def __init__(self, dim, heads, block=(4, 4, 4)):
        super().__init__()
        self.block = tuple(block)
        self.norm_v = nn.LayerNorm(dim)
        self.norm_a = nn.LayerNorm(dim)
        self.video_from_audio = MultiHeadAttention(dim, heads)
        self.audio_from_video = MultiHeadAttention(dim, heads)

    def forward(self, Zv, Za, return_weights=False):
        if Zv.shape != Za.shape:
            raise DimensionError(f"fused tensors differ: {tuple(Zv.shape)} vs {tuple(Za.shape)}")
        bv = partition_blocks(Zv, *self.block)
        ba = partition_blocks(Za, *self.block)
        nv, na = self.norm_v(bv), self.norm_a(ba)
        if return_weights:
            dv, wv = self.video_from_audio(nv, na, return_weights=True)
            da, wa = self.audio_from_video(na, nv, return_weights=True)
        else:
            dv, da = self.video_from_audio(nv, na), self.audio_from_video(na, nv)
        out_v = merge_blocks(bv + dv, Zv.shape, *self.block)
        out_a = merge_blocks(ba + da, Za.shape, *self.block)
        if return_weights:
            return out_v, out_a, (wv, wa)
        return out_v, out_a

    def attention_modules(self):
        return [self.video_from_audio, self.audio_from_video]


# ---------------------------------------------------------------- decoder


class Decoder(nn.Module):
    """Fused (B, T, H', W', C_mid) -> clip (B, T, H, W, C_out), pre-clamp."""

    def __init__(self, cfg, out_channels):
        super().__init__()
        c = cfg.c_mid
        self.pos_space = nn.Parameter(torch.randn(cfg.latent_height * cfg.latent_width, c) * 0.02)
        self.pos_time = nn.Parameter(torch.randn(cfg.frames, c) * 0.02)
        self.blocks = nn.ModuleList(FactorizedBlock(c, cfg.heads, 2 * c) for _ in range(cfg.dec_blocks))
        ups, ch = [], c
        for _ in range(int(math.log2(cfg.downsample))):
            ups += [nn.ConvTranspose2d(ch, c // 2, 4, stride=2, padding=1), nn.GELU()]
            ch = c // 2
        ups += [nn.Conv2d(ch, c // 2, 3, padding=1), nn.GELU(), nn.Conv2d(c // 2, out_channels, 3, padding=1)]
        self.up = nn.Sequential(*ups)

    def forward(self, Z):
        B, T, Hp, Wp, C = Z.shape
        x = Z.reshape(B, T, Hp * Wp, C) + self.pos_space[: Hp * Wp] + self.pos_time[:T, None, :]
        x = x.reshape(B, T, Hp, Wp, C)
        for blk in self.blocks:
            x = blk(x)
        y = self.up(x.reshape(B * T, Hp, Wp, C).permute(0, 3, 1, 2))
        return y.permute(0, 2, 3, 1).reshape(B, T, *y.shape[-2:], y.shape[1])


# ---------------------------------------------------------------- full model


class MDSA(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or MDSAConfig()
        self.cfg = cfg
        self.enc_v = DualStreamEncoder(cfg, cfg.video_channels)
        self.enc_a = DualStreamEncoder(cfg, cfg.audio_channels)
        self.attn_v = LatentAttention(cfg)
        self.attn_a = LatentAttention(cfg)
        self.gcm = GCMAttn(cfg.c_mid, cfg.heads, share=cfg.share_gcm)
        self.fuse_v = ExpandFuse(cfg.c_mid, cfg.c_mid)
        self.fuse_a = ExpandFuse(cfg.c_mid, cfg.c_mid)
        self.bi_block = BiBlockCrossAttn(cfg.c_mid, cfg.heads, (cfg.block_t, cfg.block_h, cfg.block_w))
        self.dec_v = Decoder(cfg, cfg.video_channels)
        self.dec_a = Decoder(cfg, cfg.audio_channels)
        fan_in_uniform_(self)

    @staticmethod
    def _audio_in(audio):
        return audio.unsqueeze(-1) if audio.dim() == 4 else audio

    def encode(self, video, audio):
        """Posterior latents for both modalities (latent value = posterior mean)."""
        return LatentPair(self.enc_v(video), self.enc_a(self._audio_in(audio)))

    def decode_latents(self, pair):
        """Latents -> (video, audio) pre-clamp reconstructions."""
        pair.check()
        pair = self.gcm(LatentPair(self.attn_v(pair.video), self.attn_a(pair.audio)))
        Zv, Za = self.fuse_v(pair.video), self.fuse_a(pair.audio)
        Zv, Za = self.bi_block(Zv, Za)
        return self.dec_v(Zv), self.dec_a(Za)[..., 0]

    def forward(self, video, audio, mode="sample", generator=None):
        post = self.encode(video, audio)
        latents = LatentPair(
            sample_posterior(post.video, mode, generator),
            sample_posterior(post.audio, mode, generator),
        )
        video_raw, audio_raw = self.decode_latents(latents)
        return {
            "video": video_raw.clamp(0.0, 1.0),
            "audio": audio_raw.clamp(0.0, 1.0),
            "video_raw": video_raw,
            "audio_raw": audio_raw,
            "posterior": post,
            "latents": latents,
        }

    def attention_blocks(self):
        """Every residual attention sub-block, keyed by a readable name."""
        out = {}
        for tag, stage in (("v", self.attn_v), ("a", self.attn_a)):
            out[f"spatial_{tag}"] = stage.spatial
            out[f"mt_h_{tag}"] = stage.temporal_h
            out[f"mt_w_{tag}"] = stage.temporal_w
        out["gcm"] = self.gcm
        out["bi_block"] = self.bi_block
        return out

