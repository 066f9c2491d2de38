"""Autoencoder training objective: weighted L1 + KL reconstruction, a Sobel
perceptual proxy, gated hinge-GAN and feature-matching terms, and the
two-stage schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import fan_in_uniform_

MODALITIES = ("video", "audio")


@dataclass(frozen=True)
class LossWeights:
    omega_video: float = 0.5
    omega_audio: float = 0.5
    l1_weight: float = 4.0
    kl_weight: float = 6e-6
    adv_weight: float = 1.0
    fm_weight: float = 1.0

    def __post_init__(self):
        if not math.isclose(self.omega_video + self.omega_audio, 1.0, abs_tol=1e-9):
            raise ValueError("modality weights must sum to 1")

    def omega(self, modality):
        return self.omega_video if modality == "video" else self.omega_audio


@dataclass
class TrainSchedule:
    stage1_steps: int
    disc_start: int
    step: int = 0

    @property
    def stage(self):
        return 1 if self.step < self.stage1_steps else 2


def gamma(step, disc_start):
    """Adversarial activation factor: 0 before ``disc_start``, 1 from it on."""
    return 0.0 if step < disc_start else 1.0


def kl_standard_normal(mean, logvar):
    """Closed-form KL(N(mean, exp(logvar)) || N(0, 1)) summed over everything."""
    return 0.5 * (mean.pow(2) + logvar.exp() - logvar - 1.0).sum()


def kl_batchmean(posterior):
    """KL of an OrthoLatents posterior, summed per sample and averaged over the batch."""
    batch = posterior.mean[0].shape[0]
    return sum(kl_standard_normal(m, lv) for m, lv in zip(posterior.mean, posterior.logvar)) / batch


def rec_loss(x, x_hat, posterior=None, l1_weight=4.0, kl_weight=6e-6):
    """Return (total, l1_term, kl_term)."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    l1 = l1_weight * (x - x_hat).abs().mean()
    kl = x_hat.new_zeros(()) if posterior is None or kl_weight == 0 else kl_weight * kl_batchmean(posterior)
    return l1 + kl, l1, kl


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel(img):
    """(N, 1, H, W) -> horizontal and vertical Sobel responses, edge-replicated."""
    kx = _SOBEL_X.to(img.dtype)[None, None]
    ky = kx.transpose(-1, -2)
    padded = F.pad(img, (1, 1, 1, 1), mode="replicate")
    return F.conv2d(padded, kx), F.conv2d(padded, ky)


def perceptual_proxy(x, x_hat, scales=3):
    """L1 between Sobel gradient maps at ``scales`` dyadic resolutions.

    Inputs are (B, T, H, W[, C]) clips.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.dim() == 4:
        x, x_hat = x[..., None], x_hat[..., None]
    H, W = x.shape[2:4]

    def frames(v):
        return v.permute(0, 1, 4, 2, 3).reshape(-1, 1, H, W)

    a, b = frames(x), frames(x_hat)
    total = x.new_zeros(())
    for s in range(scales):
        if s:
            a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
        for ga, gb in zip(sobel(a), sobel(b)):
            total = total + (ga - gb).abs().mean()
    return total / scales


class PatchDiscriminator(nn.Module):
    """Strided 3D conv stack over a (B, T, H, W, C) clip; one logit per patch."""

    def __init__(self, channels, width=32):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv3d(channels, width, (3, 4, 4), stride=(1, 2, 2), padding=1),
            nn.Conv3d(width, 2 * width, (3, 4, 4), stride=(1, 2, 2), padding=1),
            nn.Conv3d(2 * width, 1, 3, padding=1),
        ])
        fan_in_uniform_(self)

    def forward(self, x):
        if x.dim() == 4:
            x = x[..., None]
        h = x.permute(0, 4, 1, 2, 3)
        feats = []
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.leaky_relu(h, 0.2)
                feats.append(h)
        return h, feats


def adversarial_losses(real, fake, D):
    """Hinge losses and feature matching. Returns (gen_loss, disc_loss, fm_loss).

    The discriminator loss sees a detached ``fake``; feature matching compares
    detached real features against fake features.
    """
    logits_fake, feats_fake = D(fake)
    with torch.no_grad():
        _, feats_real = D(real)
    gen = -logits_fake.mean()
    fm = sum((fr - ff).abs().mean() for fr, ff in zip(feats_real, feats_fake)) / len(feats_fake)
    disc = discriminator_loss(real, fake, D)
    return gen, disc, fm


def discriminator_loss(real, fake, D):
    logits_real, _ = D(real.detach())
    logits_fake, _ = D(fake.detach())
    return F.relu(1.0 - logits_real).mean() + F.relu(1.0 + logits_fake).mean()


def total_loss(batch, outputs, weights, schedule, discriminators=None):
    """Weighted multi-modal generator objective.

    ``batch`` and ``outputs`` map modality -> clip; ``outputs['posterior']``
    is the encoder LatentPair. Returns (total, report) where report holds
    each weighted term; the terms sum to the total.
    """
    stage = schedule.stage
    g = 0.0 if stage == 1 else gamma(schedule.step, schedule.disc_start)
    kl_w = 0.0 if stage == 1 else weights.kl_weight
    posterior = outputs.get("posterior")
    total = None
    report = {"step": schedule.step, "stage": stage, "gamma": g}
    for m in MODALITIES:
        x = batch[m]
        x_hat = outputs.get(f"{m}_raw", outputs[m])
        post = getattr(posterior, m) if posterior is not None else None
        _, l1, kl = rec_loss(x, x_hat, post, weights.l1_weight, kl_w)
        perc = perceptual_proxy(x, x_hat)
        adv = fm = x_hat.new_zeros(())
        if g and discriminators is not None:
            D = discriminators[m]
            logits, feats_fake = D(x_hat)
            with torch.no_grad():
                _, feats_real = D(x)
            adv = weights.adv_weight * -logits.mean()
            fm = weights.fm_weight * sum((fr - ff).abs().mean() for fr, ff in zip(feats_real, feats_fake)) / len(feats_fake)
        w = weights.omega(m)
        terms = {"l1": w * l1, "kl": w * kl, "perc": w * perc, "adv": w * g * adv, "fm": w * g * fm}
        for name, value in terms.items():
            report[f"{m}/{name}"] = float(value.detach())
            total = value if total is None else total + value
    report["total"] = float(total.detach())
    report["nonfinite"] = [k for k, v in report.items() if isinstance(v, float) and not math.isfinite(v)]
    return total, report


def format_report(report):
    """Single key=value log line."""
    parts = []
    for k, v in report.items():
        if isinstance(v, float):
            parts.append(f"{k}={v:.6g}")
        elif isinstance(v, list):
            parts.append(f"{k}={','.join(v) if v else '-'}")
        else:
            parts.append(f"{k}={v}")
    return " ".join(parts)
