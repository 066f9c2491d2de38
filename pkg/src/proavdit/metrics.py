"""Evaluation metrics: onset / motion peak detection, AV-Align, histogram
mutual information with Miller-Madow correction, and PSNR."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.ndimage import uniform_filter

from .audio import MelConfig, Waveform, stft

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
ALIGN_WINDOW = 3
PEAK_RADIUS = 4
PEAK_STD_MULT = 1.0
PEAK_MIN_REL = 0.1


@dataclass
class PeakSet:
    indices: tuple
    source: str
    length: int = 0

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"peak indices must be strictly increasing: {idx}")
        if self.length and idx and not (0 <= idx[0] and idx[-1] < self.length):
            raise ValueError(f"peak indices {idx} outside [0, {self.length})")
        self.indices = idx

    def __len__(self):
        return len(self.indices)


@dataclass
class MIEstimate:
    pair: str
    value: float  # clamped at 0
    raw: float
    bins: int
    samples: int
    degenerate: bool = False


# ---------------------------------------------------------------- peak picking


def pick_peaks(x, radius=PEAK_RADIUS, k=PEAK_STD_MULT, min_rel=PEAK_MIN_REL):
    """Indices that are local maxima and exceed moving mean + k * moving std
    over a window of +-radius (truncated at the ends).

    Candidates below ``min_rel`` times the clip maximum are dropped, so a flat
    noise floor does not yield peaks.
    """
    x = np.asarray(x, dtype=np.float64)
    floor = min_rel * x.max() if len(x) else 0.0
    peaks = []
    for i in range(len(x)):
        lo, hi = max(0, i - radius), min(len(x), i + radius + 1)
        win = x[lo:hi]
        left = x[i - 1] if i > 0 else -np.inf
        right = x[i + 1] if i + 1 < len(x) else -np.inf
        if x[i] >= left and x[i] > right and x[i] > win.mean() + k * win.std() and x[i] > floor:
            peaks.append(i)
    return peaks


def spectral_flux(samples, cfg):
    """Half-wave-rectified frame-to-frame STFT magnitude increase, summed over bins."""
    mag = stft(torch.as_tensor(samples, dtype=torch.float64), cfg).abs().numpy()
    diff = np.diff(mag, axis=1, prepend=mag[:, :1])
    flux = np.maximum(diff, 0.0).sum(axis=0)
    # hops whose window reaches into the zero padding change by construction
    centers = np.arange(len(flux)) * cfg.hop_size
    half = cfg.fft_size // 2
    flux[: half // cfg.hop_size + 1] = 0.0
    flux[centers + half > len(samples)] = 0.0
    return flux


def detect_audio_onsets(w, T, cfg=None):
    cfg = cfg or MelConfig()
    samples = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)
    samples = samples[: T * cfg.chunk_len]
    flux = spectral_flux(samples, cfg)
    frame_of_hop = np.minimum(np.arange(len(flux)) * cfg.hop_size // cfg.chunk_len, T - 1)
    per_frame = np.zeros(T)
    np.maximum.at(per_frame, frame_of_hop, flux)
    return PeakSet(tuple(pick_peaks(per_frame)), "audio-onset", T)


# ---------------------------------------------------------------- optical flow


def to_gray(video):
    v = np.asarray(video, dtype=np.float64)
    if v.ndim == 4:
        v = v[..., :3] @ np.array([0.299, 0.587, 0.114]) if v.shape[-1] >= 3 else v[..., 0]
    return v


def lucas_kanade(I0, I1, window=5, min_eig=1e-4):
    """Dense single-scale, single-iteration Lucas-Kanade flow (u, v) from I0 to I1.

    Pixels whose structure tensor is ill-conditioned get zero flow.
    """
    gy0, gx0 = np.gradient(I0)
    gy1, gx1 = np.gradient(I1)
    Ix, Iy, It = 0.5 * (gx0 + gx1), 0.5 * (gy0 + gy1), I1 - I0
    n = window * window

    def box(a):
        return uniform_filter(a, size=window, mode="nearest") * n

    a, b, c = box(Ix * Ix), box(Ix * Iy), box(Iy * Iy)
    p, q = box(Ix * It), box(Iy * It)
    det = a * c - b * b
    tr = a + c
    lam_min = 0.5 * (tr - np.sqrt(np.maximum(tr * tr - 4 * det, 0.0)))
    ok = lam_min > min_eig
    safe = np.where(ok, det, 1.0)
    u = np.where(ok, -(c * p - b * q) / safe, 0.0)
    v = np.where(ok, -(a * q - b * p) / safe, 0.0)
    return u, v


def motion_energy(video):
    """Mean flow magnitude per frame; entry t is the t-1 -> t transition, entry 0 is 0."""
    g = to_gray(video)
    out = np.zeros(len(g))
    for t in range(1, len(g)):
        u, v = lucas_kanade(g[t - 1], g[t])
        out[t] = np.hypot(u, v).mean()
    return out


def detect_video_motion_peaks(video):
    """``video`` is (T, H, W[, C]) with T >= 2."""
    g = to_gray(video)
    if len(g) < 2:
        raise ValueError("motion peaks need at least two frames")
    return PeakSet(tuple(pick_peaks(motion_energy(g))), "video-flow", len(g))


# ---------------------------------------------------------------- AV-Align


def _matched_fraction(src, dst, window):
    if not src:
        return 0.0
    dst = np.asarray(dst)
    hits = sum(1 for a in src if len(dst) and np.abs(dst - a).min() <= window)
    return hits / len(src)


def av_align(A, V, window=ALIGN_WINDOW):
    """Mean of the two directional peak-match rates within +-window frames.
    An empty set contributes a directional term of 0."""
    a = list(A.indices if isinstance(A, PeakSet) else A)
    v = list(V.indices if isinstance(V, PeakSet) else V)
    return 0.5 * (_matched_fraction(a, v, window) + _matched_fraction(v, a, window))


# ---------------------------------------------------------------- mutual information


def estimate_mi(a, b, bins=32, pair=""):
    """Histogram MI in nats between paired scalar samples, Miller-Madow corrected."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in count: {a.size} vs {b.size}")
    N = a.size
    if N < 1000:
        log.warning("MI estimate from only %d samples (>= 1000 recommended)", N)
    if N == 0 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return MIEstimate(pair, 0.0, 0.0, bins, N, degenerate=True)
    joint, _, _ = np.histogram2d(a, b, bins=bins, range=[[a.min(), a.max()], [b.min(), b.max()]])
    pab = joint / N
    pa, pb = pab.sum(axis=1), pab.sum(axis=0)
    nz = pab > 0
    plug_in = float((pab[nz] * np.log(pab[nz] / np.outer(pa, pb)[nz])).sum())
    m_a, m_b, m_ab = int((pa > 0).sum()), int((pb > 0).sum()), int(nz.sum())
    raw = plug_in + (m_a + m_b - m_ab - 1) / (2.0 * N)
    return MIEstimate(pair, max(raw, 0.0), raw, bins, N)


def paired_axis_samples(z_a, z_b, axis_a, axis_b):
    """Reduce two latents of shape (S, X, Y, C) to one scalar per (sample, shared index).

    ``axis_a``/``axis_b`` give the position (1 or 2) of the shared axis in each
    latent; everything else is averaged away.
    """
    ra = torch.as_tensor(z_a).mean(dim=-1).mean(dim=3 - axis_a)
    rb = torch.as_tensor(z_b).mean(dim=-1).mean(dim=3 - axis_b)
    return ra.reshape(-1).numpy(), rb.reshape(-1).numpy()


# latent t is (H', W'), h is (T, W'), w is (T, H'): which axis each pair shares
MI_PAIRS = {
    "t-h": ("t", "h", 2, 2),  # W'
    "t-w": ("t", "w", 1, 2),  # H'
    "h-w": ("h", "w", 1, 1),  # T
}


def latent_mi(latents, bins=32):
    """MI for the three axis-latent pairs of one modality; ``latents`` maps
    axis -> (S, X, Y, C) samples pooled over clips and posterior draws."""
    out = {}
    for name, (x, y, ax, ay) in MI_PAIRS.items():
        a, b = paired_axis_samples(latents[x], latents[y], ax, ay)
        out[name] = estimate_mi(a, b, bins, pair=name)
    return out


# ---------------------------------------------------------------- PSNR


def psnr(x, x_hat, peak=1.0):
    x = torch.as_tensor(x, dtype=torch.float64)
    x_hat = torch.as_tensor(x_hat, dtype=torch.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = float(((x - x_hat) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


# ---------------------------------------------------------------- reports


@dataclass
class ClipMetrics:
    clip_id: str
    av_align: float | None = None
    psnr_video: float | None = None
    psnr_audio: float | None = None
    mi: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def mi_dict(estimates):
    return {k: {"value": e.value, "raw": e.raw, "bins": e.bins, "samples": e.samples, "degenerate": e.degenerate}
            for k, e in estimates.items()}


def aggregate(records):
    """Mean and std of every numeric field across clip records."""
    out = {"clip_id": "__aggregate__", "count": len(records)}
    for key in ("av_align", "psnr_video", "psnr_audio"):
        vals = [getattr(r, key) for r in records if getattr(r, key) is not None]
        if vals:
            out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return out


def write_jsonl(path, rows):
    with open(path, "w") as f:
        for row in rows:
            f.write((row if isinstance(row, str) else json.dumps(row, sort_keys=True)) + "\n")
