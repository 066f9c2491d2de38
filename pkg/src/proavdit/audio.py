"""Video-like audio: per-video-frame log-mel images, their inversion by
pseudo-inverse mel + Griffin-Lim, and 16-bit PCM WAV I/O."""

from __future__ import annotations

import logging
import math
import wave
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .core import ConfigError

log = logging.getLogger(__name__)


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    fps: int = 8
    n_mels: int = 64
    fft_size: int = 512
    hop_size: int = 128
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.hop_size > self.fft_size:
            raise ConfigError(f"hop {self.hop_size} exceeds fft size {self.fft_size}")
        if not (0 <= self.f_min < self.top_freq <= self.sample_rate / 2):
            raise ConfigError(f"need 0 <= f_min < f_max <= {self.sample_rate / 2}")
        if self.sample_rate % self.fps:
            raise ConfigError(f"sample rate {self.sample_rate} not divisible by fps {self.fps}")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def top_freq(self):
        return self.sample_rate / 2 if self.f_max is None else self.f_max

    @property
    def chunk_len(self):
        return self.sample_rate // self.fps

    @property
    def n_bins(self):
        """STFT time bins per chunk (centred, zero padded)."""
        return 1 + self.chunk_len // self.hop_size

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class VideoLikeAudio:
    frames: torch.Tensor  # (T, H, W) in [0, 1]
    chunk_boundaries: list
    norm: tuple  # (min_db, max_db) for the clip
    extra: dict = field(default_factory=dict)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg):
    """Triangular mel filters, shape (n_mels, fft_size // 2 + 1)."""
    n_freq = cfg.fft_size // 2 + 1
    freqs = np.arange(n_freq) * cfg.sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.top_freq), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_freq))
    for i in range(cfg.n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(rise, fall))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if len(empty):
        raise ConfigError(
            f"{len(empty)} empty mel filters (first index {empty[0]}): n_mels={cfg.n_mels} too large "
            f"for fft_size={cfg.fft_size}"
        )
    return fb


def filter_centers(cfg):
    return mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.top_freq), cfg.n_mels + 2))[1:-1]


def _window(cfg, dtype=torch.float64):
    return torch.hann_window(cfg.fft_size, periodic=True, dtype=dtype)


def stft(x, cfg):
    """Centred, zero-padded STFT of a 1-D tensor -> complex (n_freq, n_bins)."""
    return torch.stft(
        x, cfg.fft_size, cfg.hop_size, window=_window(cfg, x.dtype), center=True,
        pad_mode="constant", return_complex=True,
    )


def istft(X, cfg, length):
    return torch.istft(X, cfg.fft_size, cfg.hop_size, window=_window(cfg), center=True, length=length)


def chunk_log_mel(chunk, cfg, fb=None):
    """Log-mel image (n_mels, n_bins) in dB of one audio chunk."""
    fb = mel_filterbank(cfg) if fb is None else fb
    mag = stft(torch.as_tensor(chunk, dtype=torch.float64), cfg).abs().numpy()
    mel = fb @ mag
    return 20.0 * np.log10(np.maximum(mel, cfg.log_floor))


def resize(img, size):
    """Bilinear (antialiased when shrinking) resize of a 2-D array."""
    t = torch.as_tensor(img, dtype=torch.float64)[None, None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False, antialias=True)
    return out[0, 0].numpy()


def chunk_boundaries(T, cfg):
    n = cfg.chunk_len
    return [(i * n, (i + 1) * n) for i in range(T)]


def clip_log_mel(w, T, cfg):
    """Unresized log-mel images for every chunk, (T, n_mels, n_bins) in dB."""
    samples = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)
    need = T * cfg.chunk_len
    if len(samples) < need:
        raise IngestError(f"waveform has {len(samples)} samples; {need} required for {T} frames at {cfg.fps} fps")
    fb = mel_filterbank(cfg)
    return np.stack([chunk_log_mel(samples[a:b], cfg, fb) for a, b in chunk_boundaries(T, cfg)])


def build_video_like_audio(w, T, H, W, cfg=None, norm=None):
    """Chunk the waveform per video frame, take each chunk's log-mel, resize to
    H x W and min-max normalise over the whole clip (or with a given ``norm``)."""
    cfg = cfg or MelConfig()
    if isinstance(w, Waveform) and w.sample_rate != cfg.sample_rate:
        w = resample(w, cfg.sample_rate)
    mels = clip_log_mel(w, T, cfg)
    imgs = np.stack([resize(m, (H, W)) for m in mels])
    if norm is None:
        norm = (float(imgs.min()), float(imgs.max()))
    frames = normalize(imgs, norm)
    return VideoLikeAudio(torch.as_tensor(frames, dtype=torch.float32), chunk_boundaries(T, cfg), norm)


def normalize(x, norm):
    lo, hi = norm
    span = hi - lo
    if span <= 0:
        return np.zeros_like(x)
    return (x - lo) / span


def denormalize(x, norm):
    lo, hi = norm
    return np.asarray(x, dtype=np.float64) * (hi - lo) + lo


def mel_pseudo_inverse(mel, fb):
    """Non-negative linear magnitudes from mel magnitudes via a clipped pseudo-inverse."""
    return np.maximum(np.linalg.pinv(fb) @ mel, 0.0)


def griffin_lim(mag, cfg, length, n_iter=60, seed=0, return_residuals=False):
    """Recover a waveform whose STFT magnitude approximates ``mag`` (n_freq, n_bins).

    Residuals are the spectral convergence ||  |STFT x| - mag ||_F / ||mag||_F
    after each iteration.
    """
    mag_t = torch.as_tensor(mag, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    phase = torch.rand(mag_t.shape, generator=gen, dtype=torch.float64) * 2 * math.pi
    X = torch.polar(mag_t, phase)
    ref = max(torch.linalg.norm(mag_t).item(), 1e-30)
    residuals = []
    x = istft(X, cfg, length)
    for _ in range(n_iter):
        Y = stft(x, cfg)
        residuals.append(torch.linalg.norm(Y.abs() - mag_t).item() / ref)
        X = torch.polar(mag_t, torch.angle(Y))
        x = istft(X, cfg, length)
    out = x.numpy()
    if return_residuals:
        return out, residuals
    return out


def invert_video_like_audio(a, cfg=None, norm=None, n_iter=60, seed=0):
    """Frames (T, H, W) in normalised units -> Waveform, without a vocoder."""
    cfg = cfg or MelConfig()
    frames = a.frames if isinstance(a, VideoLikeAudio) else a
    norm = norm if norm is not None else a.norm
    frames = np.asarray(torch.as_tensor(frames, dtype=torch.float64))
    fb = mel_filterbank(cfg)
    out = []
    for i, img in enumerate(frames):
        db = resize(denormalize(img, norm), (cfg.n_mels, cfg.n_bins))
        mel = 10.0 ** (db / 20.0)
        mag = mel_pseudo_inverse(mel, fb)
        out.append(griffin_lim(mag, cfg, cfg.chunk_len, n_iter=n_iter, seed=seed + i))
    samples = np.clip(np.concatenate(out), -1.0, 1.0)
    return Waveform(samples.astype(np.float64), cfg.sample_rate)


def log_spectral_distance(ref_db, est_db):
    """Mean over spectrogram columns of the RMS dB difference across mel bands."""
    ref_db = np.asarray(ref_db).reshape(-1, *np.shape(ref_db)[-2:])
    est_db = np.asarray(est_db).reshape(ref_db.shape)
    diff = (ref_db - est_db) ** 2  # (chunks, mels, bins)
    return float(np.sqrt(diff.mean(axis=1)).mean())


# ---------------------------------------------------------------- WAV I/O


def resample(w, rate):
    if w.sample_rate == rate:
        return w
    log.warning("resampling audio from %d Hz to %d Hz", w.sample_rate, rate)
    n_out = int(round(len(w.samples) * rate / w.sample_rate))
    t_out = np.arange(n_out) / rate
    t_in = np.arange(len(w.samples)) / w.sample_rate
    return Waveform(np.interp(t_out, t_in, w.samples), rate)


def read_wav(path, rate=None):
    """Read 16-bit PCM mono WAV into a normalised Waveform."""
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise IngestError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        if f.getnchannels() != 1:
            raise IngestError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        sr = f.getframerate()
        data = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    w = Waveform(data.astype(np.float64) / 32768.0, sr)
    if rate is not None:
        w = resample(w, rate)
    return w


def write_wav(path, w):
    pcm = np.clip(np.round(np.asarray(w.samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(pcm.tobytes())
