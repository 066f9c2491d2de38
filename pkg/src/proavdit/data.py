"""Clip datasets: on-disk layout, ingestion/validation, and the synthetic
"jumping square + click track" fixture whose motion and onsets coincide."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .audio import IngestError, MelConfig, Waveform, build_video_like_audio, read_wav, write_wav

log = logging.getLogger(__name__)

FIXTURE_EVENTS = ((2, 12), (5,), (3, 13), (8,))


@dataclass
class ClipRecord:
    clip_id: str
    frames_dir: Path
    wav_path: Path
    label: int
    fps: int
    n_frames: int
    duration: float


@dataclass
class ClipError:
    clip_id: str
    reason: str


# ---------------------------------------------------------------- fixture


def _click(cfg, freq, rng):
    n = int(0.06 * cfg.sample_rate)
    t = np.arange(n) / cfg.sample_rate
    env = np.exp(-t / 0.008)
    return 0.8 * env * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))


def fixture_clip(index, T=16, H=32, W=32, cfg=None, events=None, seed=0, audio_shift=0):
    """Build one synthetic clip. Returns (video (T, H, W, 3) in [0, 1], Waveform, events).

    The square only moves at event frames (a jump of at least half its side)
    and each event frame's audio chunk carries one click over a quiet hum.
    ``audio_shift`` delays the clicks by that many frames (clicks pushed past
    the end are dropped) to build deliberately misaligned clips.
    """
    cfg = cfg or MelConfig()
    rng = np.random.default_rng(seed * 1000 + index)
    events = tuple(FIXTURE_EVENTS[index % len(FIXTURE_EVENTS)] if events is None else events)
    size = max(H // 4, 2)

    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    c0, c1 = rng.uniform(0.1, 0.5, 3), rng.uniform(0.1, 0.5, 3)
    background = c0 * (1 - yy[..., None]) + c1 * xx[..., None]
    color = rng.uniform(0.7, 1.0, 3)

    positions = []
    pos = rng.integers(0, [H - size, W - size])
    for t in range(T):
        if t in events:
            while True:
                new = rng.integers(0, [H - size, W - size])
                if np.abs(new - pos).max() >= max(size // 2, 1):
                    break
            pos = new
        positions.append(pos.copy())

    video = np.repeat(background[None], T, axis=0)
    for t, (py, px) in enumerate(positions):
        video[t, py:py + size, px:px + size] = color

    # quiet steady hum so silent frames still carry spectral content;
    # a constant spectrum adds no onset energy
    n = T * cfg.chunk_len
    t = np.arange(n) / cfg.sample_rate
    hum = rng.uniform(110.0, 330.0)
    samples = sum(0.02 / k * np.sin(2 * np.pi * k * hum * t + rng.uniform(0, 2 * np.pi)) for k in (1, 2, 3))
    freq = rng.uniform(600.0, 2400.0)
    for e in events:
        e = e + audio_shift
        if not 0 <= e < T:
            continue
        start = e * cfg.chunk_len + cfg.chunk_len // 5
        click = _click(cfg, freq, rng)
        samples[start:start + len(click)] += click
    return np.clip(video, 0.0, 1.0), Waveform(samples, cfg.sample_rate), events


def write_clip(root, clip_id, video, wave, label, fps):
    d = Path(root) / clip_id
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(video):
        img = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(img).save(d / "frames" / f"{t:04d}.png")
    write_wav(d / "audio.wav", wave)
    (d / "meta.json").write_text(json.dumps({"label": int(label), "fps": int(fps)}, sort_keys=True) + "\n")
    return d


def make_fixture(root, n_clips=4, T=16, H=32, W=32, cfg=None, seed=0):
    cfg = cfg or MelConfig()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(n_clips):
        video, wave, _ = fixture_clip(i, T, H, W, cfg, seed=seed)
        write_clip(root, f"clip_{i:03d}", video, wave, label=i % 2, fps=cfg.fps)
    return root


# ---------------------------------------------------------------- ingestion


def ingest_dataset(root, T=16, fps=8, strict=False):
    """Validate clip directories under ``root``.

    Returns (records, errors) with records sorted by clip id. With ``strict``
    the first invalid clip raises IngestError.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"dataset root {root} does not exist")
    records, errors = [], []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            records.append(_validate_clip(d, T, fps))
        except IngestError as exc:
            if strict:
                raise
            log.warning("skipping clip %s: %s", d.name, exc)
            errors.append(ClipError(d.name, str(exc)))
    if not records:
        log.warning("no valid clips under %s", root)
    return records, errors


def _validate_clip(d, T, fps):
    frames_dir, wav = d / "frames", d / "audio.wav"
    if not wav.exists():
        raise IngestError("missing audio.wav")
    if not frames_dir.is_dir():
        raise IngestError("missing frames/ directory")
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    clip_fps = int(meta.get("fps", fps))
    frames = sorted(frames_dir.glob("*.png"))
    if len(frames) != T:
        raise IngestError(f"frame-count mismatch: found {len(frames)}, expected {T}")
    for f in frames:
        try:
            with Image.open(f) as im:
                im.verify()
        except Exception as exc:  # PIL raises a variety of types
            raise IngestError(f"unreadable image {f.name}: {exc}") from exc
    w = read_wav(wav)
    duration = len(frames) / clip_fps
    if abs(w.duration - duration) > 1.0 / clip_fps:
        raise IngestError(f"audio lasts {w.duration:.3f}s but {len(frames)} frames at {clip_fps} fps last {duration:.3f}s")
    return ClipRecord(d.name, frames_dir, wav, int(meta.get("label", 0)), clip_fps, len(frames), w.duration)


def load_video(record, H, W):
    frames = []
    for f in sorted(record.frames_dir.glob("*.png")):
        with Image.open(f) as im:
            im = im.convert("RGB")
            if im.size != (W, H):
                im = im.resize((W, H), Image.BILINEAR)
            frames.append(np.asarray(im, dtype=np.float32) / 255.0)
    return torch.from_numpy(np.stack(frames))


def load_clip(record, H, W, mel_cfg):
    """(video (T, H, W, 3), VideoLikeAudio, Waveform) for one record."""
    video = load_video(record, H, W)
    wave = read_wav(record.wav_path, rate=mel_cfg.sample_rate)
    audio = build_video_like_audio(wave, record.n_frames, H, W, mel_cfg)
    return video, audio, wave
