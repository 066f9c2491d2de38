"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import os
import typing
from dataclasses import asdict, dataclass, fields, replace

from .audio import MelConfig
from .core import ConfigError
from .diffusion import DiffusionConfig
from .mdsa import MDSAConfig
from .objectives import LossWeights

DATA_ROOT_ENV = "PROAV_DATA_ROOT"


@dataclass(frozen=True)
class RunConfig:
    # paths and seeding
    data_root: str = "data"
    out_dir: str = "runs"
    seed: int = 0
    # clip geometry
    frames: int = 16
    height: int = 32
    width: int = 32
    # video-like audio
    sample_rate: int = 16000
    fps: int = 8
    n_mels: int = 64
    fft_size: int = 512
    hop_size: int = 128
    f_min: float = 0.0
    f_max: typing.Optional[float] = None
    log_floor: float = 1e-5
    gl_iters: int = 60
    # autoencoder
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
    # autoencoder objective and schedule
    omega_video: float = 0.5
    omega_audio: float = 0.5
    l1_weight: float = 4.0
    kl_weight: float = 6e-6
    adv_weight: float = 1.0
    fm_weight: float = 1.0
    disc_start: int = 1000
    stage1_fraction: float = 0.3
    disc_width: int = 32
    # autoencoder optimisation
    ae_steps: int = 5000
    ae_batch: int = 8
    ae_lr: float = 1e-4
    # diffusion transformer
    depth: int = 16
    dit_heads: int = 4
    hidden: int = 256
    mlp_ratio: int = 4
    patch_h: int = 4
    patch_w: int = 4
    patch_t: int = 1
    num_classes: int = 2
    sample_steps: int = 30
    bound: float = 5.0
    scale_clips: int = 256
    label_drop: float = 0.1
    # diffusion optimisation
    diff_steps: int = 5000
    diff_batch: int = 8
    diff_lr: float = 1e-4
    weight_decay: float = 0.0
    # bookkeeping and evaluation
    log_every: int = 50
    ckpt_every: int = 1000
    mi_bins: int = 32
    mi_draws: int = 16

    def __post_init__(self):
        if self.ae_batch < 1 or self.diff_batch < 1:
            raise ConfigError("batch sizes must be positive")
        if not 0.0 <= self.stage1_fraction <= 1.0:
            raise ConfigError("stage1_fraction must lie in [0, 1]")

    def with_(self, **kw):
        return replace(self, **kw)

    # derived module configs -------------------------------------------------

    def mel(self):
        return MelConfig(self.sample_rate, self.fps, self.n_mels, self.fft_size, self.hop_size,
                         self.f_min, self.f_max, self.log_floor)

    def mdsa(self):
        names = {f.name for f in fields(MDSAConfig)}
        kw = {k: v for k, v in asdict(self).items() if k in names}
        return MDSAConfig(**kw)

    def diffusion(self):
        m = self.mdsa()
        from .diffusion import frame_size

        fh, fw = frame_size(self.frames, m.latent_height, m.latent_width)
        return DiffusionConfig(
            depth=self.depth, heads=self.dit_heads, hidden=self.hidden, mlp_ratio=self.mlp_ratio,
            patch_h=self.patch_h, patch_w=self.patch_w, patch_t=self.patch_t, c_lat=self.c_lat,
            frame_h=fh, frame_w=fw, num_classes=self.num_classes, steps=self.sample_steps, bound=self.bound,
        )

    def loss_weights(self):
        return LossWeights(self.omega_video, self.omega_audio, self.l1_weight, self.kl_weight,
                           self.adv_weight, self.fm_weight)

    def stage1_steps(self):
        return int(round(self.stage1_fraction * self.ae_steps))


_TYPES = typing.get_type_hints(RunConfig)


def _format(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key, text):
    tp = _TYPES[key]
    optional = typing.get_origin(tp) is typing.Union
    if optional:
        if text.lower() == "none":
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    try:
        if tp is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None


def serialize(cfg):
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def parse(text, base=None):
    """Parse ``key = value`` lines (``#`` starts a comment) over ``base`` defaults."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, value)
    return replace(base or RunConfig(), **values)


def load_config(path=None, overrides=None, env=None):
    """Config from an optional file, then ``overrides``, then the data-root env var."""
    env = os.environ if env is None else env
    cfg = RunConfig()
    if path is not None:
        with open(path) as f:
            cfg = parse(f.read(), cfg)
    if overrides:
        unknown = set(overrides) - set(_TYPES)
        if unknown:
            raise ConfigError(f"unknown keys: {sorted(unknown)}")
        cfg = replace(cfg, **overrides)
    if env.get(DATA_ROOT_ENV):
        cfg = replace(cfg, data_root=env[DATA_ROOT_ENV])
    return cfg
