"""The two-phase pipeline: autoencoder training, latent diffusion training,
generation, evaluation, MI probing and reconstruction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import metrics
from .audio import IngestError, Waveform, invert_video_like_audio, write_wav
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint, tensor_digest
from .config import RunConfig, parse, serialize
from .core import OptimizerState, adamw_step, named_trainable
from .data import ingest_dataset, load_clip
from .diffusion import (
    STDiT,
    StackedLatent,
    flow_matching_loss,
    frame_size,
    latent_scale,
    make_pad_mask,
    model_velocity,
    sample,
    stack_latents,
    unstack_latents,
)
from .mdsa import MDSA, LatentPair, OrthoLatents
from .objectives import PatchDiscriminator, TrainSchedule, discriminator_loss, format_report, gamma, total_loss

log = logging.getLogger(__name__)

AE_FILE = "ae.ckpt"
DIT_FILE = "dit.ckpt"
CACHE_FILE = "latents.ckpt"


# ---------------------------------------------------------------- data


@dataclass
class Clip:
    clip_id: str
    video: torch.Tensor  # (T, H, W, 3)
    audio: torch.Tensor  # (T, H, W)
    norm: tuple
    wave: Waveform
    label: int


class ClipDataset:
    """Ingested clips, converted to tensors on first access and kept in memory."""

    def __init__(self, cfg, records):
        self.cfg = cfg
        self.records = list(records)
        self._cache = {}

    @classmethod
    def from_root(cls, cfg, root=None, strict=False):
        records, _ = ingest_dataset(root or cfg.data_root, cfg.frames, cfg.fps, strict=strict)
        if not records:
            raise IngestError(f"no valid clips under {root or cfg.data_root}")
        return cls(cfg, records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        if i not in self._cache:
            r = self.records[i]
            video, audio, wave = load_clip(r, self.cfg.height, self.cfg.width, self.cfg.mel())
            self._cache[i] = Clip(r.clip_id, video, audio.frames, audio.norm, wave, r.label)
        return self._cache[i]

    def batch(self, indices):
        clips = [self[int(i)] for i in indices]
        return {
            "video": torch.stack([c.video for c in clips]),
            "audio": torch.stack([c.audio for c in clips]),
            "label": torch.tensor([c.label for c in clips]),
        }


def batch_indices(n, batch, step, seed):
    """Indices of the batch at ``step``: a fresh seeded permutation per epoch,
    so the order depends only on (seed, step) and resumes exactly."""
    start = step * batch
    out = []
    while len(out) < batch:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        out.extend(perm[offset:offset + batch - len(out)].tolist())
    return out


def step_generator(seed, step, salt=0):
    return torch.Generator().manual_seed(int(np.random.default_rng([seed, step, salt]).integers(2 ** 62)))


# ---------------------------------------------------------------- checkpoint helpers


def _opt_tensors(prefix, state):
    return {f"{prefix}.{k}": v for k, v in state.tensors().items()}


def _opt_meta(state):
    return {"lr": state.lr, "betas": list(state.betas), "eps": state.eps,
            "weight_decay": state.weight_decay, "step": state.step}


def _restore_opt(ckpt, prefix, meta):
    state = OptimizerState(lr=meta["lr"], betas=tuple(meta["betas"]), eps=meta["eps"],
                           weight_decay=meta["weight_decay"], step=meta["step"])
    state.load_tensors(ckpt.group(prefix))
    return state


def _load_params(module, tensors, what):
    own = module.state_dict()
    missing = sorted(set(own) - set(tensors))
    extra = sorted(set(tensors) - set(own))
    bad = [f"{k}: checkpoint {tuple(tensors[k].shape)} vs model {tuple(own[k].shape)}"
           for k in own if k in tensors and tensors[k].shape != own[k].shape]
    if missing or extra or bad:
        raise CheckpointError(
            f"{what} checkpoint does not match the configured model; "
            f"missing={missing[:5]} unexpected={extra[:5]} shape mismatches={bad[:5]}"
        )
    module.load_state_dict(tensors)


def _check_dims(ckpt, cfg, keys, what):
    saved = parse(ckpt.config_text)
    diff = [f"{k}: checkpoint {getattr(saved, k)!r} vs config {getattr(cfg, k)!r}"
            for k in keys if getattr(saved, k) != getattr(cfg, k)]
    if diff:
        raise CheckpointError(f"{what} checkpoint dimensions differ from config: " + "; ".join(diff))


AE_KEYS = ("frames", "height", "width", "downsample", "c_mid", "c_lat", "heads", "enc_blocks", "dec_blocks",
           "proj_layers", "proj_heads", "proj_hidden", "proj_mlp", "block_t", "block_h", "block_w", "share_gcm")
DIT_KEYS = AE_KEYS + ("depth", "dit_heads", "hidden", "mlp_ratio", "patch_h", "patch_w", "patch_t", "num_classes")


def load_autoencoder(path, cfg):
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "autoencoder":
        raise CheckpointError(f"{path} is not an autoencoder checkpoint")
    _check_dims(ckpt, cfg, AE_KEYS, "autoencoder")
    model = MDSA(cfg.mdsa())
    _load_params(model, ckpt.group("ae"), "autoencoder")
    return model, ckpt


def load_diffusion(path, cfg):
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "diffusion":
        raise CheckpointError(f"{path} is not a diffusion checkpoint")
    _check_dims(ckpt, cfg, DIT_KEYS, "diffusion")
    model = STDiT(cfg.diffusion())
    _load_params(model, ckpt.group("dit"), "diffusion")
    return model, ckpt


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing prerequisite {what} checkpoint: {path}")
    return path


# ---------------------------------------------------------------- autoencoder training


def _append_jsonl(path, row):
    with open(path, "a") as f:
        f.write(json.dumps(row, sort_keys=True) + "\n")


def train_autoencoder(cfg, dataset=None, steps=None, resume=None, out_dir=None):
    """Train MDSA (plus discriminators once gamma switches on).

    Returns (final checkpoint path, list of per-step reports).
    """
    steps = cfg.ae_steps if steps is None else steps
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset or ClipDataset.from_root(cfg)
    torch.manual_seed(cfg.seed)
    model = MDSA(cfg.mdsa())
    discs = {"video": PatchDiscriminator(3, cfg.disc_width),
             "audio": PatchDiscriminator(1, cfg.disc_width)}
    gen_opt = OptimizerState(lr=cfg.ae_lr, weight_decay=cfg.weight_decay)
    disc_opt = {m: OptimizerState(lr=cfg.ae_lr, weight_decay=cfg.weight_decay) for m in discs}
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(_require(resume, "autoencoder"))
        _check_dims(ckpt, cfg, AE_KEYS, "autoencoder")
        _load_params(model, ckpt.group("ae"), "autoencoder")
        for m, D in discs.items():
            _load_params(D, ckpt.group(f"disc.{m}"), f"{m} discriminator")
            disc_opt[m] = _restore_opt(ckpt, f"opt.disc.{m}", ckpt.meta["opt"][f"disc.{m}"])
        gen_opt = _restore_opt(ckpt, "opt.gen", ckpt.meta["opt"]["gen"])
        start = ckpt.step
    gen_params = named_trainable(model)
    disc_params = {m: named_trainable(D) for m, D in discs.items()}
    schedule = TrainSchedule(cfg.stage1_steps(), cfg.disc_start)
    weights = cfg.loss_weights()
    log_path = out / "ae_log.jsonl"
    reports = []
    path = out / AE_FILE

    for step in range(start, steps):
        schedule.step = step
        batch = dataset.batch(batch_indices(len(dataset), cfg.ae_batch, step, cfg.seed))
        # stage 1 reconstructs from the posterior mean; stage 2 samples it
        mode = "mean" if schedule.stage == 1 else "sample"
        outputs = model(batch["video"], batch["audio"], mode=mode, generator=step_generator(cfg.seed, step))
        g_on = schedule.stage == 2 and gamma(step, cfg.disc_start) == 1.0
        loss, report = total_loss(batch, outputs, weights, schedule, discs if g_on else None)
        for p in (*gen_params.values(), *(q for d in disc_params.values() for q in d.values())):
            p.grad = None
        loss.backward()
        adamw_step(gen_params, gen_opt)
        if g_on:
            for m, D in discs.items():
                for p in disc_params[m].values():
                    p.grad = None
                d_loss = weights.omega(m) * discriminator_loss(batch[m], outputs[f"{m}_raw"], D)
                d_loss.backward()
                adamw_step(disc_params[m], disc_opt[m])
                report[f"{m}/disc"] = float(d_loss.detach())
        reports.append(report)
        if report["nonfinite"]:
            log.warning("non-finite loss terms at step %d: %s", step, report["nonfinite"])
        if step % cfg.log_every == 0 or step == steps - 1:
            log.info("ae %s", format_report(report))
            _append_jsonl(log_path, report)
        done = step + 1
        if done % cfg.ckpt_every == 0 or done == steps:
            ckpt = _ae_checkpoint(cfg, model, discs, gen_opt, disc_opt, done)
            save_checkpoint(path, ckpt)
            if done % cfg.ckpt_every == 0:
                save_checkpoint(out / f"ae_step{done:07d}.ckpt", ckpt)
    if start >= steps and not path.exists():
        save_checkpoint(path, _ae_checkpoint(cfg, model, discs, gen_opt, disc_opt, start))
    return path, reports


def _ae_checkpoint(cfg, model, discs, gen_opt, disc_opt, step):
    tensors = {f"ae.{k}": v for k, v in model.state_dict().items()}
    opt = {"gen": _opt_meta(gen_opt)}
    tensors.update(_opt_tensors("opt.gen", gen_opt))
    for m, D in discs.items():
        tensors.update({f"disc.{m}.{k}": v for k, v in D.state_dict().items()})
        tensors.update(_opt_tensors(f"opt.disc.{m}", disc_opt[m]))
        opt[f"disc.{m}"] = _opt_meta(disc_opt[m])
    return Checkpoint(serialize(cfg), step, tensors, {"kind": "autoencoder", "opt": opt})


# ---------------------------------------------------------------- latents


@torch.no_grad()
def encode_clip(model, clip):
    """Posterior-mean latents of one clip (always encoded on its own, so
    cached and on-the-fly latents are bit-identical)."""
    post = model.encode(clip.video[None], clip.audio[None])
    return LatentPair(OrthoLatents(*post.video.mean), OrthoLatents(*post.audio.mean))


def cat_pairs(pairs):
    def cat(group):
        return OrthoLatents(*(torch.cat(zs) for zs in zip(*(getattr(p, group).as_tuple() for p in pairs))))

    return LatentPair(cat("video"), cat("audio"))


def latent_cache(model, dataset, path=None, ae_digest=None):
    """Encode every clip, reusing ``path`` when it was built from the same autoencoder."""
    if path is not None and Path(path).exists():
        ckpt = load_checkpoint(path)
        if ckpt.meta.get("ae_digest") == ae_digest and ckpt.meta.get("clips") == [r.clip_id for r in dataset.records]:
            return [_pair_from(ckpt.group(str(i))) for i in range(len(dataset))]
    pairs = [encode_clip(model, dataset[i]) for i in range(len(dataset))]
    if path is not None:
        tensors = {}
        for i, p in enumerate(pairs):
            tensors.update(_pair_tensors(str(i), p))
        meta = {"kind": "latents", "ae_digest": ae_digest, "clips": [r.clip_id for r in dataset.records]}
        save_checkpoint(path, Checkpoint("", 0, tensors, meta))
    return pairs


def _pair_tensors(prefix, pair):
    out = {}
    for m in ("video", "audio"):
        for ax, z in zip("thw", getattr(pair, m).as_tuple()):
            out[f"{prefix}.{m}.{ax}"] = z
    return out


def _pair_from(tensors):
    return LatentPair(*(OrthoLatents(*(tensors[f"{m}.{ax}"] for ax in "thw")) for m in ("video", "audio")))


def stack_template(cfg, scale):
    """An empty StackedLatent carrying shapes, mask and scale for ``cfg``."""
    m = cfg.mdsa()
    T, Hp, Wp = cfg.frames, m.latent_height, m.latent_width
    Fh, Fw = frame_size(T, Hp, Wp)
    shapes = ((Hp, Wp), (T, Wp), (T, Hp)) * 2
    return StackedLatent(torch.zeros(0, 6, Fh, Fw, cfg.c_lat), make_pad_mask(shapes, Fh, Fw), shapes, scale)


# ---------------------------------------------------------------- diffusion training


def train_diffusion(cfg, ae_path=None, dataset=None, steps=None, resume=None, out_dir=None, use_cache=True):
    """Flow-matching training of STDiT on frozen autoencoder latents.

    Returns (final checkpoint path, list of per-step reports).
    """
    steps = cfg.diff_steps if steps is None else steps
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ae_path = _require(ae_path or out / AE_FILE, "autoencoder")
    ae, _ = load_autoencoder(ae_path, cfg)
    ae.eval()
    for p in ae.parameters():
        p.requires_grad_(False)
    digest = tensor_digest(ae.state_dict())
    dataset = dataset or ClipDataset.from_root(cfg)

    if use_cache:
        pairs = latent_cache(ae, dataset, out / CACHE_FILE, digest)

        def latents_for(idx):
            return cat_pairs([pairs[i] for i in idx])
    else:
        pairs = [encode_clip(ae, dataset[i]) for i in range(min(len(dataset), cfg.scale_clips))]

        def latents_for(idx):
            return cat_pairs([encode_clip(ae, dataset[i]) for i in idx])

    torch.manual_seed(cfg.seed)
    dit = STDiT(cfg.diffusion())
    opt = OptimizerState(lr=cfg.diff_lr, weight_decay=cfg.weight_decay)
    start = 0
    scale = latent_scale(pairs[: cfg.scale_clips])
    if resume is not None:
        ckpt = load_checkpoint(_require(resume, "diffusion"))
        _check_dims(ckpt, cfg, DIT_KEYS, "diffusion")
        _load_params(dit, ckpt.group("dit"), "diffusion")
        opt = _restore_opt(ckpt, "opt.dit", ckpt.meta["opt"])
        scale = ckpt.tensors["latent_scale"].clone()
        start = ckpt.step
    params = named_trainable(dit)
    norms = np.array([dataset[i].norm for i in range(len(dataset))], dtype=np.float64)
    audio_norm = [float(norms[:, 0].mean()), float(norms[:, 1].mean())]
    log_path = out / "dit_log.jsonl"
    reports = []
    path = out / DIT_FILE

    for step in range(start, steps):
        idx = batch_indices(len(dataset), cfg.diff_batch, step, cfg.seed)
        stacked = stack_latents(latents_for(idx), scale)
        gen = step_generator(cfg.seed, step, salt=1)
        P0 = torch.randn(stacked.P.shape, generator=gen)
        t = torch.rand(len(idx), generator=gen)
        labels = torch.tensor([dataset[i].label for i in idx])
        drop = torch.rand(len(idx), generator=gen) < cfg.label_drop
        labels = torch.where(drop, torch.full_like(labels, cfg.num_classes), labels)
        loss = flow_matching_loss(model_velocity(dit), P0, stacked.P, t, labels, stacked.pad_mask)
        for p in params.values():
            p.grad = None
        loss.backward()
        adamw_step(params, opt)
        report = {"step": step, "loss": float(loss.detach())}
        reports.append(report)
        if step % cfg.log_every == 0 or step == steps - 1:
            log.info("dit %s", format_report(report))
            _append_jsonl(log_path, report)
        done = step + 1
        if done % cfg.ckpt_every == 0 or done == steps:
            ckpt = _dit_checkpoint(cfg, dit, opt, scale, done, digest, audio_norm)
            save_checkpoint(path, ckpt)
            if done % cfg.ckpt_every == 0:
                save_checkpoint(out / f"dit_step{done:07d}.ckpt", ckpt)
    if tensor_digest(ae.state_dict()) != digest:
        raise RuntimeError("autoencoder parameters changed during diffusion training")
    if start >= steps and not path.exists():
        save_checkpoint(path, _dit_checkpoint(cfg, dit, opt, scale, start, digest, audio_norm))
    return path, reports


def _dit_checkpoint(cfg, dit, opt, scale, step, ae_digest, audio_norm):
    tensors = {f"dit.{k}": v for k, v in dit.state_dict().items()}
    tensors.update(_opt_tensors("opt.dit", opt))
    tensors["latent_scale"] = scale
    meta = {"kind": "diffusion", "opt": _opt_meta(opt), "ae_digest": ae_digest, "audio_norm": audio_norm}
    return Checkpoint(serialize(cfg), step, tensors, meta)


# ---------------------------------------------------------------- generation


def write_frames(directory, frames):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        arr = np.round(np.clip(np.asarray(frame, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr).save(directory / f"{t:04d}.png")


def write_clip_dir(root, clip_id, video, audio_frames, norm, cfg, label, seed=0, extra=None):
    """Write a clip in the ingest layout (frames/, audio.wav, meta.json)."""
    d = Path(root) / clip_id
    write_frames(d / "frames", video)
    wave = invert_video_like_audio(audio_frames, cfg.mel(), norm=tuple(norm), n_iter=cfg.gl_iters, seed=seed)
    write_wav(d / "audio.wav", wave)
    meta = {"label": int(label), "fps": cfg.fps, **(extra or {})}
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return d, wave


@torch.no_grad()
def generate(cfg, n=2, label=None, seed=None, ae_path=None, dit_path=None, out_dir=None, verbose=False):
    """Sample ``n`` clips; returns (manifest rows, per-sample sampler traces)."""
    seed = cfg.seed if seed is None else seed
    base = Path(cfg.out_dir)
    ae, _ = load_autoencoder(_require(ae_path or base / AE_FILE, "autoencoder"), cfg)
    dit, ckpt = load_diffusion(_require(dit_path or base / DIT_FILE, "diffusion"), cfg)
    ae.eval()
    dit.eval()
    if label is not None and not 0 <= label <= cfg.num_classes:
        raise ValueError(f"label {label} outside [0, {cfg.num_classes}]")
    template = stack_template(cfg, ckpt.tensors["latent_scale"])
    shape = (1, *template.P.shape[1:])
    out = Path(out_dir or base / "samples")
    out.mkdir(parents=True, exist_ok=True)
    rows, traces = [], []
    for k in range(n):
        sample_seed = int(np.random.default_rng([seed, k]).integers(2 ** 31))
        trace = []
        P = sample(model_velocity(dit), shape, steps=cfg.sample_steps, seed=sample_seed,
                   condition=None if label is None else torch.tensor([label]),
                   pad_mask=template.pad_mask, bound=cfg.bound, verbose=verbose, trace=trace)
        video, audio = ae.decode_latents(unstack_latents(template, P))
        video, audio = video.clamp(0, 1)[0], audio.clamp(0, 1)[0]
        clip_id = f"sample_{k:03d}"
        d, wave = write_clip_dir(out, clip_id, video.numpy(), audio.numpy(), ckpt.meta["audio_norm"], cfg,
                                 label=cfg.num_classes if label is None else label, seed=sample_seed,
                                 extra={"seed": sample_seed})
        row = {"sample": clip_id, "seed": sample_seed, "label": label, "frames": cfg.frames,
               "duration": wave.duration, "steps": len(trace), "dir": str(d)}
        rows.append(row)
        traces.append(trace)
    metrics.write_jsonl(out / "manifest.jsonl", rows)
    return rows, traces


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def reconstruct_clip(model, clip):
    out = model(clip.video[None], clip.audio[None], mode="mean")
    return out["video"][0], out["audio"][0]


@torch.no_grad()
def probe_mi(cfg, model, dataset, draws=None):
    """Pairwise MI between the three axis latents of each modality, pooled
    over clips and posterior draws."""
    draws = cfg.mi_draws if draws is None else draws
    pools = {m: {ax: [] for ax in "thw"} for m in ("video", "audio")}
    for i in range(len(dataset)):
        clip = dataset[i]
        post = model.encode(clip.video[None], clip.audio[None])
        gen = step_generator(cfg.seed, i, salt=2)
        for m in ("video", "audio"):
            ortho = getattr(post, m)
            for ax, mean, logvar in zip("thw", ortho.mean, ortho.logvar):
                std = torch.exp(0.5 * logvar)
                eps = torch.randn((draws, *mean.shape[1:]), generator=gen)
                pools[m][ax].append(mean + std * eps)
    return {m: metrics.latent_mi({ax: torch.cat(v) for ax, v in pools[m].items()}, cfg.mi_bins)
            for m in pools}


def clip_av_align(video, wave, cfg):
    A = metrics.detect_audio_onsets(wave, cfg.frames, cfg.mel())
    V = metrics.detect_video_motion_peaks(np.asarray(video))
    return metrics.av_align(A, V)


def evaluate(cfg, ae_path=None, dataset=None, report_path=None):
    """Per-clip PSNR and AV-Align plus one aggregate line (with latent MI).

    Without an autoencoder the clips are scored against themselves.
    """
    dataset = dataset or ClipDataset.from_root(cfg)
    model = None
    if ae_path is not None:
        model, _ = load_autoencoder(_require(ae_path, "autoencoder"), cfg)
        model.eval()
    records = []
    for i in range(len(dataset)):
        clip = dataset[i]
        if model is None:
            v_hat, a_hat, wave = clip.video, clip.audio, clip.wave
        else:
            v_hat, a_hat = reconstruct_clip(model, clip)
            wave = invert_video_like_audio(a_hat, cfg.mel(), norm=clip.norm, n_iter=cfg.gl_iters)
        records.append(metrics.ClipMetrics(
            clip.clip_id,
            av_align=clip_av_align(v_hat, wave, cfg),
            psnr_video=metrics.psnr(clip.video, v_hat),
            psnr_audio=metrics.psnr(clip.audio, a_hat),
        ))
    agg = metrics.aggregate(records)
    if model is not None:
        agg["mi"] = {m: metrics.mi_dict(est) for m, est in probe_mi(cfg, model, dataset).items()}
    rows = [r.to_json() for r in records] + [agg]
    if report_path is not None:
        metrics.write_jsonl(report_path, rows)
    return records, agg


def reconstruct(cfg, ae_path=None, dataset=None, out_dir=None):
    """Write autoencoder reconstructions of every clip in the ingest layout."""
    dataset = dataset or ClipDataset.from_root(cfg)
    model, _ = load_autoencoder(_require(ae_path or Path(cfg.out_dir) / AE_FILE, "autoencoder"), cfg)
    model.eval()
    out = Path(out_dir or Path(cfg.out_dir) / "recon")
    rows = []
    for i in range(len(dataset)):
        clip = dataset[i]
        v_hat, a_hat = reconstruct_clip(model, clip)
        d, _ = write_clip_dir(out, clip.clip_id, v_hat.numpy(), a_hat.numpy(), clip.norm, cfg, clip.label)
        rows.append({"clip_id": clip.clip_id, "dir": str(d), "psnr_video": metrics.psnr(clip.video, v_hat),
                     "psnr_audio": metrics.psnr(clip.audio, a_hat)})
    metrics.write_jsonl(out / "manifest.jsonl", rows)
    return rows


def psnr_pair(model, dataset):
    """Mean reconstruction PSNR (video, audio frames) over a dataset."""
    pv, pa = [], []
    for i in range(len(dataset)):
        clip = dataset[i]
        v_hat, a_hat = reconstruct_clip(model, clip)
        pv.append(metrics.psnr(clip.video, v_hat))
        pa.append(metrics.psnr(clip.audio, a_hat))
    return float(np.mean(pv)), float(np.mean(pa))



def train_until_psnr(cfg, dataset=None, target_db=30.0, eval_every=250, out_dir=None):
    """Train the autoencoder in ``eval_every``-step chunks (resuming each time)
    until both reconstruction PSNRs exceed ``target_db`` or ``cfg.ae_steps`` is
    reached. Returns (checkpoint path, [(step, psnr_video, psnr_audio), ...])."""
    dataset = dataset or ClipDataset.from_root(cfg)
    history = []
    path = None
    for stop in range(eval_every, cfg.ae_steps + eval_every, eval_every):
        stop = min(stop, cfg.ae_steps)
        path, _ = train_autoencoder(cfg, dataset, steps=stop, resume=path, out_dir=out_dir)
        model, _ = load_autoencoder(path, cfg)
        pv, pa = psnr_pair(model, dataset)
        history.append((stop, pv, pa))
        log.info("overfit step=%d psnr_video=%.2f psnr_audio=%.2f", stop, pv, pa)
        if pv > target_db and pa > target_db:
            break
    return path, history
