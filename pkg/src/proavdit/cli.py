"""Command-line entry point: ``proavdit <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict

from . import pipeline
from .config import load_config, parse
from .core import ConfigError
from .data import ingest_dataset, make_fixture

log = logging.getLogger("proavdit")


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--steps", type=int, help="training steps (train-ae / train-diff)")
    common.add_argument("--label", type=int, help="class label for generation (omit for unconditional)")
    common.add_argument("--strict", action="store_true", help="abort on the first invalid clip")
    common.add_argument("--verbose", action="store_true", help="debug logging and per-step sampler logs")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")

    p = argparse.ArgumentParser(prog="proavdit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("make-fixture", parents=[common], help="write the synthetic aligned fixture").add_argument(
        "--clips", type=int, default=4)
    sub.add_parser("ingest", parents=[common], help="validate the dataset and list clips")
    tr = sub.add_parser("train-ae", parents=[common], help="train the autoencoder")
    tr.add_argument("--resume", help="checkpoint to resume from")
    td = sub.add_parser("train-diff", parents=[common], help="train the latent diffusion model")
    td.add_argument("--resume", help="checkpoint to resume from")
    td.add_argument("--ae", help="autoencoder checkpoint")
    td.add_argument("--no-cache", action="store_true", help="encode latents on the fly")
    g = sub.add_parser("generate", parents=[common], help="sample new clips")
    g.add_argument("-n", type=int, default=2)
    g.add_argument("--out", help="output directory")
    ev = sub.add_parser("evaluate", parents=[common], help="PSNR / AV-Align / MI report")
    ev.add_argument("--ae", help="autoencoder checkpoint (omit to score clips against themselves)")
    ev.add_argument("--data", help="clip directory to evaluate (e.g. generated samples)")
    ev.add_argument("--report", help="JSON-lines output path")
    mi = sub.add_parser("probe-mi", parents=[common], help="pairwise MI between axis latents")
    mi.add_argument("--ae", help="autoencoder checkpoint")
    rc = sub.add_parser("reconstruct", parents=[common], help="write autoencoder reconstructions")
    rc.add_argument("--ae", help="autoencoder checkpoint")
    rc.add_argument("--out", help="output directory")
    return p


def _overrides(args):
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args):
    cfg = load_config(args.config)
    extra = _overrides(args)
    if extra:
        cfg = parse("\n".join(f"{k} = {v}" for k, v in extra.items()), cfg)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


def _emit(row):
    print(json.dumps(row, sort_keys=True, default=str))


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        return _dispatch(args, cfg)
    except (ConfigError, pipeline.CheckpointError, ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2


def _dispatch(args, cfg):
    cmd = args.command
    if cmd == "make-fixture":
        make_fixture(cfg.data_root, args.clips, cfg.frames, cfg.height, cfg.width, cfg.mel(), seed=cfg.seed)
        _emit({"fixture": cfg.data_root, "clips": args.clips})
    elif cmd == "ingest":
        records, errors = ingest_dataset(cfg.data_root, cfg.frames, cfg.fps, strict=args.strict)
        for r in records:
            _emit({"clip_id": r.clip_id, "label": r.label, "frames": r.n_frames, "fps": r.fps,
                   "duration": r.duration, "ok": True})
        for e in errors:
            _emit({"clip_id": e.clip_id, "ok": False, "error": e.reason})
    elif cmd == "train-ae":
        data = pipeline.ClipDataset.from_root(cfg, strict=args.strict)
        path, reports = pipeline.train_autoencoder(cfg, data, steps=args.steps, resume=args.resume)
        _emit({"checkpoint": str(path), "steps": len(reports), "final": reports[-1] if reports else None})
    elif cmd == "train-diff":
        data = pipeline.ClipDataset.from_root(cfg, strict=args.strict)
        path, reports = pipeline.train_diffusion(cfg, args.ae, data, steps=args.steps, resume=args.resume,
                                                 use_cache=not args.no_cache)
        _emit({"checkpoint": str(path), "steps": len(reports), "final": reports[-1] if reports else None})
    elif cmd == "generate":
        rows, _ = pipeline.generate(cfg, n=args.n, label=args.label, out_dir=args.out, verbose=args.verbose)
        for row in rows:
            _emit(row)
    elif cmd == "evaluate":
        data = pipeline.ClipDataset.from_root(cfg, root=args.data, strict=args.strict)
        records, agg = pipeline.evaluate(cfg, args.ae, data, report_path=args.report)
        for r in records:
            _emit(asdict(r))
        _emit(agg)
    elif cmd == "probe-mi":
        data = pipeline.ClipDataset.from_root(cfg, strict=args.strict)
        model, _ = pipeline.load_autoencoder(args.ae or f"{cfg.out_dir}/{pipeline.AE_FILE}", cfg)
        for modality, est in pipeline.probe_mi(cfg, model, data).items():
            for name, e in est.items():
                _emit({"modality": modality, **asdict(e)})
    elif cmd == "reconstruct":
        data = pipeline.ClipDataset.from_root(cfg, strict=args.strict)
        for row in pipeline.reconstruct(cfg, args.ae, data, out_dir=args.out):
            _emit(row)
    return 0


if __name__ == "__main__":
    sys.exit(main())
