"""Overfit the autoencoder on the 4-clip fixture and report PSNR every chunk.

    python scripts/overfit_ae.py [--config configs/desk_overfit.cfg] [--threads N]
"""

import argparse
import json
import logging
import time

import torch

from proavdit import pipeline
from proavdit.config import load_config
from proavdit.data import make_fixture


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/desk_overfit.cfg")
    ap.add_argument("--threads", type=int, default=0, help="torch intra-op threads (0 keeps the default)")
    ap.add_argument("--target", type=float, default=30.0)
    ap.add_argument("--eval-every", type=int, default=250)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    cfg = load_config(args.config)
    make_fixture(cfg.data_root, 4, cfg.frames, cfg.height, cfg.width, cfg.mel(), seed=cfg.seed)
    t0 = time.time()
    path, history = pipeline.train_until_psnr(cfg, target_db=args.target, eval_every=args.eval_every)
    for step, pv, pa in history:
        print(json.dumps({"step": step, "psnr_video": round(pv, 3), "psnr_audio": round(pa, 3)}))
    print(json.dumps({"checkpoint": str(path), "seconds": round(time.time() - t0, 1)}))


if __name__ == "__main__":
    main()
