"""Fit the 2-D two-component toy by flow matching and compare sample moments.

    python scripts/toy_flow.py [--steps 5000] [--samples 2000]
"""

import argparse
import json

import torch

from proavdit.diffusion import ToyMixture, model_velocity, sample, train_toy_flow


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--samples", type=int, default=2000)
    ap.add_argument("--sampler-steps", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    toy = ToyMixture()
    model, loss = train_toy_flow(toy, steps=args.steps, seed=args.seed)
    x = sample(model_velocity(model), (args.samples, 2), steps=args.sampler_steps, seed=args.seed + 1)
    out = {
        "final_loss": loss,
        "mean": x.mean(0).tolist(), "target_mean": toy.mean().tolist(),
        "cov": torch.cov(x.T).tolist(), "target_cov": toy.covariance().tolist(),
    }
    print(json.dumps(out, indent=1))


if __name__ == "__main__":
    main()
