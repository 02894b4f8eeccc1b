#!/usr/bin/env python3
"""Desk-scale training run: small net, 4096-step batches, fast iterations.

Usage:
    python scripts/train_desk.py [--seed N] [--iters N] [--out DIR] [--profile runner]
"""

import argparse

from morphogen import trainer
from morphogen.config import RunConfig, apply_profile


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iters", type=int, default=80)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--profile", default="runner",
                    choices=["runner", "crawler", "glider", "walker"])
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = RunConfig()
    apply_profile(cfg, "desk")
    cfg.env.profile = args.profile
    cfg.train.iterations = args.iters
    cfg.train.workers = args.workers
    cfg.train.seed = args.seed
    cfg.train.out_dir = args.out or f"runs/desk_{args.profile}_s{args.seed}"

    _, rows, out_dir = trainer.train(cfg)
    rets = [r["mean_episode_return"] for r in rows]
    print(f"iter 0 return: {rets[0]:.1f}")
    print(f"final (mean of last 10): {sum(rets[-10:]) / 10:.1f}")
    print(f"artifacts: {out_dir}")


if __name__ == "__main__":
    main()
