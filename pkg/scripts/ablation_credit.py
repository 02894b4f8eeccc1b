#!/usr/bin/env python3
"""Compare stage-split credit assignment against plain advantage estimation.

Trains the same seeds twice (credit_mode stage_split vs gae_all) and prints
final returns side by side.

Usage:
    python scripts/ablation_credit.py [--seeds 0 1 2] [--iters N]
"""

import argparse

import numpy as np

from morphogen import trainer
from morphogen.config import RunConfig, apply_profile


def run(seed, mode, iters, workers):
    cfg = RunConfig()
    apply_profile(cfg, "desk")
    cfg.ppo.credit_mode = mode
    cfg.train.iterations = iters
    cfg.train.workers = workers
    cfg.train.seed = seed
    cfg.train.checkpoint_every = 10 ** 6
    cfg.train.out_dir = f"runs/ablation_{mode}_s{seed}"
    _, rows, _ = trainer.train(cfg)
    rets = [r["mean_episode_return"] for r in rows]
    return float(np.mean(rets[-10:]))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--iters", type=int, default=80)
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args()

    print(f"{'seed':>4} {'stage_split':>12} {'gae_all':>12}")
    wins = 0
    for seed in args.seeds:
        full = run(seed, "stage_split", args.iters, args.workers)
        flat = run(seed, "gae_all", args.iters, args.workers)
        wins += flat <= full
        print(f"{seed:>4} {full:>12.1f} {flat:>12.1f}")
    print(f"stage-split credit >= ablation in {wins}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
