#!/usr/bin/env python3
"""Render a run's best morphology and report its greedy evaluation.

Usage:
    python scripts/show_agent.py runs/desk_runner_s0 [--episodes 5]
"""

import argparse
from pathlib import Path

from morphogen import trainer
from morphogen.config import RunConfig, load_file
from morphogen.morphology import deserialize
from morphogen.render import render_svg


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir")
    ap.add_argument("--episodes", type=int, default=5)
    args = ap.parse_args()
    run_dir = Path(args.run_dir)

    graph = deserialize((run_dir / "best_morph.json").read_text())
    svg_path = run_dir / "best_morph.svg"
    svg_path.write_text(render_svg(graph))
    print(f"rendered {svg_path} ({graph.n_limbs()} limbs, depth {graph.max_depth()})")

    ckpts = sorted(run_dir.glob("ckpt_*.bin"),
                   key=lambda p: int(p.stem.split("_")[1]))
    if not ckpts:
        print("no checkpoints found; skipping evaluation")
        return
    cfg = load_file(str(run_dir / "config.snapshot"), RunConfig())
    net = trainer.load_net(cfg, str(ckpts[-1]))
    stats = trainer.evaluate(cfg, net, args.episodes)
    for key, val in stats.items():
        print(f"{key}: {val}")


if __name__ == "__main__":
    main()
