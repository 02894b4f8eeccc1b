"""Command-line front end: train / eval / render / inspect.

Configuration flows file -> profile -> --set overrides -> --seed/--out; the
resolved snapshot is written before anything runs. Exit codes: 0 success,
2 configuration or input error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from . import trainer
from .config import ConfigError, RunConfig
from .envsim import CodesignEnv, Stage
from .morphology import ParseError, deserialize
from .net import MorphNet
from .render import render_svg

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("morphogen")


def _setup_logging() -> None:
    level = os.environ.get("MORPHOGEN_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="config file (dotted key = value lines)")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   dest="overrides", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--out", metavar="DIR", help="output directory (train.out_dir)")
    p.add_argument("--profile", choices=["desk", "paper"],
                   help="apply the desk or paper hyperparameter profile")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphogen",
        description="Joint morphology/control optimization for planar agents")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    _add_common(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint greedily")
    _add_common(p_eval)
    p_eval.add_argument("checkpoint", help="checkpoint file (ckpt_*.bin)")
    p_eval.add_argument("--episodes", type=int, default=10,
                        help="evaluation episode count")

    p_render = sub.add_parser("render", help="render a morphology (or checkpoint) to SVG")
    _add_common(p_render)
    p_render.add_argument("input", help="morphology .json document or checkpoint .bin")
    p_render.add_argument("output", help="output .svg path")

    p_inspect = sub.add_parser("inspect", help="report checkpoint contents")
    _add_common(p_inspect)
    p_inspect.add_argument("checkpoint", help="checkpoint file to inspect")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        cfgmod.load_file(args.config, cfg)
    if args.profile:
        cfgmod.apply_profile(cfg, args.profile)
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        cfgmod.set_key(cfg, key.strip(), val.strip())
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.train.out_dir = args.out
    cfgmod.validate(cfg)
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    try:
        _, rows, out_dir = trainer.train(cfg)
    except trainer.RunAborted as exc:
        log.error("run aborted: %s", exc)
        return EXIT_RUNTIME
    final = rows[-1]["mean_episode_return"] if rows else float("nan")
    print(f"trained {len(rows)} iterations; final mean return {final:.3f}; "
          f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    net = trainer.load_net(cfg, args.checkpoint)
    stats = trainer.evaluate(cfg, net, args.episodes)
    for key in ("episodes", "mean_return", "std_return", "mean_limbs",
                "mean_depth", "terminated_early_frac"):
        print(f"{key}: {stats[key]}")
    return EXIT_OK


def _attention_shading(cfg: RunConfig, net: MorphNet):
    """Greedy-design a body, then shade limbs by mean attention received
    on the first control observation."""
    env = CodesignEnv(cfg.env, cfg.morph)
    rng = np.random.default_rng(cfg.train.seed)
    env.reset()
    from . import policy as pol
    while env.stage != Stage.CTRL:
        head = net.policy_single(env.observe(), env.paths(), int(env.stage))
        rec = pol.sample(trainer._stage_output(net, head, int(env.stage)),
                         rng, greedy=True)
        env.design_step(rec.actions)
    net.captured_attention = []
    net.policy_single(env.observe(), env.paths(), 2)
    attn = net.captured_attention[-1]     # (1, heads, L, L), last block
    weights = attn[0].mean(axis=(0, 1))   # mean attention received per limb
    weights = weights / max(weights.max(), 1e-12)
    order = env.graph.preorder()
    return env.graph, {limb_id: float(weights[i]) for i, limb_id in enumerate(order)}


def cmd_render(args) -> int:
    if args.input.endswith(".bin"):
        cfg = resolve_config(args)
        net = trainer.load_net(cfg, args.input)
        graph, shading = _attention_shading(cfg, net)
        svg = render_svg(graph, attention=shading)
    else:
        text = Path(args.input).read_text(encoding="utf-8")
        graph = deserialize(text)
        svg = render_svg(graph)
    Path(args.output).write_text(svg, encoding="utf-8")
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    arrays, registry = ckpt.load(args.checkpoint)
    cfg_path = Path(args.checkpoint).parent / "config.snapshot"
    cfg = RunConfig()
    if args.config:
        cfg = resolve_config(args)
    elif cfg_path.is_file():
        cfgmod.load_file(str(cfg_path), cfg)
    print(f"checkpoint: {args.checkpoint}")
    print(f"config hash: {cfgmod.config_hash(cfg)}")
    counts: dict[str, int] = {}
    total = 0
    for name, arr in arrays.items():
        if name.startswith(("opt/", "meta/")):
            continue
        key = "/".join(name.split("/")[:2])
        counts[key] = counts.get(key, 0) + arr.size
        total += arr.size
    print("parameters by component:")
    for key in sorted(counts):
        print(f"  {key}: {counts[key]}")
    print(f"total parameters: {total}")
    print(f"registry rows allocated: {len(registry)}")
    print("registry paths (lexicographic):")
    for path in sorted(registry):
        print(f"  {list(path)} -> row {registry[path]}")
    if "meta/iteration" in arrays:
        print(f"iterations completed: {int(arrays['meta/iteration'][0])}")
    return EXIT_OK


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {"train": cmd_train, "eval": cmd_eval,
               "render": cmd_render, "inspect": cmd_inspect}[args.command]
    try:
        return handler(args)
    except (ConfigError, ParseError, ckpt.CheckpointError, FileNotFoundError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except trainer.RunAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
