"""Synchronous training loop: fork-join rollout workers, registry sync,
advantage computation, the policy/value update, checkpoints and metrics.

Workers hold immutable parameter snapshots and private environments; the
only data crossing back is the rollout buffer plus queued registry misses.
Every random stream is derived from (seed, role, iteration), so single-worker
runs are bit-reproducible and checkpoint resume continues the exact same
trajectory.
"""

from __future__ import annotations

import logging
import math
import multiprocessing
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import numcore as nc
from . import physics
from . import policy as pol
from .config import RunConfig, parse_text, to_text, validate
from .credit import Episode, RolloutBuffer, Transition, compute_advantages
from .envsim import CodesignEnv, Stage
from .morphology import serialize
from .net import MorphNet
from .ppo import Updater

log = logging.getLogger("morphogen.trainer")

METRICS_COLUMNS = ("iter", "mean_episode_return", "policy_loss", "value_loss",
                   "clip_frac", "kl", "mean_limbs", "wallclock_s")

_LEARNER_TAG = 0x4C4E
_EVAL_TAG = 0xE7A1


class RunAborted(RuntimeError):
    pass


@dataclass
class EpisodeSummary:
    total_return: float
    final_limbs: int
    final_depth: int
    terminated_early: bool


def summarize(ep: Episode) -> EpisodeSummary:
    last = ep.transitions[-1]
    return EpisodeSummary(total_return=ep.total_return(),
                          final_limbs=ep.final_limbs,
                          final_depth=ep.final_depth,
                          terminated_early=bool(last.terminated))


def worker_rng(seed: int, worker_id: int, iteration: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, worker_id, iteration])))


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------

def _stage_output(net: MorphNet, head: np.ndarray, stage: int) -> pol.StagePolicyOutput:
    name = ("topo", "attr", "ctrl")[stage]
    logstd = None
    if name in net.logstds:
        logstd = np.clip(net.logstds[name].data, net.cfg.logstd_min, net.cfg.logstd_max)
    return pol.StagePolicyOutput(stage, head, logstd)


def run_episode(env: CodesignEnv, net: MorphNet, rng, step_budget: int,
                greedy: bool = False):
    """One full episode; control is cut early only when the budget runs out.

    Returns (episode, ok). ok=False means the simulator diverged and the
    episode must be discarded.
    """
    env.reset()
    ep = Episode()
    while env.stage != Stage.CTRL:
        obs = env.observe()
        paths = tuple(env.paths())
        stage = int(env.stage)
        head = net.policy_single(obs, paths, stage)
        rec = pol.sample(_stage_output(net, head, stage), rng, greedy=greedy)
        env.design_step(rec.actions)
        ep.transitions.append(Transition(
            stage=stage, obs=obs, paths=paths, action=rec.actions,
            log_prob=rec.log_prob, reward=0.0, terminated=False, truncated=False))
    final_obs = None
    while True:
        obs = env.observe()
        paths = tuple(env.paths())
        head = net.policy_single(obs, paths, 2)
        rec = pol.sample(_stage_output(net, head, 2), rng, greedy=greedy)
        try:
            res = env.control_step(rec.actions)
        except physics.SimulationDiverged:
            log.warning("episode discarded: simulation diverged")
            return None, False
        tr = Transition(stage=2, obs=obs, paths=paths, action=rec.actions,
                        log_prob=rec.log_prob, reward=res.reward,
                        terminated=res.terminated, truncated=res.truncated)
        ep.transitions.append(tr)
        if res.terminated:
            break
        if res.truncated or len(ep.transitions) >= step_budget:
            tr.terminated = False
            tr.truncated = True
            final_obs = res.obs
            break
    ep.final_obs = final_obs
    ep.final_paths = tuple(env.paths())
    ep.morph_doc = serialize(env.graph)
    ep.final_limbs = env.graph.n_limbs()
    ep.final_depth = env.graph.max_depth()
    return ep, True


_WORKER_CACHE: dict = {}


def _cohort_width(cfg: RunConfig) -> int:
    """Lockstep episodes per cohort, capped so the quota overshoot stays
    under one episode length even when every member gets cut at once."""
    n_design = cfg.env.n_topo + cfg.env.n_attr
    return max(1, min(16, (cfg.env.horizon + n_design) // (n_design + 1)))


class _Slot:
    __slots__ = ("env", "ep", "diverged")

    def __init__(self, cfg):
        self.env = CodesignEnv(cfg.env, cfg.morph)
        self.env.reset()
        self.ep = Episode()
        self.diverged = False


def _finish(slot: _Slot, final_obs) -> None:
    env = slot.env
    slot.ep.final_obs = final_obs
    slot.ep.final_paths = tuple(env.paths())
    slot.ep.morph_doc = serialize(env.graph)
    slot.ep.final_limbs = env.graph.n_limbs()
    slot.ep.final_depth = env.graph.max_depth()


def _run_cohort(cfg, net, rng, width, quota_left):
    """Run `width` stage-synchronized episodes; cut actives once the quota
    is reached (only ever during control, so design flags stay clean)."""
    slots = [_Slot(cfg) for _ in range(width)]
    n_design = cfg.env.n_topo + cfg.env.n_attr
    for _ in range(n_design):
        stage = int(slots[0].env.stage)
        obs_list = [s.env.observe() for s in slots]
        paths_list = [tuple(s.env.paths()) for s in slots]
        heads = net.policy_batch(obs_list, paths_list, stage)
        for s, obs, paths, head in zip(slots, obs_list, paths_list, heads):
            rec = pol.sample(_stage_output(net, head, stage), rng)
            s.env.design_step(rec.actions)
            s.ep.transitions.append(Transition(
                stage=stage, obs=obs, paths=paths, action=rec.actions,
                log_prob=rec.log_prob, reward=0.0, terminated=False, truncated=False))
    demotions = sum(s.env.demotions for s in slots)
    active = [s for s in slots if not s.diverged]
    done: list[Episode] = []
    cut = False
    while active:
        obs_list = [s.env.observe() for s in active]
        paths_list = [tuple(s.env.paths()) for s in active]
        heads = net.policy_batch(obs_list, paths_list, 2)
        still = []
        for s, obs, paths, head in zip(active, obs_list, paths_list, heads):
            rec = pol.sample(_stage_output(net, head, 2), rng)
            try:
                res = s.env.control_step(rec.actions)
            except physics.SimulationDiverged:
                s.diverged = True
                continue
            s.ep.transitions.append(Transition(
                stage=2, obs=obs, paths=paths, action=rec.actions,
                log_prob=rec.log_prob, reward=res.reward,
                terminated=res.terminated, truncated=res.truncated))
            if res.terminated:
                _finish(s, None)
                done.append(s.ep)
            elif res.truncated:
                _finish(s, res.obs)
                done.append(s.ep)
            else:
                still.append((s, res.obs))
        stored = sum(len(ep) for ep in done) + sum(len(s.ep) for s, _ in still)
        if stored >= quota_left and still:
            for s, last_obs in still:
                s.ep.transitions[-1].truncated = True
                _finish(s, last_obs)
                done.append(s.ep)
            still = []
            cut = True
        active = [s for s, _ in still]
    diverged = sum(1 for s in slots if s.diverged)
    return done, diverged, demotions, cut


def _collect_worker(cfg_text: str, worker_id: int, iteration: int, quota: int,
                    snapshot: dict):
    """Collect full episodes until `quota` transitions are gathered."""
    key = (cfg_text,)
    if key not in _WORKER_CACHE:
        cfg = parse_text(cfg_text)
        _WORKER_CACHE.clear()
        _WORKER_CACHE[key] = (cfg, MorphNet(cfg.net, seed=cfg.train.seed))
    cfg, net = _WORKER_CACHE[key]
    net.load_snapshot(snapshot)
    net.alloc_on_miss = False
    net.miss_queue = set()
    rng = worker_rng(cfg.train.seed, worker_id, iteration)
    width = _cohort_width(cfg)
    episodes = []
    collected = 0
    diverged = 0
    demotions = 0
    while collected < quota:
        done, div, dem, _ = _run_cohort(cfg, net, rng, width, quota - collected)
        episodes.extend(done)
        collected += sum(len(ep) for ep in done)
        diverged += div
        demotions += dem
        if div and not done:
            if diverged > 1000:
                raise RunAborted("worker cannot complete any episode")
    return episodes, net.miss_queue, demotions, diverged


def collect(cfg: RunConfig, snapshot: dict, iteration: int,
            pool=None) -> RolloutBuffer:
    """Fork-join rollout for one iteration; buffers merge in worker order."""
    cfg_text = to_text(cfg)
    workers = cfg.train.workers
    quota = math.ceil(cfg.ppo.batch / workers)
    args = [(cfg_text, w, iteration, quota, snapshot) for w in range(workers)]
    if pool is not None:
        results = pool.starmap(_collect_worker, args)
    else:
        results = [_collect_worker(*a) for a in args]
    buffer = RolloutBuffer()
    for episodes, misses, demotions, diverged in results:
        buffer.episodes.extend(episodes)
        buffer.misses |= misses
        buffer.demotions += demotions
        buffer.diverged += diverged
    return buffer


# ---------------------------------------------------------------------------
# Value filling
# ---------------------------------------------------------------------------

def compute_values(net: MorphNet, buffer: RolloutBuffer) -> None:
    """Fill value / next_value with the stage-matched value stacks."""
    groups: dict = {}
    for ep in buffer.episodes:
        for t in ep.transitions:
            groups.setdefault((t.stage, t.limb_count), []).append(t)
    with nc.no_grad():
        for (stage, limbs), items in sorted(groups.items()):
            obs3 = np.stack([t.obs for t in items])
            rows = np.stack([net.rows_for(t.paths) for t in items])
            vals = net.value_out(obs3, rows, stage).data
            for t, v in zip(items, vals):
                t.value = float(v)
        boots = [ep for ep in buffer.episodes
                 if ep.transitions[-1].truncated and ep.final_obs is not None]
        boot_vals = {}
        if boots:
            by_l: dict = {}
            for ep in boots:
                by_l.setdefault(ep.final_obs.shape[0], []).append(ep)
            for _, eps in sorted(by_l.items()):
                obs3 = np.stack([ep.final_obs for ep in eps])
                rows = np.stack([net.rows_for(ep.final_paths) for ep in eps])
                vals = net.value_out(obs3, rows, 2).data
                for ep, v in zip(eps, vals):
                    boot_vals[id(ep)] = float(v)
    for ep in buffer.episodes:
        ts = ep.transitions
        for k, t in enumerate(ts):
            if k + 1 < len(ts):
                t.next_value = ts[k + 1].value
            elif t.truncated:
                t.next_value = boot_vals.get(id(ep), 0.0)
            else:
                t.next_value = 0.0


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _format_row(values) -> str:
    return ",".join(f"{v:.17g}" if isinstance(v, float) else str(v) for v in values)


def train(cfg: RunConfig):
    """Run the full loop; returns (net, metrics rows, run directory)."""
    validate(cfg)
    out_dir = Path(cfg.train.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.snapshot").write_text(to_text(cfg), encoding="utf-8")

    net = MorphNet(cfg.net, seed=cfg.train.seed)
    updater = Updater(net, cfg.ppo)
    start_iter = 0
    best_return = -math.inf

    if cfg.train.resume_from:
        arrays, registry = ckpt.load(cfg.train.resume_from)
        params = {k: v for k, v in arrays.items() if not k.startswith(("opt/", "meta/"))}
        net.load_snapshot({"params": params, "registry": registry})
        updater.load_state_arrays(arrays)
        start_iter = int(arrays["meta/iteration"][0])
        best_return = float(arrays["meta/best_return"][0])
        log.info("resumed from %s at iteration %d", cfg.train.resume_from, start_iter)

    metrics_path = out_dir / "metrics.csv"
    if not (cfg.train.resume_from and metrics_path.exists()):
        metrics_path.write_text(",".join(METRICS_COLUMNS) + "\n", encoding="utf-8")

    pool = None
    rows = []
    try:
        if cfg.train.parallel and cfg.train.workers > 1:
            physics.warmup()  # compile before forking so children inherit it
            pool = multiprocessing.get_context("fork").Pool(cfg.train.workers)
        for it in range(start_iter, cfg.train.iterations):
            t0 = time.perf_counter()
            snapshot = net.snapshot()
            buffer = collect(cfg, snapshot, it, pool=pool)
            n_eps = len(buffer.episodes)
            if buffer.diverged > 0.1 * max(1, n_eps + buffer.diverged):
                raise RunAborted(
                    f"iteration {it}: {buffer.diverged} diverged episodes "
                    f"against {n_eps} completed")
            net.miss_queue |= buffer.misses
            net.sync_misses()
            compute_values(net, buffer)
            compute_advantages(buffer, cfg.ppo.gamma, cfg.ppo.lam,
                               mode=cfg.ppo.credit_mode,
                               design_gamma=cfg.ppo.design_gamma)
            rng = worker_rng(cfg.train.seed, _LEARNER_TAG, it)
            metrics = updater.update(buffer, rng)

            mean_ret = float(np.mean([ep.total_return() for ep in buffer.episodes]))
            mean_limbs = float(np.mean([ep.final_limbs for ep in buffer.episodes]))
            row = {
                "iter": it,
                "mean_episode_return": mean_ret,
                "policy_loss": metrics.get("policy_loss", 0.0),
                "value_loss": metrics.get("value_loss", 0.0),
                "clip_frac": metrics.get("clip_frac", 0.0),
                "kl": metrics.get("kl", 0.0),
                "mean_limbs": mean_limbs,
                "wallclock_s": time.perf_counter() - t0,
            }
            rows.append(row)
            with metrics_path.open("a", encoding="utf-8") as fh:
                fh.write(_format_row([row[c] for c in METRICS_COLUMNS]) + "\n")
            log.info("iter %d return %.3f limbs %.2f kl %.2e", it, mean_ret,
                     mean_limbs, row["kl"])

            improved = mean_ret > best_return
            if improved:
                best_return = mean_ret
                best_ep = max(buffer.episodes, key=lambda e: e.total_return())
                (out_dir / "best_morph.json").write_text(best_ep.morph_doc,
                                                         encoding="utf-8")
            if improved or (it + 1) % cfg.train.checkpoint_every == 0 \
                    or it + 1 == cfg.train.iterations:
                save_checkpoint(out_dir / f"ckpt_{it + 1}.bin", net, updater,
                                it + 1, best_return)
    finally:
        if pool is not None:
            pool.terminate()
            pool.join()
    return net, rows, out_dir


def save_checkpoint(path, net: MorphNet, updater: Updater, iteration: int,
                    best_return: float) -> None:
    arrays = {name: p.data for name, p in net.params.items()}
    arrays.update(updater.state_arrays())
    arrays["meta/iteration"] = np.array([float(iteration)])
    arrays["meta/best_return"] = np.array([best_return])
    ckpt.save(str(path), arrays, net.registry.snapshot_map())


def load_net(cfg: RunConfig, checkpoint_path: str) -> MorphNet:
    arrays, registry = ckpt.load(checkpoint_path)
    net = MorphNet(cfg.net, seed=cfg.train.seed)
    params = {k: v for k, v in arrays.items() if not k.startswith(("opt/", "meta/"))}
    net.load_snapshot({"params": params, "registry": registry})
    return net


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(cfg: RunConfig, net: MorphNet, episodes: int) -> dict:
    """Deterministic-mean rollouts: greedy topology, noise-free attributes
    and torques. Returns summary statistics over the episodes."""
    if episodes <= 0:
        raise ValueError("evaluate needs at least one episode (empty summary)")
    env = CodesignEnv(cfg.env, cfg.morph)
    summaries = []
    for k in range(episodes):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([cfg.train.seed, _EVAL_TAG, k])))
        ep, ok = run_episode(env, net, rng, step_budget=10 ** 9, greedy=True)
        if not ok:
            continue
        summaries.append(summarize(ep))
    if not summaries:
        raise RunAborted("every evaluation episode diverged")
    returns = np.array([s.total_return for s in summaries])
    return {
        "episodes": len(summaries),
        "mean_return": float(returns.mean()),
        "std_return": float(returns.std()),
        "mean_limbs": float(np.mean([s.final_limbs for s in summaries])),
        "mean_depth": float(np.mean([s.final_depth for s in summaries])),
        "terminated_early_frac": float(np.mean([s.terminated_early for s in summaries])),
    }
