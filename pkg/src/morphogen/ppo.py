"""Clipped-surrogate policy optimization over mixed-stage minibatches.

Each minibatch is regrouped by (limb count, stage): equal-length groups need
no padding and each group routes to its stage's action head and value stack.
The combined loss is policy surrogate plus value MSE; gradients are clipped
by global norm across every trainable tensor, then applied with separate
Adam states (and learning rates) for the policy and value groups.
"""

from __future__ import annotations

import logging
from collections import defaultdict

import numpy as np

from . import numcore as nc
from . import policy as pol
from .config import PpoConfig
from .credit import RolloutBuffer, normalize_advantages
from .net import MorphNet

log = logging.getLogger("morphogen.ppo")

STAGE_TOPO, STAGE_ATTR, STAGE_CTRL = 0, 1, 2


def policy_loss(logp_new: nc.Tensor, logp_old: np.ndarray, adv: np.ndarray,
                clip_eps: float) -> nc.Tensor:
    """Negative clipped surrogate, averaged over the minibatch slice."""
    ratio = nc.exp(nc.sub(logp_new, nc.tensor(logp_old)))
    adv_t = nc.tensor(adv)
    surr = nc.minimum(nc.mul(ratio, adv_t),
                      nc.mul(nc.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv_t))
    return nc.neg(nc.mean(surr))


def value_loss(values: nc.Tensor, targets: np.ndarray) -> nc.Tensor:
    """Mean squared error against constant targets (no gradient into them)."""
    return nc.mean(nc.square(nc.sub(values, nc.tensor(targets))))


class Updater:
    """Owns the optimizer state for one network across a training run."""

    def __init__(self, net: MorphNet, cfg: PpoConfig):
        self.net = net
        self.cfg = cfg
        self.policy_names = net.policy_param_names()
        self.value_names = net.value_param_names()
        self.policy_params = net.param_list(self.policy_names)
        self.value_params = net.param_list(self.value_names)
        self.opt_policy = nc.adam_init(self.policy_params, lr=cfg.policy_lr)
        self.opt_value = nc.adam_init(self.value_params, lr=cfg.value_lr)

    # -- optimizer state (for checkpoints) -----------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for group, names, state in (("policy", self.policy_names, self.opt_policy),
                                    ("value", self.value_names, self.opt_value)):
            for name, m, v in zip(names, state.m, state.v):
                out[f"opt/{group}/m/{name}"] = m
                out[f"opt/{group}/v/{name}"] = v
            out[f"opt/{group}/step"] = np.array([float(state.step)])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for group, names, state in (("policy", self.policy_names, self.opt_policy),
                                    ("value", self.value_names, self.opt_value)):
            for i, name in enumerate(names):
                state.m[i][...] = arrays[f"opt/{group}/m/{name}"]
                state.v[i][...] = arrays[f"opt/{group}/v/{name}"]
            state.step = int(arrays[f"opt/{group}/step"][0])

    # -- update loop -----------------------------------------------------------

    def update(self, buffer: RolloutBuffer, rng: np.random.Generator) -> dict:
        """Run the epoch/minibatch loop over a credited buffer; returns metrics."""
        cfg = self.cfg
        flat = buffer.flat()
        n = len(flat)
        stages = np.array([t.stage for t in flat])
        advs = np.array([t.advantage for t in flat])
        targets = np.array([t.value_target for t in flat])
        old_logp = np.array([t.log_prob for t in flat])

        meter = defaultdict(list)
        for _ in range(cfg.epochs):
            perm = rng.permutation(n)
            for lo in range(0, n, cfg.minibatch):
                idx = perm[lo:lo + cfg.minibatch]
                self._minibatch_step(flat, idx, stages, advs, targets, old_logp, meter)

        metrics = {k: float(np.mean(v)) for k, v in meter.items()}
        metrics["skipped_minibatches"] = float(np.sum(meter["skipped"])) if meter["skipped"] else 0.0
        return metrics

    def _pack(self, flat, idx):
        """Pad the minibatch to a common limb count; build per-stage actions."""
        items = [flat[j] for j in idx]
        b = len(items)
        lm = max(t.limb_count for t in items)
        d = items[0].obs.shape[1]
        obs3 = np.zeros((b, lm, d))
        rows = np.zeros((b, lm), dtype=np.intp)
        pad = np.zeros((b, lm))
        for i, t in enumerate(items):
            c = t.limb_count
            obs3[i, :c] = t.obs
            rows[i, :c] = self.net.rows_for(t.paths)
            pad[i, :c] = 1.0
        mask = None
        if not np.all(pad > 0.5):
            mask = np.where(pad > 0.5, 0.0, -np.inf)[:, None, :]
        return items, obs3, rows, pad, mask

    def _stage_logp(self, head_sub, items_sub, stage, pad_sub):
        """Masked joint log-prob of the stored actions for one stage subset."""
        cfg_net = self.net.cfg
        b, lm, _ = head_sub.data.shape
        if stage == STAGE_TOPO:
            acts = np.zeros((b, lm), dtype=np.intp)
            for i, t in enumerate(items_sub):
                acts[i, :t.limb_count] = t.action
            return pol.graph_categorical_logp_masked(head_sub, acts, pad_sub)
        if stage == STAGE_ATTR:
            acts = np.zeros((b, lm, 4))
            for i, t in enumerate(items_sub):
                acts[i, :t.limb_count] = t.action
            return pol.graph_gaussian_logp_masked(
                head_sub, self.net.logstds["attr"], acts, pad_sub,
                cfg_net.logstd_min, cfg_net.logstd_max)
        acts = np.zeros((b, lm, 1))
        mask = pad_sub.copy()
        mask[:, 0] = 0.0  # the root has no joint to actuate
        for i, t in enumerate(items_sub):
            acts[i, 1:t.limb_count, 0] = t.action
        if not mask.any():
            return None  # single-limb bodies only: nothing to optimize
        return pol.graph_gaussian_logp_masked(
            head_sub, self.net.logstds["ctrl"], acts, mask,
            cfg_net.logstd_min, cfg_net.logstd_max)

    def _minibatch_step(self, flat, idx, stages, advs, targets, old_logp, meter):
        cfg = self.cfg
        mb_adv = advs[idx]
        if cfg.adv_norm:
            mb_adv = normalize_advantages(mb_adv, stages[idx])
        items, obs3, rows, pad, mask = self._pack(flat, idx)
        b = len(items)
        mb_stage = stages[idx]
        stage_pos = {s: np.flatnonzero(mb_stage == s) for s in np.unique(mb_stage)}

        kl_terms = np.zeros(b)
        clip_terms = np.zeros(b)
        finite = True
        with nc.record() as tape:
            policy_sum = None
            value_sum = None
            shared_trunk = self.net.cfg.share_policy_trunk
            tokens_all = (self.net.policy_tokens(obs3, rows, STAGE_CTRL, mask=mask)
                          if shared_trunk else None)
            for stage, positions in sorted(stage_pos.items()):
                sub = positions.tolist()
                items_sub = [items[p] for p in sub]
                pad_sub = pad[sub]
                mask_sub = mask[sub] if mask is not None else None
                if shared_trunk:
                    toks = nc.take(tokens_all, sub, axis=0)
                else:
                    toks = self.net.policy_tokens(obs3[sub], rows[sub], stage,
                                                  mask=mask_sub)
                head = self.net.heads[("topo", "attr", "ctrl")[stage]](toks)
                logp_new = self._stage_logp(head, items_sub, stage, pad_sub)
                if logp_new is not None:
                    g_old = old_logp[idx[sub]]
                    g_adv = mb_adv[sub]
                    with np.errstate(over="ignore"):
                        ratio_probe = np.exp(logp_new.data - g_old)
                    if not np.all(np.isfinite(ratio_probe)):
                        finite = False
                    ratio = nc.exp(nc.sub(logp_new, nc.tensor(g_old)))
                    adv_t = nc.tensor(g_adv)
                    clipped = nc.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
                    surr = nc.minimum(nc.mul(ratio, adv_t), nc.mul(clipped, adv_t))
                    group_sum = nc.sum_(surr)
                    policy_sum = (group_sum if policy_sum is None
                                  else nc.add(policy_sum, group_sum))
                    kl_terms[sub] = g_old - logp_new.data
                    clip_terms[sub] = np.abs(ratio_probe - 1.0) > cfg.clip
                    self._entropy_metrics(head.data, stage, pad_sub, meter)

                vals = self.net.value_out(obs3[sub], rows[sub], stage, mask=mask_sub)
                vdiff = nc.sum_(nc.square(nc.sub(vals, nc.tensor(targets[idx[sub]]))))
                value_sum = vdiff if value_sum is None else nc.add(value_sum, vdiff)

            if not finite:
                meter["skipped"].append(1.0)
                log.warning("skipping minibatch: non-finite importance ratio")
                return
            ploss = (nc.mul(policy_sum, -1.0 / b) if policy_sum is not None
                     else nc.tensor(0.0))
            vloss = nc.mul(value_sum, 1.0 / b)
            total = nc.add(ploss, vloss)
        nc.zero_grads(self.policy_params)
        nc.zero_grads(self.value_params)
        nc.backward(total, tape)

        grads = [p.grad for p in self.policy_params + self.value_params]
        norm = nc.global_norm_clip(grads, cfg.grad_clip)
        nc.adam_step(self.policy_params, [p.grad for p in self.policy_params],
                     self.opt_policy)
        nc.adam_step(self.value_params, [p.grad for p in self.value_params],
                     self.opt_value)

        meter["policy_loss"].append(float(ploss.data))
        meter["value_loss"].append(float(vloss.data))
        meter["kl"].append(float(kl_terms.mean()))
        meter["clip_frac"].append(float(clip_terms.mean()))
        meter["grad_norm"].append(norm)
        meter["skipped"].append(0.0)

    def _entropy_metrics(self, head_data, stage, pad_sub, meter):
        if stage == STAGE_TOPO:
            real = pad_sub.reshape(-1) > 0.5
            out = pol.StagePolicyOutput(0, head_data.reshape(-1, 3)[real], None)
            meter["entropy/topo"].append(pol.entropy(out) / max(1, real.sum()))
        elif stage == STAGE_ATTR:
            ls = np.clip(self.net.logstds["attr"].data, self.net.cfg.logstd_min,
                         self.net.cfg.logstd_max)
            meter["entropy/attr"].append(
                float(4 * (0.5 * (1 + pol.LOG_2PI)) + ls.sum()))
            meter["logstd/attr"].append(float(ls.mean()))
        else:
            ls = np.clip(self.net.logstds["ctrl"].data, self.net.cfg.logstd_min,
                         self.net.cfg.logstd_max)
            meter["entropy/ctrl"].append(float(0.5 * (1 + pol.LOG_2PI) + ls.sum()))
            meter["logstd/ctrl"].append(float(ls.mean()))
