"""Stage-indexed stochastic policies factorized over limbs.

Topology steps draw one categorical action (add / delete / no-change) per
limb; attribute and control steps draw diagonal Gaussians around the head
means with a state-independent learnable log-std per stage. The joint
log-probability is the sum of the per-limb terms. Sampling happens on plain
numpy (rollout side); the differentiable log-prob lives in the update path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class PolicyError(ValueError):
    pass


@dataclass
class StagePolicyOutput:
    stage: int                 # 0 topo, 1 attr, 2 ctrl
    params: np.ndarray         # (L, 3) logits | (L, 4) means | (L, 1) means
    logstd: np.ndarray | None  # (4,) attr | (1,) ctrl, already clamped


@dataclass
class ActionRecord:
    stage: int
    actions: np.ndarray        # (L,) ints | (L, 4) | (L-1,) torques
    log_prob: float


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _categorical_logp(logits, actions):
    lp = _log_softmax(logits)
    return float(np.take_along_axis(lp, actions[:, None], axis=-1).sum())


def _gaussian_logp(mean, logstd, actions):
    std = np.exp(logstd)
    z = (actions - mean) / std
    return float(-0.5 * (z * z).sum()
                 - actions.shape[0] * (logstd.sum())
                 - 0.5 * actions.size * LOG_2PI)


def sample(output: StagePolicyOutput, rng: np.random.Generator,
           greedy: bool = False) -> ActionRecord:
    """Draw per-limb independent actions; the joint log-prob is recorded."""
    if output.stage == 0:
        logits = output.params
        if greedy:
            acts = logits.argmax(axis=-1)
        else:
            probs = np.exp(_log_softmax(logits))
            u = rng.random(logits.shape[0])
            acts = (probs.cumsum(axis=-1) < u[:, None]).sum(axis=-1)
            acts = np.minimum(acts, logits.shape[-1] - 1)
        return ActionRecord(0, acts.astype(np.int64), _categorical_logp(logits, acts))
    mean = output.params if output.stage == 1 else output.params[1:]
    std = np.exp(output.logstd)
    noise = np.zeros_like(mean) if greedy else rng.standard_normal(mean.shape)
    acts = mean + std * noise
    lp = _gaussian_logp(mean, output.logstd, acts)
    if output.stage == 2:
        acts = acts.reshape(-1)
    return ActionRecord(output.stage, acts, lp)


def log_prob(output: StagePolicyOutput, actions) -> float:
    """Exact joint log density of `actions` under the stage distribution."""
    if output.stage == 0:
        acts = np.asarray(actions, dtype=np.int64)
        if acts.min() < 0 or acts.max() >= output.params.shape[-1]:
            raise PolicyError("categorical action index out of range")
        return _categorical_logp(output.params, acts)
    if output.stage == 1:
        return _gaussian_logp(output.params, output.logstd,
                              np.asarray(actions, dtype=np.float64))
    acts = np.asarray(actions, dtype=np.float64).reshape(-1, 1)
    return _gaussian_logp(output.params[1:], output.logstd, acts)


def entropy(output: StagePolicyOutput) -> float:
    """Analytic entropy summed over limbs (metrics only, never optimized)."""
    if output.stage == 0:
        lp = _log_softmax(output.params)
        p = np.exp(lp)
        return float(-(p * lp).sum())
    k = output.params.shape[0] if output.stage == 1 else output.params.shape[0] - 1
    per_dim = 0.5 * (1.0 + LOG_2PI) + output.logstd
    return float(k * per_dim.sum())


# ---------------------------------------------------------------------------
# Differentiable joint log-probs (update path)
# ---------------------------------------------------------------------------

from . import numcore as nc  # noqa: E402  (kept below the numpy-only API)


def graph_categorical_logp(logits: nc.Tensor, actions: np.ndarray) -> nc.Tensor:
    """Joint log-prob per batch item: logits (B, L, K), actions (B, L) -> (B,)."""
    lp = nc.log_softmax_rows(logits)
    picked = nc.take_along_last(lp, actions.astype(np.intp))
    return nc.sum_(picked, axis=1)


def graph_gaussian_logp(mean: nc.Tensor, logstd: nc.Tensor, actions: np.ndarray,
                        logstd_min: float, logstd_max: float) -> nc.Tensor:
    """Diagonal-Gaussian joint log-prob: mean (B, L, K), actions same -> (B,)."""
    b, l, k = mean.data.shape
    ls = nc.clamp(logstd, logstd_min, logstd_max)
    inv_std = nc.exp(nc.neg(ls))
    z = nc.mul(nc.sub(nc.tensor(actions), mean), inv_std)
    quad = nc.sum_(nc.square(z), axis=(1, 2))
    lp = nc.add(nc.mul(quad, -0.5), nc.mul(nc.sum_(ls), -float(l)))
    return nc.add_const(lp, -0.5 * l * k * LOG_2PI)


def graph_categorical_logp_masked(logits: nc.Tensor, actions: np.ndarray,
                                  mask: np.ndarray) -> nc.Tensor:
    """Masked joint log-prob: mask (B, L) zeroes padded limb rows."""
    lp = nc.log_softmax_rows(logits)
    picked = nc.take_along_last(lp, actions.astype(np.intp))
    return nc.sum_(nc.mul(picked, nc.tensor(mask)), axis=1)


def graph_gaussian_logp_masked(mean: nc.Tensor, logstd: nc.Tensor,
                               actions: np.ndarray, mask: np.ndarray,
                               logstd_min: float, logstd_max: float) -> nc.Tensor:
    """Masked diagonal-Gaussian joint log-prob over (B, L, K) head outputs.

    mask (B, L) marks which limb rows contribute (real, actuated). Padded or
    excluded rows add nothing to the quadratic, log-std, or constant terms.
    """
    mask3 = np.broadcast_to(mask[:, :, None], mean.data.shape)
    ls = nc.clamp(logstd, logstd_min, logstd_max)
    inv_std = nc.exp(nc.neg(ls))
    z = nc.mul(nc.mul(nc.sub(nc.tensor(actions), mean), inv_std), nc.tensor(mask3))
    quad = nc.sum_(nc.square(z), axis=(1, 2))
    ls_sum = nc.sum_(nc.mul(nc.tensor(np.ascontiguousarray(mask3)), ls), axis=(1, 2))
    counts = mask.sum(axis=1) * mean.data.shape[2]
    lp = nc.sub(nc.mul(quad, -0.5), ls_sum)
    return nc.add_const(lp, -0.5 * counts * LOG_2PI)
