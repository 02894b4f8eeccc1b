"""Stage-split temporal credit assignment over completed rollout episodes.

Control transitions get standard GAE over TD errors. Design transitions get
the undiscounted remaining-return minus the state value: a body edit affects
every later step of the episode, so its advantage is measured against the
whole return rather than a decaying TD tail. Value targets are value plus
advantage, held constant during the update (no gradient path).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STAGE_TOPO, STAGE_ATTR, STAGE_CTRL = 0, 1, 2


class BufferIntegrityError(RuntimeError):
    """Termination/truncation flag set before the final step of an episode."""


@dataclass
class Transition:
    stage: int
    obs: np.ndarray            # (L, d) snapshot at decision time
    paths: tuple               # per-limb topology paths
    action: np.ndarray
    log_prob: float
    reward: float
    terminated: bool
    truncated: bool
    value: float = 0.0
    next_value: float = 0.0
    advantage: float | None = None
    value_target: float | None = None

    @property
    def limb_count(self) -> int:
        return self.obs.shape[0]


@dataclass
class Episode:
    transitions: list[Transition] = field(default_factory=list)
    # filled by the collector at episode end
    final_obs: np.ndarray | None = None   # post-truncation observation, if any
    final_paths: tuple = ()
    morph_doc: str = ""
    final_limbs: int = 0
    final_depth: int = 0

    def total_return(self) -> float:
        return sum(t.reward for t in self.transitions)

    def __len__(self):
        return len(self.transitions)


@dataclass
class RolloutBuffer:
    episodes: list[Episode] = field(default_factory=list)
    misses: set = field(default_factory=set)
    demotions: int = 0
    diverged: int = 0

    def flat(self) -> list[Transition]:
        return [t for ep in self.episodes for t in ep.transitions]

    def n_steps(self) -> int:
        return sum(len(ep) for ep in self.episodes)


def _check_episode(ep: Episode) -> None:
    for k, t in enumerate(ep.transitions):
        if t.stage != STAGE_CTRL and (t.reward != 0.0 or t.terminated or t.truncated):
            raise BufferIntegrityError("design transition with reward or end flag")
        if (t.terminated or t.truncated) and k != len(ep.transitions) - 1:
            raise BufferIntegrityError("episode end flag before the final step")
        if t.terminated and t.truncated:
            raise BufferIntegrityError("terminated and truncated both set")


def compute_advantages(buffer: RolloutBuffer, gamma: float, lam: float,
                       mode: str = "stage_split", design_gamma: float = 1.0) -> None:
    """Attach advantage and value target to every transition, in reverse.

    mode "stage_split" applies the design-stage return rule; "gae_all" runs
    plain GAE for every stage (the ablation baseline). Values and next-values
    must already be filled in with the stage-matched value heads.
    """
    if mode not in ("stage_split", "gae_all"):
        raise ValueError(f"unknown credit mode {mode!r}")
    for ep in buffer.episodes:
        _check_episode(ep)
        u_next = 0.0
        adv_next = 0.0
        alive_next = 0.0  # (1 - T or C) of the following step, 0 past the end
        for t in reversed(ep.transitions):
            if t.advantage is not None:
                raise BufferIntegrityError("advantage attached twice")
            alive = 0.0 if (t.terminated or t.truncated) else 1.0
            u = t.reward + design_gamma * u_next * alive
            delta = t.reward + gamma * t.next_value * (0.0 if t.terminated else 1.0) - t.value
            if mode == "stage_split" and t.stage != STAGE_CTRL:
                adv = u - t.value
            else:
                adv = delta + gamma * lam * adv_next * alive
            t.advantage = adv
            t.value_target = t.value + adv
            u_next, adv_next, alive_next = u, adv, alive


def normalize_advantages(advs: np.ndarray, stages: np.ndarray,
                         eps: float = 1e-8) -> np.ndarray:
    """Standardize advantages to zero mean / unit std separately per stage.

    Design and control advantages live on different scales (episode returns
    vs TD residuals); normalizing them jointly would let one side drown the
    other inside a mixed minibatch.
    """
    out = advs.astype(np.float64).copy()
    for stage in np.unique(stages):
        mask = stages == stage
        sel = out[mask]
        out[mask] = (sel - sel.mean()) / (sel.std() + eps)
    return out
