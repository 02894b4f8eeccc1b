"""Staged co-design environment: topology edits, attribute edits, then control.

An episode is N_topo topology steps and N_attr attribute steps (reward 0,
never terminal), followed by control steps in the planar simulator until the
root drops below the profile's termination height or the horizon truncates.
Rewards follow the displacement-speed rule, with a mean squared-action
penalty on the crawler profile.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import physics
from .config import ConfigError, EnvConfig, MorphConfig
from .morphology import (MorphologyGraph, all_paths, apply_attr_actions,
                         apply_topo_actions, initial_design)

OBS_WIDTH = 10


class Stage(IntEnum):
    TOPO = 0
    ATTR = 1
    CTRL = 2


STAGE_NAMES = {Stage.TOPO: "topo", Stage.ATTR: "attr", Stage.CTRL: "ctrl"}


class StageError(RuntimeError):
    """Step call does not match the current episode stage."""


@dataclass
class StepResult:
    reward: float
    obs: np.ndarray
    terminated: bool
    truncated: bool


_INITIAL_DEPTH = {"type2_chain": 1, "type3_chain": 1, "type4_chain": 2}

# per-profile tweaks: (penalty on, child cap, depth multiplier over the
# initial design's depth; None keeps the configured cap)
_PROFILES = {
    "runner": (False, None, None),
    "crawler": (True, 2, None),
    "glider": (False, 2, 3),
    "walker": (False, 3, 4),
}


def resolve_morph_config(env_cfg: EnvConfig, morph_cfg: MorphConfig) -> MorphConfig:
    if env_cfg.profile not in _PROFILES:
        raise ConfigError(f"unknown env profile {env_cfg.profile!r}")
    if env_cfg.initial_design not in _INITIAL_DEPTH:
        raise ConfigError(f"unknown initial design {env_cfg.initial_design!r}")
    _, child_cap, depth_mult = _PROFILES[env_cfg.profile]
    out = MorphConfig(max_limbs=morph_cfg.max_limbs,
                      max_depth=morph_cfg.max_depth,
                      child_cap=morph_cfg.child_cap,
                      root_child_cap=morph_cfg.root_child_cap,
                      ranges=morph_cfg.ranges)
    if child_cap is not None:
        out.child_cap = child_cap
    if depth_mult is not None:
        out.max_depth = depth_mult * _INITIAL_DEPTH[env_cfg.initial_design]
    return out


class CodesignEnv:
    """One worker-private environment instance; shares nothing."""

    def __init__(self, env_cfg: EnvConfig, morph_cfg: MorphConfig):
        self.cfg = env_cfg
        self.morph_cfg = resolve_morph_config(env_cfg, morph_cfg)
        self.penalized = _PROFILES[env_cfg.profile][0]
        self.n_sub = max(1, round(env_cfg.dt * physics.SUBSTEP_HZ))
        self.graph: MorphologyGraph | None = None
        self.stage = Stage.TOPO
        self.phys: physics.PhysState | None = None
        self.demotions = 0
        self.trajectory: list = []

    # -- episode lifecycle -----------------------------------------------------

    def reset(self, initial_design_id: str | None = None):
        name = initial_design_id or self.cfg.initial_design
        if name not in _INITIAL_DEPTH:
            raise ConfigError(f"unknown initial design {name!r}")
        self.graph = initial_design(name, self.morph_cfg.ranges)
        self.design_step_count = 0
        self.ctrl_step_count = 0
        self.t = 0
        self.demotions = 0
        self.phys = None
        self.trajectory = []
        self.stage = self._design_entry_stage()
        if self.stage == Stage.CTRL:
            self._enter_control()
        return self.graph, self.stage

    def _design_entry_stage(self) -> Stage:
        if self.cfg.n_topo > 0:
            return Stage.TOPO
        if self.cfg.n_attr > 0:
            return Stage.ATTR
        return Stage.CTRL

    def _enter_control(self):
        order = self.graph.preorder()
        limbs = [self.graph.limbs[i] for i in order]
        parent_idx = {limb_id: row for row, limb_id in enumerate(order)}
        parents = [-1 if l.parent is None else parent_idx[l.parent] for l in limbs]
        self.phys = physics.build_state(
            lengths=[l.attr.length for l in limbs],
            radii=[l.attr.radius for l in limbs],
            rot_ranges=[l.joint.rotation_range if l.joint else 0.0 for l in limbs],
            max_torques=[l.joint.max_torque if l.joint else 0.0 for l in limbs],
            parent=parents, density=self.cfg.density)
        self._order = order
        self._parents = np.asarray(parents, dtype=np.int64)
        self._ctrl_paths = all_paths(self.graph, order)
        self._static_cols = self._static_features(order)
        self.stage = Stage.CTRL

    # -- stepping ----------------------------------------------------------------

    def design_step(self, action):
        """Apply one topology or attribute action batch; reward is exactly 0."""
        if self.stage == Stage.CTRL:
            raise StageError("design_step called during the control stage")
        if self.stage == Stage.TOPO:
            self.graph, demoted = apply_topo_actions(self.graph, action, self.morph_cfg)
            self.demotions += demoted
        else:
            self.graph = apply_attr_actions(self.graph, action)
        self.design_step_count += 1
        self._record(0.0, False, False)
        self.t += 1
        if self.stage == Stage.TOPO and self.design_step_count >= self.cfg.n_topo:
            self.stage = Stage.ATTR if self.cfg.n_attr > 0 else Stage.CTRL
            if self.stage == Stage.CTRL:
                self._enter_control()
        elif self.stage == Stage.ATTR and (
                self.design_step_count >= self.cfg.n_topo + self.cfg.n_attr):
            self._enter_control()
        return self.graph, 0.0, self.stage

    def control_step(self, torque_cmds) -> StepResult:
        """Advance physics one control period under normalized joint torques.

        torque_cmds: one value per non-root limb in preorder; clipped to
        [-1, 1] then scaled by the joint's max torque.
        """
        if self.stage != Stage.CTRL:
            raise StageError("control_step called during a design stage")
        cmds = np.clip(np.asarray(torque_cmds, dtype=np.float64), -1.0, 1.0)
        n = self.phys.px.shape[0]
        if cmds.shape != (n - 1,):
            raise StageError(f"expected {n - 1} torques, got shape {cmds.shape}")
        full = np.zeros(n)
        full[1:] = cmds * self.phys.max_torque[1:]
        x_before = self.phys.px[0]
        physics.step(self.phys, full, gravity=self.cfg.gravity, mu=self.cfg.friction,
                     n_sub=self.n_sub, n_vel=self.cfg.solver_vel_iters,
                     n_pos=self.cfg.solver_pos_iters)
        reward = abs(self.phys.px[0] - x_before) / self.cfg.dt
        if self.penalized:
            reward -= self.cfg.ctrl_penalty_weight * float(np.mean(
                np.concatenate([[0.0], cmds ** 2])))
        self.ctrl_step_count += 1
        terminated = bool(self.phys.pz[0] < self.cfg.termination_height)
        truncated = (not terminated) and self.ctrl_step_count >= self.cfg.horizon
        self._record(reward, terminated, truncated)
        self.t += 1
        return StepResult(reward=float(reward), obs=self.observe(),
                          terminated=terminated, truncated=truncated)

    # -- observations ------------------------------------------------------------

    def _static_features(self, order) -> np.ndarray:
        """Columns 6..9: normalized attrs, relative depth, root flag."""
        r = self.morph_cfg.ranges
        cols = np.zeros((len(order), 4))
        for row, limb_id in enumerate(order):
            limb = self.graph.limbs[limb_id]
            cols[row, 0] = (limb.attr.length - r.length_min) / (r.length_max - r.length_min)
            cols[row, 1] = (limb.attr.radius - r.radius_min) / (r.radius_max - r.radius_min)
            cols[row, 2] = self.graph.depth(limb_id) / max(1, self.morph_cfg.max_depth)
            cols[row, 3] = 1.0 if limb_id == self.graph.root else 0.0
        return cols

    def observe(self) -> np.ndarray:
        """Fixed-width per-limb features; rest-pose kinematics before control."""
        if self.stage == Stage.CTRL:
            ph = self.phys
            n = ph.px.shape[0]
            obs = np.zeros((n, OBS_WIDTH))
            par = self._parents
            joint = par >= 0
            obs[joint, 0] = ph.th[joint] - ph.th[par[joint]]
            obs[joint, 1] = ph.om[joint] - ph.om[par[joint]]
            obs[:, 2] = ph.px
            obs[:, 3] = ph.pz
            obs[:, 4] = ph.vx
            obs[:, 5] = ph.vz
            obs[:, 6:] = self._static_cols
            return obs
        order = self.graph.preorder()
        obs = np.zeros((len(order), OBS_WIDTH))
        limbs = [self.graph.limbs[i] for i in order]
        idx = {i: k for k, i in enumerate(order)}
        parents = [-1 if l.parent is None else idx[l.parent] for l in limbs]
        px, pz = physics.rest_layout(
            np.array([l.attr.length for l in limbs]),
            np.array([l.attr.radius for l in limbs]),
            np.array(parents))
        obs[:, 2] = px
        obs[:, 3] = pz
        obs[:, 6:] = self._static_features(order)
        return obs

    def paths(self):
        if self.stage == Stage.CTRL:
            return self._ctrl_paths
        return all_paths(self.graph)

    # -- trajectory dump -----------------------------------------------------------

    def _record(self, reward, terminated, truncated):
        self.trajectory.append((self.t, STAGE_NAMES[self.stage], reward,
                                int(terminated), int(truncated), self.graph.n_limbs()))

    def dump_trajectory(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "stage", "reward", "terminated", "truncated", "limb_count"])
            writer.writerows(self.trajectory)
