"""Augmented-MDP environment tests: stages, rewards, flags, determinism."""

import numpy as np
import pytest

from morphogen.config import ConfigError, EnvConfig, MorphConfig
from morphogen.envsim import OBS_WIDTH, CodesignEnv, Stage, StageError, resolve_morph_config
from morphogen.morphology import TopoAction


def make_env(**overrides):
    cfg = EnvConfig(horizon=overrides.pop("horizon", 8), **overrides)
    return CodesignEnv(cfg, MorphConfig())


def no_change(env):
    return np.full(env.graph.n_limbs(), int(TopoAction.NO_CHANGE))


def run_design(env):
    """Drive the design stages with neutral actions until control starts."""
    while env.stage == Stage.TOPO:
        env.design_step(no_change(env))
    while env.stage == Stage.ATTR:
        env.design_step(np.zeros((env.graph.n_limbs(), 4)))


def test_reset_initial_designs():
    env = make_env(initial_design="type3_chain")
    g, stage = env.reset()
    assert g.n_limbs() == 2
    assert sum(1 for l in g.limbs.values() if l.joint) == 1
    assert stage == Stage.TOPO
    assert env.design_step_count == 0

    env4 = make_env(initial_design="type4_chain")
    g4, _ = env4.reset()
    assert g4.n_limbs() == 3
    assert sum(1 for l in g4.limbs.values() if l.joint) == 2


def test_reset_unknown_design_rejected():
    env = make_env()
    with pytest.raises(ConfigError):
        env.reset("type7_wheel")


def test_stage_sequence_and_zero_design_reward():
    env = make_env(n_topo=5, n_attr=1)
    env.reset()
    for k in range(5):
        assert env.stage == Stage.TOPO
        _, reward, stage = env.design_step(no_change(env))
        assert reward == 0.0
    assert env.stage == Stage.ATTR
    _, reward, stage = env.design_step(np.zeros((env.graph.n_limbs(), 4)))
    assert reward == 0.0
    assert stage == Stage.CTRL


def test_design_step_during_control_rejected():
    env = make_env()
    env.reset()
    run_design(env)
    with pytest.raises(StageError):
        env.design_step(no_change(env))


def test_control_step_during_design_rejected():
    env = make_env()
    env.reset()
    with pytest.raises(StageError):
        env.control_step(np.zeros(1))


def test_zero_torque_resting_reward_zero():
    env = make_env()
    env.reset()
    run_design(env)
    res = env.control_step(np.zeros(env.graph.n_limbs() - 1))
    assert res.reward == pytest.approx(0.0, abs=1e-9)


def test_reward_is_displacement_over_dt():
    env = make_env()
    env.reset()
    run_design(env)
    x0 = env.phys.px[0]
    res = env.control_step(np.full(env.graph.n_limbs() - 1, 0.8))
    assert res.reward == pytest.approx(abs(env.phys.px[0] - x0) / env.cfg.dt)


def test_crawler_profile_penalty():
    env = make_env(profile="crawler")
    env.reset()
    run_design(env)
    n_act = env.graph.n_limbs() - 1
    x0 = env.phys.px[0]
    res = env.control_step(np.ones(n_act))
    expected_penalty = 0.0001 * n_act / env.graph.n_limbs()
    displacement = abs(env.phys.px[0] - x0) / env.cfg.dt
    assert res.reward == pytest.approx(displacement - expected_penalty)

    env2 = make_env(profile="crawler")
    env2.reset()
    run_design(env2)
    res2 = env2.control_step(np.zeros(n_act))
    assert res2.reward == pytest.approx(0.0, abs=1e-9)


def test_truncation_at_horizon_only():
    env = make_env(horizon=4)
    env.reset()
    run_design(env)
    flags = []
    for _ in range(4):
        res = env.control_step(np.zeros(env.graph.n_limbs() - 1))
        flags.append((res.terminated, res.truncated))
    assert flags[:3] == [(False, False)] * 3
    assert flags[3] == (False, True)


def test_termination_below_height_threshold():
    env = make_env(termination_height=0.5)  # the chain rests far below this
    env.reset()
    run_design(env)
    res = env.control_step(np.zeros(env.graph.n_limbs() - 1))
    assert res.terminated and not res.truncated


def test_observation_shape_and_content():
    env = make_env()
    env.reset()
    obs = env.observe()
    assert obs.shape == (2, OBS_WIDTH)
    assert obs[0, 9] == 1.0 and obs[1, 9] == 0.0  # root flag
    assert np.all(obs[:, 4:6] == 0.0)             # design stage: zero velocity
    run_design(env)
    obs = env.observe()
    assert obs.shape == (env.graph.n_limbs(), OBS_WIDTH)
    assert obs[0, 0] == 0.0  # root joint entries stay zero


def test_determinism_same_actions_same_trajectory():
    rng = np.random.default_rng(4)
    topo = [rng.integers(0, 3, size=2)]
    outs = []
    for _ in range(2):
        env = make_env()
        env.reset()
        env.design_step(topo[0])
        while env.stage == Stage.TOPO:
            env.design_step(no_change(env))
        env.design_step(np.zeros((env.graph.n_limbs(), 4)))
        states = []
        r = np.random.default_rng(9)
        for _ in range(6):
            res = env.control_step(r.uniform(-1, 1, env.graph.n_limbs() - 1))
            states.append(res.obs.copy())
        outs.append(np.concatenate([s.ravel() for s in states]))
    assert np.array_equal(outs[0], outs[1])


@pytest.mark.parametrize("profile", ["runner", "crawler", "glider", "walker"])
def test_design_reward_zero_all_profiles(profile):
    rng = np.random.default_rng(17)
    env = make_env(profile=profile, initial_design="type4_chain")
    for _ in range(5):
        env.reset()
        while env.stage == Stage.TOPO:
            _, reward, _ = env.design_step(rng.integers(0, 3, env.graph.n_limbs()))
            assert reward == 0.0
        while env.stage == Stage.ATTR:
            _, reward, _ = env.design_step(rng.uniform(-1, 1, (env.graph.n_limbs(), 4)))
            assert reward == 0.0
        obs = env.observe()
        assert obs.shape == (env.graph.n_limbs(), OBS_WIDTH)


def test_profile_morph_config_resolution():
    m = MorphConfig()
    glider = resolve_morph_config(EnvConfig(profile="glider", initial_design="type4_chain"), m)
    assert glider.child_cap == 2 and glider.max_depth == 6
    walker = resolve_morph_config(EnvConfig(profile="walker", initial_design="type4_chain"), m)
    assert walker.child_cap == 3 and walker.max_depth == 8
    crawler = resolve_morph_config(EnvConfig(profile="crawler"), m)
    assert crawler.child_cap == 2 and crawler.max_depth == m.max_depth
    with pytest.raises(ConfigError):
        resolve_morph_config(EnvConfig(profile="swimmer"), m)


def test_trajectory_dump(tmp_path):
    env = make_env(horizon=3)
    env.reset()
    run_design(env)
    for _ in range(3):
        env.control_step(np.zeros(env.graph.n_limbs() - 1))
    out = tmp_path / "traj.csv"
    env.dump_trajectory(str(out))
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "t,stage,reward,terminated,truncated,limb_count"
    assert len(lines) == 1 + 6 + 3
    assert lines[1].startswith("0,topo,0.0,0,0,")
    assert lines[-1].split(",")[4] == "1"  # truncated flag on the last row
