"""Config parsing, profiles, overrides, and snapshot stability."""

import pytest

from morphogen.config import (ConfigError, RunConfig, apply_profile,
                              config_hash, get_key, load_file, parse_text,
                              set_key, to_text, validate)


def test_defaults_match_published_hyperparameters():
    cfg = RunConfig()
    assert cfg.ppo.clip == 0.2
    assert cfg.ppo.batch == 50000
    assert cfg.ppo.minibatch == 2048
    assert cfg.ppo.epochs == 10
    assert cfg.ppo.gamma == 0.995
    assert cfg.ppo.lam == 0.95
    assert cfg.ppo.policy_lr == 5e-5
    assert cfg.ppo.value_lr == 3e-4
    assert cfg.ppo.grad_clip == 40.0
    assert cfg.env.n_topo == 5
    assert cfg.env.n_attr == 1
    assert cfg.net.d_model == 64
    assert cfg.net.n_blocks == 3
    assert cfg.net.value_n_blocks == 3
    assert cfg.net.ffn_ratio == 4
    assert cfg.train.iterations == 1000


def test_desk_profile_overrides():
    cfg = apply_profile(RunConfig(), "desk")
    assert cfg.ppo.batch == 4096
    assert cfg.ppo.minibatch == 512
    assert cfg.train.profile == "desk"


def test_unknown_profile_rejected():
    with pytest.raises(ConfigError):
        apply_profile(RunConfig(), "laptop")


def test_set_get_roundtrip():
    cfg = RunConfig()
    set_key(cfg, "ppo.clip", "0.3")
    assert cfg.ppo.clip == 0.3
    assert get_key(cfg, "ppo.clip") == 0.3
    set_key(cfg, "train.parallel", "false")
    assert cfg.train.parallel is False


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        set_key(RunConfig(), "ppo.clipping", "0.3")
    with pytest.raises(ConfigError):
        set_key(RunConfig(), "nonsense.key", "1")


def test_bad_value_rejected():
    with pytest.raises(ConfigError, match="bad value"):
        set_key(RunConfig(), "ppo.batch", "many")


def test_parse_text_roundtrip():
    cfg = RunConfig()
    set_key(cfg, "env.profile", "crawler")
    set_key(cfg, "ppo.gamma", "0.9")
    text = to_text(cfg)
    cfg2 = parse_text(text)
    assert to_text(cfg2) == text
    assert config_hash(cfg2) == config_hash(cfg)


def test_parse_reports_line_numbers():
    with pytest.raises(ConfigError, match=":2:"):
        parse_text("ppo.clip = 0.2\nwhat is this\n")


def test_load_missing_file():
    with pytest.raises(ConfigError, match="no/such/file"):
        load_file("no/such/file.cfg")


def test_validate_rules():
    cfg = RunConfig()
    cfg.ppo.minibatch = cfg.ppo.batch + 1
    with pytest.raises(ConfigError):
        validate(cfg)
    cfg = RunConfig()
    cfg.net.d_model = 30  # not divisible by 4 heads
    with pytest.raises(ConfigError):
        validate(cfg)
    cfg = RunConfig()
    cfg.ppo.credit_mode = "vanilla"
    with pytest.raises(ConfigError):
        validate(cfg)


def test_comments_and_quotes():
    cfg = parse_text("# comment\nenv.profile = 'walker'  # inline\n\n")
    assert cfg.env.profile == "walker"
