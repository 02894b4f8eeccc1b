"""Run configuration: dataclasses, profiles, and the dotted key=value text format.

Config files are flat text, one ``section.key = value`` per line (``#`` comments).
The same format is used for resolved-config snapshots so runs diff cleanly.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    """Bad config file, unknown key, or invalid value."""


@dataclass
class AttrRanges:
    """Closed ranges for limb/joint attributes (meters, radians, N*m)."""

    length_min: float = 0.1
    length_max: float = 1.0
    radius_min: float = 0.02
    radius_max: float = 0.12
    rot_range_min: float = 0.2
    rot_range_max: float = 2.0
    torque_min: float = 1.0
    torque_max: float = 100.0


@dataclass
class MorphConfig:
    max_limbs: int = 16
    max_depth: int = 6
    child_cap: int = 3        # non-root limbs
    root_child_cap: int = 4
    ranges: AttrRanges = field(default_factory=AttrRanges)


@dataclass
class EnvConfig:
    profile: str = "runner"   # runner | crawler | glider | walker
    initial_design: str = "type3_chain"
    n_topo: int = 5
    n_attr: int = 1
    horizon: int = 400
    dt: float = 0.04          # control period used for reward scaling
    gravity: float = 9.81
    friction: float = 1.0
    density: float = 60.0     # areal density of a limb rectangle, kg/m^2
    termination_height: float = 0.0  # terminate when root z drops below; 0 disables
    ctrl_penalty_weight: float = 0.0001  # crawler profile only
    solver_vel_iters: int = 8
    solver_pos_iters: int = 4


@dataclass
class NetConfig:
    d_obs: int = 10           # fixed per-limb observation width
    d_model: int = 64
    n_blocks: int = 3
    n_heads: int = 4
    ffn_ratio: int = 4
    value_d_model: int = 64
    value_n_blocks: int = 3
    registry_capacity: int = 512
    share_policy_trunk: bool = True
    logstd_min: float = -5.0
    logstd_max: float = 2.0


@dataclass
class PpoConfig:
    clip: float = 0.2
    batch: int = 50000
    minibatch: int = 2048
    epochs: int = 10
    gamma: float = 0.995
    lam: float = 0.95
    policy_lr: float = 5e-5
    value_lr: float = 3e-4
    grad_clip: float = 40.0
    adv_norm: bool = True
    credit_mode: str = "stage_split"  # stage_split | gae_all (ablation)
    design_gamma: float = 1.0         # discount inside the design-return recursion


@dataclass
class TrainConfig:
    iterations: int = 1000
    workers: int = 4
    seed: int = 0
    profile: str = "paper"    # desk | paper
    checkpoint_every: int = 10
    out_dir: str = "runs/default"
    resume_from: str = ""     # checkpoint path; empty = fresh run
    parallel: bool = True     # False forces in-process sequential workers


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    morph: MorphConfig = field(default_factory=MorphConfig)
    net: NetConfig = field(default_factory=NetConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


# Desk profile: small enough to iterate on a laptop while keeping the same
# training dynamics. Paper profile keeps the published hyperparameters.
_DESK_OVERRIDES = {
    "ppo.batch": 4096,
    "ppo.minibatch": 512,
    "ppo.epochs": 3,
    "env.horizon": 128,
    "morph.max_limbs": 8,
    "morph.max_depth": 5,
    "net.d_model": 16,
    "net.n_blocks": 2,
    "net.n_heads": 2,
    "net.value_d_model": 16,
    "net.value_n_blocks": 1,
    "net.registry_capacity": 256,
}


def apply_profile(cfg: RunConfig, profile: str) -> RunConfig:
    if profile == "paper":
        cfg.train.profile = "paper"
        return cfg
    if profile == "desk":
        cfg.train.profile = "desk"
        for key, val in _DESK_OVERRIDES.items():
            set_key(cfg, key, str(val))
        return cfg
    raise ConfigError(f"unknown profile {profile!r} (expected desk or paper)")


# ---------------------------------------------------------------------------
# Dotted-key access
# ---------------------------------------------------------------------------

def _walk(cfg, key: str):
    parts = key.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or part not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    return obj, leaf


def get_key(cfg: RunConfig, key: str):
    obj, leaf = _walk(cfg, key)
    return getattr(obj, leaf)


def _coerce(key: str, raw: str, current):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def set_key(cfg: RunConfig, key: str, raw: str) -> None:
    obj, leaf = _walk(cfg, key)
    setattr(obj, leaf, _coerce(key, raw, getattr(obj, leaf)))


def _flatten(obj, prefix=""):
    out = {}
    for f in fields(obj):
        val = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(val):
            out.update(_flatten(val, key + "."))
        else:
            out[key] = val
    return out


def to_text(cfg: RunConfig) -> str:
    """Canonical snapshot: sorted dotted keys, repr-precision floats."""
    lines = []
    for key, val in sorted(_flatten(cfg).items()):
        lines.append(f"{key} = {val!r}" if isinstance(val, str) else f"{key} = {val}")
    return "\n".join(lines) + "\n"


def parse_text(text: str, cfg: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = cfg if cfg is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        raw = raw.strip()
        if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
            raw = raw[1:-1]
        try:
            set_key(cfg, key.strip(), raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from exc
    return cfg


def load_file(path: str, cfg: RunConfig | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_text(text, cfg, source=path)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(to_text(cfg).encode()).hexdigest()[:16]


def validate(cfg: RunConfig) -> None:
    p = cfg.ppo
    if not (0 < p.minibatch <= p.batch):
        raise ConfigError("require 0 < ppo.minibatch <= ppo.batch")
    for name in ("clip", "epochs", "gamma", "lam", "policy_lr", "value_lr", "grad_clip"):
        if getattr(p, name) <= 0:
            raise ConfigError(f"ppo.{name} must be positive")
    if cfg.train.iterations < 1:
        raise ConfigError("train.iterations must be >= 1")
    if cfg.train.workers < 1:
        raise ConfigError("train.workers must be >= 1")
    if cfg.env.horizon < 1:
        raise ConfigError("env.horizon must be >= 1")
    if cfg.env.n_topo < 0 or cfg.env.n_attr < 0:
        raise ConfigError("design step counts must be >= 0")
    if cfg.ppo.credit_mode not in ("stage_split", "gae_all"):
        raise ConfigError("ppo.credit_mode must be stage_split or gae_all")
    if cfg.net.d_model % cfg.net.n_heads or cfg.net.value_d_model % cfg.net.n_heads:
        raise ConfigError("model width must be divisible by head count")
