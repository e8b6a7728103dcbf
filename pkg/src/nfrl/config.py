"""Run configuration: one flat record, layered key=value files, CLI overrides.

Defaults mirror the published hyperparameter tables where one exists
(channels 512, noise_std 0.1, mask_prob 0.1, candidate_count 1024, goal
noise 0.05, gamma 0.99, lambda_ent 0.0; blocks is 12 for single-task
cloning and 6 for the conditioned algorithms). Optimizer knobs (lr, batch)
are artifact-level choices with ordinary defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import ConfigError

ALGORITHMS = ("density-mle", "density-vi", "bc", "gcbc", "rlbc", "ugs")

# tuned-set presets from the conditioning/offline tables
GAMMA_FUT_PRESETS = (0.97, 0.99)
ALPHA_PRESETS = (1.0, 10.0)

# single-task cloning uses the deeper flow; conditioned algorithms the shallower
_BLOCK_DEFAULTS = {"density-mle": 12, "density-vi": 12, "bc": 12,
                   "gcbc": 6, "rlbc": 6, "ugs": 6}


@dataclass
class RunConfig:
    algorithm: str = "density-mle"
    # data / task references
    env: str = "open"
    goal: str = "default"
    dataset: str = "two-gauss"   # builtin density name or a dataset file path
    target: str = "gauss-offset"  # VI target name
    # model
    blocks: int = -1             # -1: per-algorithm default
    channels: int = 512
    noise_std: float = 0.1
    rep_dims: int = 512
    encoder_layers: int = 4
    # algorithm
    alpha_bc: float = 1.0
    lambda_ent: float = 0.0
    gamma: float = 0.99
    gamma_fut: float = 0.99
    mask_prob: float = 0.1
    candidate_count: int = 1024
    goal_noise_std: float = 0.05
    grad_steps: int = 64         # per-episode updates in the exploration loop
    twin: bool = True
    tau: float = 0.005
    critic_channels: int = 256
    # optimization
    lr: float = 3e-4
    critic_lr: float = 3e-4
    batch: int = 256
    steps: int = 1000
    seed: int = 0
    # bookkeeping
    eval_every: int = 0          # 0: no mid-run evaluation
    eval_episodes: int = 50
    checkpoint_every: int = 0    # 0: initial and final checkpoints only
    workers: int = 1

    def resolved(self) -> "RunConfig":
        """Fill per-algorithm defaults; validation happens here too."""
        cfg = dataclasses.replace(self)
        if cfg.algorithm not in ALGORITHMS:
            raise ConfigError(f"field algorithm: {cfg.algorithm!r} is not "
                              f"one of {ALGORITHMS}")
        if cfg.blocks == -1:
            cfg.blocks = _BLOCK_DEFAULTS[cfg.algorithm]
        validate(cfg)
        return cfg


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    f = _FIELDS[name]
    try:
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
        if f.type in ("bool", bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return raw
    except ValueError as e:
        raise ConfigError(f"field {name}: {e}") from None


def parse_assignments(pairs, into: dict) -> dict:
    """key=value strings -> coerced values merged into `into` (last wins)."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key: {key}")
        into[key] = _coerce(key, raw.strip())
    return into


def read_config_file(path) -> dict:
    """One key=value per line; # comments and blank lines ignored."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    pairs = []
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{i}: expected key=value, got {line!r}")
        pairs.append(line)
    return parse_assignments(pairs, {})


def load_config(files=(), overrides=()) -> RunConfig:
    """Layer config files in order, then key=value overrides; last wins."""
    merged: dict = {}
    for f in files:
        merged.update(read_config_file(f))
    parse_assignments(overrides, merged)
    return RunConfig(**merged).resolved()


def validate(cfg: RunConfig) -> None:
    def fail(field, msg):
        raise ConfigError(f"field {field}: {msg}")

    if cfg.algorithm not in ALGORITHMS:
        fail("algorithm", f"{cfg.algorithm!r} is not one of {ALGORITHMS}")
    if cfg.blocks < 1:
        fail("blocks", "must be >= 1")
    for name in ("channels", "rep_dims", "encoder_layers", "batch",
                 "candidate_count", "grad_steps", "critic_channels"):
        if getattr(cfg, name) < 1:
            fail(name, "must be >= 1")
    for name in ("steps", "eval_every", "eval_episodes", "checkpoint_every"):
        if getattr(cfg, name) < 0:
            fail(name, "must be >= 0")
    if cfg.workers < 1:
        fail("workers", "must be >= 1")
    for name in ("noise_std", "goal_noise_std", "lambda_ent", "alpha_bc"):
        if getattr(cfg, name) < 0:
            fail(name, "must be >= 0")
    for name in ("lr", "critic_lr"):
        if getattr(cfg, name) <= 0:
            fail(name, "must be > 0")
    if not 0.0 <= cfg.mask_prob <= 1.0:
        fail("mask_prob", "must be in [0, 1]")
    if not 0.0 < cfg.gamma < 1.0:
        fail("gamma", "must be in (0, 1)")
    if not 0.0 < cfg.gamma_fut <= 1.0:
        fail("gamma_fut", "must be in (0, 1]")
    if not 0.0 < cfg.tau <= 1.0:
        fail("tau", "must be in (0, 1]")


def to_text(cfg: RunConfig) -> str:
    """The full resolved snapshot, one key=value per line, field order."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"
