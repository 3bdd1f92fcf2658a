"""One JSON configuration document with blocks
{env, robot, reward, rse, ppo, distill, eval}; every field defaults to the
project's standard values and unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .model import EnvParams, ModelError, RobotModel, default_robot
from .reward import RewardWeights


class ConfigError(ValueError):
    """Invalid or unknown configuration content (CLI exit code 2)."""


@dataclass
class RseConfig:
    adaptive: bool = True
    mode: str = "success_ratio"            # or "fail_ratio"
    kappa_init: list = field(default_factory=lambda: [0.5, 0.5, 0.5, 0.5])
    kappa_eval: list = field(default_factory=lambda: [0.1, 0.1, 0.1, 0.1])
    rho: float = 0.99
    window: int = 11
    eps_priority: float = 0.05
    cache_capacity: int = 16
    cache_threshold: float = 0.5
    cache_stride: int = 8

    def __post_init__(self):
        if self.mode not in ("success_ratio", "fail_ratio"):
            raise ConfigError(f"rse.mode must be success_ratio or fail_ratio, got {self.mode!r}")
        if len(self.kappa_init) != 4 or len(self.kappa_eval) != 4:
            raise ConfigError("kappa_init / kappa_eval need 4 entries")


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch: int = 1024
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    lr: float = 3e-4
    n_envs: int = 64
    horizon: int = 64
    iterations: int = 500
    horizon_set: list = field(default_factory=lambda: [1, 5, 15])
    action_bounds: list = field(default_factory=lambda: [0.05, 0.05, 0.3, 1.2, 1.2])
    init_log_std: float = -1.0
    randomize_envs: bool = False

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ConfigError("gamma and gae_lambda must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ConfigError("clip_eps must be positive")


@dataclass
class DistillConfig:
    latent_dim: int = 32
    history: int = 4
    beta_max: float = 0.01
    window: int = 15                      # goal window, control steps
    mask_probs: dict = field(default_factory=lambda: {
        "wrist": 0.5, "object": 0.5, "fingers": 0.0})
    inference_mask: list = field(default_factory=lambda: ["wrist"])
    camera_bearing: list = field(default_factory=lambda: [30.0, 150.0])  # degrees
    camera_range: list = field(default_factory=lambda: [0.5, 1.0])       # m
    n_rays: int = 64
    fov: float = 1.1
    lr: float = 3e-4
    iterations: int = 200
    n_envs: int = 16
    horizon: int = 64
    minibatch: int = 256
    updates_per_iter: int = 30
    buffer_size: int = 60000
    teacher_gate: float = 0.35

    def __post_init__(self):
        bad = set(self.mask_probs) - {"wrist", "object", "fingers"}
        if bad:
            raise ConfigError(f"unknown mask components: {sorted(bad)}")


@dataclass
class EvalConfig:
    rollouts_per_clip: int = 8
    max_t_err: float = 0.10               # m, tracking success bound
    drop_margin: float = 0.01             # m below the table counts as dropped
    lift_min: float = 0.05                # m, vision success lift
    hold_steps: int = 30                  # consecutive contact steps (1 s)
    rest_speed: float = 0.05              # m/s, settled object


@dataclass
class Config:
    env: EnvParams = field(default_factory=EnvParams)
    robot: RobotModel = field(default_factory=default_robot)
    reward: RewardWeights = field(default_factory=RewardWeights)
    rse: RseConfig = field(default_factory=RseConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _build_block(cls, doc: dict, name: str):
    known = {f.name for f in dc_fields(cls)}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown keys in {name!r} block: {sorted(extra)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {name!r} block: {e}") from e


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Build the configuration from defaults, an optional JSON file, and an
    optional override mapping (same block structure)."""
    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError:
            raise
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    if overrides:
        for block, vals in overrides.items():
            doc.setdefault(block, {}).update(vals)

    known_blocks = {"env", "robot", "reward", "rse", "ppo", "distill", "eval"}
    extra = set(doc) - known_blocks
    if extra:
        raise ConfigError(f"unknown config blocks: {sorted(extra)}")

    cfg = Config()
    if "env" in doc:
        try:
            cfg.env = EnvParams.from_json({"schema_version": 1, **doc["env"]})
        except ModelError as e:
            raise ConfigError(f"bad 'env' block: {e}") from e
    if "robot" in doc:
        try:
            cfg.robot = RobotModel.from_json({"schema_version": 1, **doc["robot"]})
        except (ModelError, KeyError) as e:
            raise ConfigError(f"bad 'robot' block: {e}") from e
    if "reward" in doc:
        try:
            cfg.reward = RewardWeights.from_json(doc["reward"])
        except ValueError as e:
            raise ConfigError(f"bad 'reward' block: {e}") from e
    if "rse" in doc:
        cfg.rse = _build_block(RseConfig, doc["rse"], "rse")
    if "ppo" in doc:
        cfg.ppo = _build_block(PpoConfig, doc["ppo"], "ppo")
    if "distill" in doc:
        cfg.distill = _build_block(DistillConfig, doc["distill"], "distill")
    if "eval" in doc:
        cfg.eval = _build_block(EvalConfig, doc["eval"], "eval")
    return cfg


def config_to_json(cfg: Config) -> dict:
    def block(obj):
        out = {}
        for f in dc_fields(obj):
            v = getattr(obj, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    return {
        "env": {k: v for k, v in cfg.env.to_json().items() if k != "schema_version"},
        "robot": {k: v for k, v in cfg.robot.to_json().items() if k != "schema_version"},
        "reward": cfg.reward.to_json(),
        "rse": block(cfg.rse),
        "ppo": block(cfg.ppo),
        "distill": block(cfg.distill),
        "eval": block(cfg.eval),
    }
