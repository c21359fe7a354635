"""Run configuration: nested YAML document with strict key checking.

Defaults carry the published hyperparameters (network sizes, learning
rates, replay and batch sizes, update cadences). A config file only needs
the keys it overrides; unknown keys are rejected so typos fail fast.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math

import yaml

DEFAULTS = {
    "environment": {
        # swarm_milling | point_mass_2d | pendulum_swingup
        "kind": "swarm_milling",
    },
    "swarm": {
        "n_agents": 25,
        "speed": 3.0,
        "dt": 0.1,
        "r_repulsion": 1.0,
        "r_orientation": 3.4,
        "r_attraction": 16.0,
        "noise_sigma": 0.35,
        "max_turn_deg": 4.0,
        "n_steps": 1000,
        "k_neighbors": 7,
        "init_radius": None,
    },
    "toy": {
        "horizon": 100,
        "action_bound": 1.0,
        "goal": [0.0, 0.0],
        "dt": 0.1,
        "pendulum_action_bound": 2.0,
        "pendulum_dt": 0.05,
        "pendulum_horizon": 200,
    },
    "policy_net": {
        "hidden_layers": 2,
        "width": 128,
        "learning_rate": 1e-4,
    },
    "reward_net": {
        "hidden_layers": 2,
        "width": 64,
        "learning_rate": 1e-4,
    },
    "refer": {
        "replay_capacity": 262144,
        "minibatch": 128,
        "experiences_per_update": 1,
        "c_max": 4.0,
        "target_far_fraction": 0.1,
        "beta_init": 0.3,
        "beta_rate": 1e-4,
        "gamma": 0.99,
        "min_start": 4096,
    },
    "gcl": {
        "background_capacity": 512,
        "demo_minibatch": 16,
        "background_minibatch": 16,
        "experiences_per_reward_update": 10000,
    },
    "cmaes": {
        "budget": 280,
        "rollouts_per_eval": 3,
        "sigma0": 0.4,
        "settle_steps": 500,
    },
    "demos": {
        "count": 50,
        "rotation_threshold": 0.8,
        "settle_steps": 500,
        "max_rollouts": 10000,
    },
    "training": {
        "total_steps": 200000,
        "eval_episodes": 20,
        "metrics_every": 1,
        "episode_log_every": 1,
        "checkpoint_every": 50000,
    },
}

# Minimum spacing between policy-gradient steps and reward updates; the
# reward must change at least this much slower than the policy.
MIN_REWARD_UPDATE_SPACING = 1000


class ConfigError(ValueError):
    pass


def _check_keys(user: dict, defaults: dict, path: str = ""):
    for key, value in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be a section")
            _check_keys(value, defaults[key], path + key + ".")


def _merge(user: dict, defaults: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if isinstance(value, dict):
            out[key] = _merge(value, defaults[key])
        else:
            out[key] = value
    return out


def _validate(cfg: dict):
    kind = cfg["environment"]["kind"]
    if kind not in ("swarm_milling", "point_mass_2d", "pendulum_swingup"):
        raise ConfigError(f"unknown environment kind {kind!r}")
    sw = cfg["swarm"]
    if not (0 < sw["r_repulsion"] < sw["r_orientation"] < sw["r_attraction"]):
        raise ConfigError("swarm radii must satisfy 0 < r_repulsion < r_orientation < r_attraction")
    rf = cfg["refer"]
    if not (rf["c_max"] > 1 and 0 < rf["target_far_fraction"] < 1 and 0 < rf["beta_init"] <= 1):
        raise ConfigError("refer config out of range (c_max > 1, far fraction and beta in (0, 1))")
    if not (0 <= rf["gamma"] < 1):
        raise ConfigError("gamma must lie in [0, 1)")
    gc = cfg["gcl"]
    if gc["experiences_per_reward_update"] < MIN_REWARD_UPDATE_SPACING:
        raise ConfigError(
            f"experiences_per_reward_update must be >= {MIN_REWARD_UPDATE_SPACING} "
            "(reward updates must stay much rarer than policy updates)"
        )
    if gc["background_capacity"] < 1 or gc["demo_minibatch"] < 1 or gc["background_minibatch"] < 1:
        raise ConfigError("gcl sizes must be positive")


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Load, merge with defaults, validate; returns the full config dict."""
    user = {}
    if path is not None:
        with open(path) as f:
            user = yaml.safe_load(f) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
    _check_keys(user, DEFAULTS)
    cfg = _merge(user, DEFAULTS)
    if overrides:
        _check_keys(overrides, DEFAULTS)
        cfg = _merge(overrides, cfg)
    _validate(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    """Stable digest of the fully merged config (ties datasets to configs)."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def swarm_config(cfg: dict, seed: int = 0):
    from .swarm import SwarmConfig

    sw = cfg["swarm"]
    return SwarmConfig(
        n_agents=sw["n_agents"],
        speed=sw["speed"],
        dt=sw["dt"],
        r_repulsion=sw["r_repulsion"],
        r_orientation=sw["r_orientation"],
        r_attraction=sw["r_attraction"],
        noise_sigma=sw["noise_sigma"],
        max_turn=math.radians(sw["max_turn_deg"]),
        n_steps=sw["n_steps"],
        k_neighbors=sw["k_neighbors"],
        init_radius=sw["init_radius"],
        seed=seed,
    )


def toy_spec(cfg: dict):
    from .toy_envs import pendulum_spec, point_mass_spec

    kind = cfg["environment"]["kind"]
    toy = cfg["toy"]
    if kind == "point_mass_2d":
        return point_mass_spec(toy["horizon"], toy["action_bound"], tuple(toy["goal"]), toy["dt"])
    if kind == "pendulum_swingup":
        return pendulum_spec(toy["pendulum_horizon"], toy["pendulum_action_bound"], toy["pendulum_dt"])
    raise ConfigError(f"{kind!r} is not a toy environment")
