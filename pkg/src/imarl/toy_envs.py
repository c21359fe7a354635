"""Analytic single-agent environments for validating the RL/IRL pipelines.

Two tasks with known rewards: a 2-D double-integrator point mass driven to
a goal, and a rigid-pendulum swing-up. Both are deterministic, reward is
non-positive and zero only at the goal/upright fixed point with no
actuation. Actions are normalized to [-1, 1] and scaled by action_bound
inside the step function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# pendulum constants (uniform rod pivoted at one end)
_G = 10.0
_MASS = 1.0
_LENGTH = 1.0
_MAX_SPEED = 8.0

# point-mass bounds: keep the state space compact so exploratory policies
# cannot diverge arbitrarily far from the goal
_PM_MAX_SPEED = 2.0
_PM_POS_BOUND = 4.0


@dataclass(frozen=True)
class ToyEnvSpec:
    kind: str  # point_mass_2d | pendulum_swingup
    horizon: int = 100
    action_bound: float = 1.0
    known_reward_params: tuple = ()
    dt: float = 0.1

    def __post_init__(self):
        if self.kind not in ("point_mass_2d", "pendulum_swingup"):
            raise ValueError(f"unknown toy environment {self.kind!r}")
        if self.horizon < 1 or self.action_bound <= 0 or self.dt <= 0:
            raise ValueError("horizon >= 1, action_bound > 0 and dt > 0 required")
        object.__setattr__(self, "known_reward_params", tuple(float(v) for v in self.known_reward_params))

    @property
    def state_dim(self) -> int:
        return 4 if self.kind == "point_mass_2d" else 3

    @property
    def action_dim(self) -> int:
        return 2 if self.kind == "point_mass_2d" else 1

    @property
    def goal(self) -> np.ndarray:
        if self.kind != "point_mass_2d":
            raise ValueError("goal only defined for point_mass_2d")
        if self.known_reward_params:
            return np.asarray(self.known_reward_params[:2])
        return np.zeros(2)


def point_mass_spec(horizon: int = 100, action_bound: float = 1.0, goal=(0.0, 0.0), dt: float = 0.1):
    return ToyEnvSpec("point_mass_2d", horizon, action_bound, tuple(goal), dt)


def pendulum_spec(horizon: int = 200, action_bound: float = 2.0, dt: float = 0.05):
    return ToyEnvSpec("pendulum_swingup", horizon, action_bound, (), dt)


def env_reset(spec: ToyEnvSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "point_mass_2d":
        pos = rng.uniform(-1.0, 1.0, size=2)
        return np.concatenate([pos, np.zeros(2)])
    theta = rng.uniform(-np.pi, np.pi)
    return np.array([math.cos(theta), math.sin(theta), 0.0])


def env_step(spec: ToyEnvSpec, state: np.ndarray, action: np.ndarray):
    """One step of deterministic dynamics; returns (next_state, true_reward).

    `action` is in normalized units; it is clipped to [-1, 1] and scaled by
    action_bound before entering the dynamics and the control penalty.
    """
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise ValueError("non-finite state")
    a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0) * spec.action_bound

    if spec.kind == "point_mass_2d":
        pos, vel = state[:2], state[2:]
        new_pos = pos + spec.dt * vel
        new_vel = np.clip(vel + spec.dt * a, -_PM_MAX_SPEED, _PM_MAX_SPEED)
        # saturating walls: clamp position and kill outward velocity
        clamped = np.clip(new_pos, -_PM_POS_BOUND, _PM_POS_BOUND)
        new_vel = np.where(clamped != new_pos, 0.0, new_vel)
        reward = -float(np.sum((pos - spec.goal) ** 2)) - 0.01 * float(a @ a)
        return np.concatenate([clamped, new_vel]), reward

    cos_t, sin_t, theta_dot = state
    theta = math.atan2(sin_t, cos_t)
    torque = float(a[0])
    # semi-implicit Euler on a rod pendulum, theta = 0 upright
    acc = (3.0 * _G / (2.0 * _LENGTH)) * sin_t + (3.0 / (_MASS * _LENGTH**2)) * torque
    new_dot = theta_dot + spec.dt * acc
    new_dot = min(_MAX_SPEED, max(-_MAX_SPEED, new_dot))
    new_theta = theta + spec.dt * new_dot
    reward = -(theta**2 + 0.1 * theta_dot**2 + 0.001 * torque**2)
    return np.array([math.cos(new_theta), math.sin(new_theta), new_dot]), reward


def pendulum_energy(state: np.ndarray) -> float:
    """Total mechanical energy; potential is maximal upright (theta = 0)."""
    cos_t, _, theta_dot = state
    inertia = _MASS * _LENGTH**2 / 3.0
    return 0.5 * inertia * theta_dot**2 + _MASS * _G * (_LENGTH / 2.0) * cos_t


def rollout_return(spec: ToyEnvSpec, policy, rng: np.random.Generator) -> float:
    """Undiscounted true-reward return of one episode under `policy(state) -> action`."""
    state = env_reset(spec, rng)
    total = 0.0
    for _ in range(spec.horizon):
        state, r = env_step(spec, state, policy(state))
        total += r
    return total


def lqr_policy(spec: ToyEnvSpec):
    """Finite-horizon LQR controller for the point mass (oracle baseline).

    Solves the discrete Riccati recursion for the exact dynamics and
    quadratic cost used by env_step; actions are converted back to
    normalized units and clipped by the environment like any other policy.
    """
    if spec.kind != "point_mass_2d":
        raise ValueError("LQR baseline only defined for point_mass_2d")
    dt = spec.dt
    A = np.array([[1, 0, dt, 0], [0, 1, 0, dt], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
    B = np.array([[0, 0], [0, 0], [dt, 0], [0, dt]], dtype=float)
    Q = np.diag([1.0, 1.0, 0.0, 0.0])
    R = 0.01 * np.eye(2)
    gains = []
    P = Q.copy()
    for _ in range(spec.horizon):
        btp = B.T @ P
        K = np.linalg.solve(R + btp @ B, btp @ A)
        P = Q + A.T @ P @ (A - B @ K)
        gains.append(K)
    gains.reverse()
    goal_state = np.concatenate([spec.goal, np.zeros(2)])
    step_idx = {"t": 0}

    def policy(state):
        K = gains[min(step_idx["t"], spec.horizon - 1)]
        step_idx["t"] += 1
        a_phys = -K @ (state - goal_state)
        return a_phys / spec.action_bound

    def reset():
        step_idx["t"] = 0

    policy.reset = reset
    return policy


def baseline_returns(spec: ToyEnvSpec, n_episodes: int, seed: int = 0):
    """(oracle_mean, zero_policy_mean) true returns over matched resets.

    The pair anchors normalized scores: 1.0 is the LQR oracle, 0.0 is the
    do-nothing policy.
    """
    oracle = lqr_policy(spec)
    rng = np.random.default_rng(seed)
    oracle_total = 0.0
    zero_total = 0.0
    for _ in range(n_episodes):
        state_seed = rng.integers(2**32)
        oracle.reset()
        oracle_total += rollout_return(spec, oracle, np.random.default_rng(state_seed))
        zero_total += rollout_return(spec, lambda s: np.zeros(spec.action_dim), np.random.default_rng(state_seed))
    return oracle_total / n_episodes, zero_total / n_episodes


def normalized_score(mean_return: float, oracle_return: float, zero_return: float) -> float:
    """Fraction of the oracle's improvement over doing nothing."""
    return (mean_return - zero_return) / (oracle_return - zero_return)
