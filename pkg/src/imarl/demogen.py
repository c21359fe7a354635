"""Milling demonstration synthesis: radii tuning and trajectory selection.

The three zone radii are searched in a log-increment parameterization
(r_r = e^u0, r_o = r_r + e^u1, r_a = r_o + e^u2) so every candidate
satisfies the ordering constraint by construction. Rollouts settle for a
configurable number of steps before the recorded window so the selection
filter measures the attained collective state rather than the transient.
Recorded actions are the realized per-step heading changes in the
normalized (yaw, pitch) action coordinates, which makes every
demonstration exactly replayable through the policy-driven stepper.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import cmaes, swarm
from .swarm import SwarmConfig, SwarmState
from .trajectory import Trajectory


@dataclass(frozen=True)
class DemoSelection:
    threshold: float = 0.80
    count: int = 50
    swimmers: int = 25
    steps: int = 1000
    settle_steps: int = 500
    max_rollouts: int = 10000
    min_acceptance: float = 0.01


def radii_from_params(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    r_r = np.exp(u[0])
    r_o = r_r + np.exp(u[1])
    r_a = r_o + np.exp(u[2])
    return np.array([r_r, r_o, r_a])


def params_from_radii(radii) -> np.ndarray:
    r_r, r_o, r_a = (float(r) for r in radii)
    if not (0.0 < r_r < r_o < r_a):
        raise ValueError("radii must satisfy 0 < r_r < r_o < r_a")
    return np.log(np.array([r_r, r_o - r_r, r_a - r_o]))


def rollout_rotation(config: SwarmConfig, rng: np.random.Generator, settle_steps: int) -> float:
    """Time-averaged rotation over the post-settling recording window."""
    state = swarm.init_state(config, rng)
    for _ in range(settle_steps):
        state = swarm.model_step(state, config, rng)
    total = 0.0
    for _ in range(config.n_steps):
        state = swarm.model_step(state, config, rng)
        total += swarm.order_parameters(state)[0]
    return total / config.n_steps


def rotation_objective(
    radii, n_rollouts: int, config: SwarmConfig, rng: np.random.Generator, settle_steps: int = 500
) -> float:
    """Mean time-averaged rotation of n_rollouts model rollouts."""
    cfg = config.with_radii(radii)
    return float(np.mean([rollout_rotation(cfg, rng, settle_steps) for _ in range(n_rollouts)]))


def _objective_for_eval(u, eval_seed, n_rollouts, config, settle_steps):
    radii = radii_from_params(u)
    return rotation_objective(radii, n_rollouts, config, np.random.default_rng(eval_seed), settle_steps)


def tune_radii(
    config: SwarmConfig,
    budget: int,
    rng: np.random.Generator,
    n_rollouts: int = 3,
    sigma0: float = 0.4,
    settle_steps: int = 500,
    map_fn=map,
    log_fn=None,
):
    """CMA-ES search for milling radii; returns (best_radii, best_value, history).

    Each candidate evaluation gets its own deterministic seed, so results
    are identical whether candidates run serially or on a worker pool.
    """
    x0 = params_from_radii([config.r_repulsion, config.r_orientation, config.r_attraction])
    seed_root = int(rng.integers(2**63))
    counter = {"n": 0}

    def objective_batch(candidates):
        jobs = []
        for u in candidates:
            jobs.append((u, seed_root + counter["n"], n_rollouts, config, settle_steps))
            counter["n"] += 1
        return list(map_fn(_objective_star, jobs))

    best_u, best_val, history = cmaes.cmaes_optimize(
        None, x0, sigma0, budget, rng, objective_batch=objective_batch, callback=log_fn
    )
    return radii_from_params(best_u), best_val, history


def _objective_star(args):
    return _objective_for_eval(*args)


@dataclass
class DemoRollout:
    """One accepted rollout: per-agent observation and world trajectories."""

    obs_trajectories: list  # Trajectory per agent: 5k-dim observations, normalized actions
    world_trajectories: list  # Trajectory per agent: (pos, heading) 6-dim states, same actions
    rotation_avg: float


def record_rollout(config: SwarmConfig, rng: np.random.Generator, settle_steps: int, episode_id: int = 0):
    """Run one settled model rollout and record (observation, action) pairs.

    Actions are stored divided by the turn limit, so they live in [-1, 1]
    and can be fed back through the policy stepper after rescaling.
    """
    state = swarm.init_state(config, rng)
    for _ in range(settle_steps):
        state = swarm.model_step(state, config, rng)

    n, t_len = config.n_agents, config.n_steps
    obs = np.empty((t_len, n, config.obs_dim))
    world = np.empty((t_len, n, 6))
    acts = np.empty((t_len, n, 2))
    rot_total = 0.0
    for t in range(t_len):
        obs[t] = swarm.observe_all(state, config)
        world[t] = np.concatenate([state.positions, state.headings], axis=1)
        state, actions = swarm.model_step_actions(state, config, rng)
        acts[t] = actions / config.max_turn
        rot_total += swarm.order_parameters(state)[0]

    rotation_avg = rot_total / t_len
    obs_trajs = [
        Trajectory(states=obs[:, i], actions=acts[:, i], agent_id=i, episode_id=episode_id)
        for i in range(n)
    ]
    world_trajs = [
        Trajectory(states=world[:, i], actions=acts[:, i], agent_id=i, episode_id=episode_id)
        for i in range(n)
    ]
    return DemoRollout(obs_trajs, world_trajs, rotation_avg)


def generate_demonstrations(
    radii, selection: DemoSelection, config: SwarmConfig, rng: np.random.Generator, progress_fn=None
):
    """Accept rollouts until `selection.count` exceed the rotation threshold.

    Returns (accepted_rollouts, attempts). Aborts with a diagnostic when the
    acceptance rate collapses: that means the radii do not produce milling.
    """
    cfg = replace(config.with_radii(radii), n_agents=selection.swimmers, n_steps=selection.steps)
    accepted: list[DemoRollout] = []
    attempts = 0
    while len(accepted) < selection.count:
        if attempts >= selection.max_rollouts:
            raise RuntimeError(
                f"demonstration generation aborted: {len(accepted)}/{selection.count} accepted "
                f"after {attempts} rollouts (acceptance "
                f"{len(accepted) / max(attempts, 1):.4f} < {selection.min_acceptance}); "
                f"radii {np.asarray(radii)} do not reliably produce milling"
            )
        # early abort once the acceptance rate is provably hopeless
        remaining = selection.max_rollouts - attempts
        if (len(accepted) + remaining * 1.0) < selection.count:
            attempts = selection.max_rollouts
            continue
        rollout = record_rollout(cfg, rng, selection.settle_steps, episode_id=len(accepted))
        attempts += 1
        if rollout.rotation_avg > selection.threshold:
            accepted.append(rollout)
            if progress_fn:
                progress_fn(len(accepted), attempts, rollout.rotation_avg)
        elif attempts >= 200 and len(accepted) / attempts < selection.min_acceptance:
            raise RuntimeError(
                f"demonstration generation aborted: acceptance rate "
                f"{len(accepted) / attempts:.4f} below {selection.min_acceptance} "
                f"after {attempts} rollouts; radii {np.asarray(radii)} do not produce milling"
            )
    return accepted, attempts


def replay_world_trajectories(world_trajs, config: SwarmConfig):
    """Replay recorded actions through the policy stepper.

    Returns the maximum absolute deviation between replayed and recorded
    states across all steps; demonstrations are replayable to ~1e-9.
    """
    t_len = len(world_trajs[0])
    n = len(world_trajs)
    states = np.stack([tr.states for tr in world_trajs], axis=1)  # (T, n, 6)
    actions = np.stack([tr.actions for tr in world_trajs], axis=1)  # (T, n, 2)
    state = SwarmState(positions=states[0, :, :3].copy(), headings=states[0, :, 3:].copy(), t=0)
    worst = 0.0
    for t in range(t_len - 1):
        state = swarm.policy_step(state, actions[t] * config.max_turn, config)
        recorded = states[t + 1]
        dev = max(
            np.abs(state.positions - recorded[:, :3]).max(),
            np.abs(state.headings - recorded[:, 3:]).max(),
        )
        worst = max(worst, dev)
    return worst
