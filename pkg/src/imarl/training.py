"""Training loops: forward RL, inverse RL, evaluation and analysis runs.

The inverse loop interleaves experience collection under the current
policy (rewarded by the learned reward network), one policy update per
collected experience, and one reward update per configured block of
experiences, with fresh episodes feeding both the replay memory and the
background batch used for partition estimation.
"""

from __future__ import annotations

import collections
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import demogen, gcl, nn, refer, swarm, toy_envs, trajio
from .replay import EpisodeBuilder, ReplayMemory
from .trajectory import Trajectory

log = logging.getLogger("imarl")

TRAIN_COLUMNS = ["step", "mean_return", "far_fraction", "beta", "mean_kl", "value_loss"]
REWARD_COLUMNS = ["update_index", "demo_return_mean", "bg_return_mean", "objective_estimate"]
SWARM_EPISODE_COLUMNS = ["episode", "step", "rotation_avg", "polarization_avg", "learned_return_mean"]
TOY_EPISODE_COLUMNS = ["episode", "step", "true_return", "learned_return"]

TOY_KINDS = ("point_mass_2d", "pendulum_swingup")


def _streams(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


class RewardScaler:
    """Scales stored true rewards to unit spread for stable value learning.

    The scale is the reward standard deviation over the warmup phase and is
    frozen once updates begin, keeping stored targets stationary. Learned
    rewards are already bounded, so the inverse loop never uses this.
    """

    def __init__(self):
        self._warmup: list[float] | None = []
        self.scale = 1.0

    def observe(self, r: float):
        if self._warmup is not None:
            self._warmup.append(r)

    def freeze(self):
        if self._warmup is not None:
            spread = float(np.std(self._warmup)) if len(self._warmup) > 1 else 0.0
            self.scale = spread if spread > 1e-12 else 1.0
            self._warmup = None

    @property
    def frozen(self) -> bool:
        return self._warmup is None


def _refer_config(cfg) -> refer.ReFERConfig:
    rf = cfg["refer"]
    return refer.ReFERConfig(
        c_max=rf["c_max"],
        target_far_fraction=rf["target_far_fraction"],
        beta=rf["beta_init"],
        beta_rate=rf["beta_rate"],
        gamma=rf["gamma"],
        minibatch=rf["minibatch"],
        min_start=rf["min_start"],
    )


def _policy_net(cfg, state_dim: int, action_dim: int, rng) -> refer.PolicyValueNet:
    pn = cfg["policy_net"]
    return refer.PolicyValueNet.create(state_dim, action_dim, width=pn["width"], hidden_layers=pn["hidden_layers"], rng=rng)


def _reward_net(cfg, obs_dim: int, act_dim: int, rng) -> gcl.RewardNet:
    rn = cfg["reward_net"]
    return gcl.RewardNet.create(obs_dim, act_dim, width=rn["width"], hidden_layers=rn["hidden_layers"], rng=rng)


def save_policy(path, net: refer.PolicyValueNet, meta=None):
    nn.save_params(path, net.spec, net.theta, meta={"role": "policy", **(meta or {})})


def load_policy(path) -> refer.PolicyValueNet:
    spec, theta, _ = nn.load_params(path)
    if spec.output_transform != "gaussian_head":
        raise ValueError(f"{path}: not a policy checkpoint")
    return refer.PolicyValueNet(spec=spec, theta=theta)


def save_reward(path, net: gcl.RewardNet, meta=None):
    nn.save_params(
        path, net.spec, net.theta, meta={"role": "reward", "obs_dim": net.obs_dim, "act_dim": net.act_dim, **(meta or {})}
    )


def load_reward(path) -> gcl.RewardNet:
    spec, theta, meta = nn.load_params(path)
    if meta.get("role") != "reward":
        raise ValueError(f"{path}: not a reward checkpoint")
    return gcl.RewardNet(spec=spec, theta=theta, obs_dim=meta["obs_dim"], act_dim=meta["act_dim"])


def _rescale_episode(ep, factor: float, gamma: float):
    """Apply a reward rescale to a stored episode and rebuild its targets."""
    ep.rewards *= factor
    q_next = ep.bootstrap_value
    v_next = ep.bootstrap_value
    rho_next = 1.0
    for t in range(len(ep) - 1, -1, -1):
        ep.qret[t] = ep.rewards[t] + gamma * (min(1.0, rho_next) * (q_next - v_next) + v_next)
        q_next = ep.qret[t]
        v_next = ep.values[t]
        rho_next = ep.rho[t]


def train_rl(cfg, out_dir, seed: int) -> dict:
    """Forward solver on a toy environment with its true reward."""
    kind = cfg["environment"]["kind"]
    if kind not in TOY_KINDS:
        raise ValueError(f"train-rl needs a toy environment, got {kind!r}")
    spec = config_mod.toy_spec(cfg)
    out = Path(out_dir)
    net_rng, env_rng, act_rng, upd_rng = _streams(seed, 4)
    scaler = RewardScaler()

    net = _policy_net(cfg, spec.state_dim, spec.action_dim, net_rng)
    rcfg = _refer_config(cfg)
    adam = nn.AdamState.for_params(net.theta, lr=cfg["policy_net"]["learning_rate"])
    memory = ReplayMemory(cfg["refer"]["replay_capacity"])

    total_steps = cfg["training"]["total_steps"]
    metrics_every = cfg["training"]["metrics_every"]
    ckpt_every = cfg["training"]["checkpoint_every"]
    recent = collections.deque(maxlen=100)
    far_history = []

    state = toy_envs.env_reset(spec, env_rng)
    builder = EpisodeBuilder(episode_id=0)
    ep_return = 0.0
    episodes = 0

    with trajio.MetricsWriter(out / "training.csv", TRAIN_COLUMNS) as metrics, trajio.MetricsWriter(
        out / "episodes.csv", TOY_EPISODE_COLUMNS
    ) as ep_metrics:
        for step in range(1, total_steps + 1):
            action, logprob, mean, std, _ = refer.act_full(net, state, act_rng)
            nxt, r = toy_envs.env_step(spec, state, action)
            scaler.observe(r)
            builder.add(state, action, logprob, mean, std, r / scaler.scale)
            ep_return += r
            state = nxt

            if len(builder) >= spec.horizon:
                refer.close_episode(memory, builder.build(state, terminal=False), net, rcfg)
                recent.append(ep_return)
                ep_metrics.emit(
                    {"episode": episodes, "step": step, "true_return": ep_return, "learned_return": ep_return}
                )
                episodes += 1
                builder = EpisodeBuilder(episode_id=episodes)
                ep_return = 0.0
                state = toy_envs.env_reset(spec, env_rng)

            if len(memory) >= rcfg.min_start and not scaler.frozen:
                scaler.freeze()
                for ep in memory.episodes:
                    _rescale_episode(ep, 1.0 / scaler.scale, rcfg.gamma)
                builder.scale_rewards(1.0 / scaler.scale)

            if len(memory) >= rcfg.min_start:
                stats = refer.policy_update(net, memory, rcfg, adam, upd_rng)
                refer.adapt_beta(rcfg, stats.far_fraction)
                far_history.append(stats.far_fraction)
                if step % metrics_every == 0:
                    metrics.emit(
                        {
                            "step": step,
                            "mean_return": float(np.mean(recent)) if recent else 0.0,
                            "far_fraction": stats.far_fraction,
                            "beta": rcfg.beta,
                            "mean_kl": stats.mean_kl,
                            "value_loss": stats.value_loss,
                        }
                    )
            if step % ckpt_every == 0:
                save_policy(out / "policy.ckpt", net, {"step": step})

    save_policy(out / "policy.ckpt", net, {"step": total_steps})
    tail = far_history[len(far_history) // 2 :]
    return {
        "episodes": episodes,
        "mean_return_last100": float(np.mean(recent)) if recent else float("nan"),
        "far_fraction_tail_mean": float(np.mean(tail)) if tail else float("nan"),
        "beta_final": rcfg.beta,
        "checkpoint": str(out / "policy.ckpt"),
    }


def generate_expert_demos(cfg, checkpoint_path, n_demos: int, seed: int):
    """Roll out a trained toy policy into a demonstration set."""
    spec = config_mod.toy_spec(cfg)
    net = load_policy(checkpoint_path)
    env_rng, act_rng = _streams(seed, 2)
    demos = []
    returns = []
    for k in range(n_demos):
        state = toy_envs.env_reset(spec, env_rng)
        states = np.empty((spec.horizon, spec.state_dim))
        actions = np.empty((spec.horizon, spec.action_dim))
        total = 0.0
        for t in range(spec.horizon):
            action, _, _, _, _ = refer.act_full(net, state, act_rng)
            states[t] = state
            actions[t] = action
            state, r = toy_envs.env_step(spec, state, action)
            total += r
        demos.append(Trajectory(states=states, actions=actions, agent_id=0, episode_id=k))
        returns.append(total)
    return demos, returns


def _irl_toy(cfg, out: Path, seed: int, demos) -> dict:
    spec = config_mod.toy_spec(cfg)
    net_rng, rnet_rng, env_rng, act_rng, upd_rng, gcl_rng = _streams(seed, 6)

    net = _policy_net(cfg, spec.state_dim, spec.action_dim, net_rng)
    reward_net = _reward_net(cfg, spec.state_dim, spec.action_dim, rnet_rng)
    controller = gcl.fit_demo_controller(demos)
    rcfg = _refer_config(cfg)
    adam = nn.AdamState.for_params(net.theta, lr=cfg["policy_net"]["learning_rate"])
    reward_adam = nn.AdamState.for_params(reward_net.theta, lr=cfg["reward_net"]["learning_rate"])
    memory = ReplayMemory(cfg["refer"]["replay_capacity"])
    background = gcl.BackgroundBatch(cfg["gcl"]["background_capacity"])

    total_steps = cfg["training"]["total_steps"]
    metrics_every = cfg["training"]["metrics_every"]
    ckpt_every = cfg["training"]["checkpoint_every"]
    reward_every = cfg["gcl"]["experiences_per_reward_update"]
    m1, m2 = cfg["gcl"]["demo_minibatch"], cfg["gcl"]["background_minibatch"]

    recent_true = collections.deque(maxlen=100)
    reward_updates = 0
    since_reward_update = 0
    snapshot_counter = 0
    episodes = 0

    state = toy_envs.env_reset(spec, env_rng)
    builder = EpisodeBuilder(episode_id=0)
    ep_states = []
    ep_actions = []
    snap = gcl.PolicySnapshot(snapshot_id=snapshot_counter, spec=net.spec, theta=net.theta.copy())
    true_return = 0.0
    learned_return = 0.0

    with trajio.MetricsWriter(out / "training.csv", TRAIN_COLUMNS) as metrics, trajio.MetricsWriter(
        out / "reward_updates.csv", REWARD_COLUMNS
    ) as rw_metrics, trajio.MetricsWriter(out / "episodes.csv", TOY_EPISODE_COLUMNS) as ep_metrics:
        for step in range(1, total_steps + 1):
            action, logprob, mean, std, _ = refer.act_full(net, state, act_rng)
            r_learned = float(reward_net.rewards(state[None, :], action[None, :])[0])
            nxt, r_true = toy_envs.env_step(spec, state, action)  # true reward logged only
            builder.add(state, action, logprob, mean, std, r_learned)
            ep_states.append(state)
            ep_actions.append(action)
            true_return += r_true
            learned_return += r_learned
            state = nxt
            since_reward_update += 1

            if len(builder) >= spec.horizon:
                refer.close_episode(memory, builder.build(state, terminal=False), net, rcfg)
                tau = Trajectory(
                    states=np.stack(ep_states),
                    actions=np.stack(ep_actions),
                    episode_id=episodes,
                    source="background",
                    snapshot_id=snap.snapshot_id,
                )
                background.add(tau, snap)
                recent_true.append(true_return)
                ep_metrics.emit(
                    {"episode": episodes, "step": step, "true_return": true_return, "learned_return": learned_return}
                )
                episodes += 1
                snapshot_counter += 1
                snap = gcl.PolicySnapshot(snapshot_id=snapshot_counter, spec=net.spec, theta=net.theta.copy())
                builder = EpisodeBuilder(episode_id=episodes)
                ep_states, ep_actions = [], []
                true_return = learned_return = 0.0
                state = toy_envs.env_reset(spec, env_rng)

            if since_reward_update >= reward_every and len(background) > 0:
                stats = gcl.reward_update(
                    reward_net, demos, controller, background, reward_adam, gcl_rng, m1, m2
                )
                rw_metrics.emit(
                    {
                        "update_index": reward_updates,
                        "demo_return_mean": stats.demo_return_mean,
                        "bg_return_mean": stats.bg_return_mean,
                        "objective_estimate": stats.objective,
                    }
                )
                reward_updates += 1
                since_reward_update = 0

            if len(memory) >= rcfg.min_start:
                stats = refer.policy_update(net, memory, rcfg, adam, upd_rng, reward_net=reward_net)
                refer.adapt_beta(rcfg, stats.far_fraction)
                if step % metrics_every == 0:
                    metrics.emit(
                        {
                            "step": step,
                            "mean_return": float(np.mean(recent_true)) if recent_true else 0.0,
                            "far_fraction": stats.far_fraction,
                            "beta": rcfg.beta,
                            "mean_kl": stats.mean_kl,
                            "value_loss": stats.value_loss,
                        }
                    )
            if step % ckpt_every == 0:
                save_policy(out / "policy.ckpt", net, {"step": step})
                save_reward(out / "reward.ckpt", reward_net, {"step": step})

    save_policy(out / "policy.ckpt", net, {"step": total_steps})
    save_reward(out / "reward.ckpt", reward_net, {"step": total_steps})
    return {
        "episodes": episodes,
        "reward_updates": reward_updates,
        "mean_true_return_last100": float(np.mean(recent_true)) if recent_true else float("nan"),
        "policy_checkpoint": str(out / "policy.ckpt"),
        "reward_checkpoint": str(out / "reward.ckpt"),
    }


def _irl_swarm(cfg, out: Path, seed: int, demos) -> dict:
    scfg = config_mod.swarm_config(cfg, seed)
    n = scfg.n_agents
    net_rng, rnet_rng, env_rng, act_rng, upd_rng, gcl_rng = _streams(seed, 6)

    net = _policy_net(cfg, scfg.obs_dim, 2, net_rng)
    reward_net = _reward_net(cfg, scfg.obs_dim, 2, rnet_rng)
    controller = gcl.fit_demo_controller(demos)
    rcfg = _refer_config(cfg)
    adam = nn.AdamState.for_params(net.theta, lr=cfg["policy_net"]["learning_rate"])
    reward_adam = nn.AdamState.for_params(reward_net.theta, lr=cfg["reward_net"]["learning_rate"])
    memory = ReplayMemory(cfg["refer"]["replay_capacity"])
    background = gcl.BackgroundBatch(cfg["gcl"]["background_capacity"])

    total_steps = cfg["training"]["total_steps"]  # counted in agent experiences
    metrics_every = cfg["training"]["metrics_every"]
    ckpt_every = cfg["training"]["checkpoint_every"]
    reward_every = cfg["gcl"]["experiences_per_reward_update"]
    m1, m2 = cfg["gcl"]["demo_minibatch"], cfg["gcl"]["background_minibatch"]

    recent_rotation = collections.deque(maxlen=100)
    reward_updates = 0
    since_reward_update = 0
    snapshot_counter = 0
    episodes = 0
    experience = 0

    state = swarm.init_state(scfg, env_rng)
    builders = [EpisodeBuilder(agent_id=i, episode_id=0) for i in range(n)]
    obs_hist = []
    act_hist = []
    snap = gcl.PolicySnapshot(snapshot_id=snapshot_counter, spec=net.spec, theta=net.theta.copy())
    rot_total = 0.0
    pol_total = 0.0

    with trajio.MetricsWriter(out / "training.csv", TRAIN_COLUMNS) as metrics, trajio.MetricsWriter(
        out / "reward_updates.csv", REWARD_COLUMNS
    ) as rw_metrics, trajio.MetricsWriter(out / "episodes.csv", SWARM_EPISODE_COLUMNS) as ep_metrics:
        while experience < total_steps:
            obs = swarm.observe_all(state, scfg)
            actions, logprobs, means, stds, _ = refer.act_batch(net, obs, act_rng)
            rewards = reward_net.rewards(obs, actions)
            phys = np.clip(actions, -1.0, 1.0) * scfg.max_turn
            state = swarm.policy_step(state, phys, scfg)
            rot, pol = swarm.order_parameters(state)
            rot_total += rot
            pol_total += pol
            for i in range(n):
                builders[i].add(obs[i], actions[i], logprobs[i], means[i], stds[i], rewards[i])
            obs_hist.append(obs)
            act_hist.append(actions)
            experience += n
            since_reward_update += n

            if len(builders[0]) >= scfg.n_steps:
                final_obs = swarm.observe_all(state, scfg)
                obs_arr = np.stack(obs_hist)  # (T, n, obs_dim)
                act_arr = np.stack(act_hist)
                learned_returns = []
                for i in range(n):
                    ep = builders[i].build(final_obs[i], terminal=False)
                    learned_returns.append(float(ep.rewards.sum()))
                    refer.close_episode(memory, ep, net, rcfg)
                    tau = Trajectory(
                        states=obs_arr[:, i],
                        actions=act_arr[:, i],
                        agent_id=i,
                        episode_id=episodes,
                        source="background",
                        snapshot_id=snap.snapshot_id,
                    )
                    background.add(tau, snap)
                rotation_avg = rot_total / scfg.n_steps
                recent_rotation.append(rotation_avg)
                ep_metrics.emit(
                    {
                        "episode": episodes,
                        "step": experience,
                        "rotation_avg": rotation_avg,
                        "polarization_avg": pol_total / scfg.n_steps,
                        "learned_return_mean": float(np.mean(learned_returns)),
                    }
                )
                episodes += 1
                snapshot_counter += 1
                snap = gcl.PolicySnapshot(snapshot_id=snapshot_counter, spec=net.spec, theta=net.theta.copy())
                builders = [EpisodeBuilder(agent_id=i, episode_id=episodes) for i in range(n)]
                obs_hist, act_hist = [], []
                rot_total = pol_total = 0.0
                state = swarm.init_state(scfg, env_rng)

            if since_reward_update >= reward_every and len(background) > 0:
                stats = gcl.reward_update(
                    reward_net, demos, controller, background, reward_adam, gcl_rng, m1, m2
                )
                rw_metrics.emit(
                    {
                        "update_index": reward_updates,
                        "demo_return_mean": stats.demo_return_mean,
                        "bg_return_mean": stats.bg_return_mean,
                        "objective_estimate": stats.objective,
                    }
                )
                reward_updates += 1
                since_reward_update -= reward_every

            if len(memory) >= rcfg.min_start:
                for _ in range(n):
                    stats = refer.policy_update(net, memory, rcfg, adam, upd_rng, reward_net=reward_net)
                    refer.adapt_beta(rcfg, stats.far_fraction)
                if (experience // n) % metrics_every == 0:
                    metrics.emit(
                        {
                            "step": experience,
                            "mean_return": float(np.mean(recent_rotation)) if recent_rotation else 0.0,
                            "far_fraction": stats.far_fraction,
                            "beta": rcfg.beta,
                            "mean_kl": stats.mean_kl,
                            "value_loss": stats.value_loss,
                        }
                    )
            if (experience // n) % ckpt_every == 0:
                save_policy(out / "policy.ckpt", net, {"experience": experience})
                save_reward(out / "reward.ckpt", reward_net, {"experience": experience})

    save_policy(out / "policy.ckpt", net, {"experience": experience})
    save_reward(out / "reward.ckpt", reward_net, {"experience": experience})
    return {
        "episodes": episodes,
        "reward_updates": reward_updates,
        "rotation_last_episodes": [float(r) for r in recent_rotation],
        "policy_checkpoint": str(out / "policy.ckpt"),
        "reward_checkpoint": str(out / "reward.ckpt"),
    }


def train_irl(cfg, out_dir, seed: int, demos) -> dict:
    """Inverse loop: recover reward and policy from demonstrations."""
    out = Path(out_dir)
    kind = cfg["environment"]["kind"]
    if kind in TOY_KINDS:
        return _irl_toy(cfg, out, seed, demos)
    return _irl_swarm(cfg, out, seed, demos)


def evaluate_toy(cfg, checkpoint_path, n_episodes: int, seed: int):
    """Per-episode true returns of a policy checkpoint; rows + summary."""
    spec = config_mod.toy_spec(cfg)
    net = load_policy(checkpoint_path)
    env_rng, act_rng = _streams(seed, 2)
    rows = []
    for k in range(n_episodes):
        state = toy_envs.env_reset(spec, env_rng)
        total = 0.0
        for _ in range(spec.horizon):
            action, _ = refer.act(net, state, act_rng)
            state, r = toy_envs.env_step(spec, state, action)
            total += r
        rows.append({"episode": k, "true_return": total})
    returns = np.array([r["true_return"] for r in rows])
    summary = {"mean_return": float(returns.mean()), "median_return": float(np.median(returns))}
    if spec.kind == "point_mass_2d":
        oracle, zero = toy_envs.baseline_returns(spec, n_episodes=50, seed=seed + 1)
        summary["oracle_return"] = oracle
        summary["zero_policy_return"] = zero
        summary["normalized_score"] = toy_envs.normalized_score(float(returns.mean()), oracle, zero)
    return rows, summary


def rollout_swarm_policy(scfg, net, rng, record_states: bool = False):
    """One policy-driven swarm episode; returns order-parameter traces."""
    state = swarm.init_state(scfg, rng)
    rot = np.empty(scfg.n_steps)
    pol = np.empty(scfg.n_steps)
    states = [] if record_states else None
    for t in range(scfg.n_steps):
        obs = swarm.observe_all(state, scfg)
        actions, _, _, _, _ = refer.act_batch(net, obs, rng)
        state = swarm.policy_step(state, np.clip(actions, -1, 1) * scfg.max_turn, scfg)
        rot[t], pol[t] = swarm.order_parameters(state)
        if record_states:
            states.append(state.copy())
    return rot, pol, states


def evaluate_swarm(cfg, checkpoint_path, n_episodes: int, seed: int):
    """Time-averaged order parameters of policy rollouts."""
    scfg = config_mod.swarm_config(cfg, seed)
    net = load_policy(checkpoint_path)
    rngs = _streams(seed, n_episodes)
    rows = []
    for k in range(n_episodes):
        rot, pol, _ = rollout_swarm_policy(scfg, net, rngs[k])
        rows.append({"episode": k, "rotation_avg": float(rot.mean()), "polarization_avg": float(pol.mean())})
    rot_avgs = np.array([r["rotation_avg"] for r in rows])
    pol_avgs = np.array([r["polarization_avg"] for r in rows])
    summary = {
        "median_rotation": float(np.median(rot_avgs)),
        "mean_rotation": float(rot_avgs.mean()),
        "mean_polarization": float(pol_avgs.mean()),
    }
    return rows, summary
