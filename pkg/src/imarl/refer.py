"""Off-policy actor-critic with remember-and-forget experience replay.

A single network outputs the state value and a diagonal Gaussian policy.
Replay samples whose current/behavior likelihood ratio leaves the trust
band [1/c_max, c_max] have their task gradients masked; every sample
contributes a divergence penalty pulling the policy toward the behavior
distribution, mixed as (1-beta) * task + beta * penalty. The penalty
weight beta floats to keep the far-policy fraction near its target.

Return targets are truncated importance-weighted backups stored per
experience and refreshed lazily whenever a step is sampled, using the
stored statistics of its successor step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .replay import Episode, ReplayMemory

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ReFERConfig:
    c_max: float = 4.0
    target_far_fraction: float = 0.1
    beta: float = 0.3
    beta_rate: float = 1e-4
    gamma: float = 0.99
    minibatch: int = 128
    min_start: int = 4096

    def __post_init__(self):
        if self.c_max <= 1.0:
            raise ValueError("c_max must exceed 1")
        if not (0.0 < self.target_far_fraction < 1.0):
            raise ValueError("target_far_fraction must lie in (0, 1)")
        if not (0.0 < self.beta <= 1.0):
            raise ValueError("beta must lie in (0, 1]")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")


@dataclass
class PolicyValueNet:
    """Shared value/policy network: outputs (V, mean, std) per state.

    The state value is value_scale times the raw head output. Returns span
    roughly 1/(1-gamma) reward units, so scaling the head keeps the shared
    trunk at unit magnitudes instead of inflating it (which would drag the
    Gaussian head along and blow up the exploration noise).
    """

    spec: nn.MlpSpec
    theta: np.ndarray
    value_scale: float = 1.0

    @classmethod
    def create(
        cls,
        state_dim: int,
        action_dim: int,
        width: int = 128,
        hidden_layers: int = 2,
        rng=None,
        value_scale: float = 1.0,
    ):
        spec = nn.MlpSpec(
            input_dim=state_dim,
            hidden_widths=(width,) * hidden_layers,
            output_dim=1 + 2 * action_dim,
            output_transform="gaussian_head",
        )
        rng = rng if rng is not None else np.random.default_rng()
        return cls(spec=spec, theta=nn.init_params(spec, rng), value_scale=value_scale)

    @property
    def action_dim(self) -> int:
        return self.spec.action_dim

    def outputs(self, states: np.ndarray):
        """(value, mean, std) arrays for a batch of states."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        out, _ = nn.forward_cached(self.spec, self.theta, states)
        d = self.action_dim
        return out[:, 0] * self.value_scale, out[:, 1 : 1 + d], out[:, 1 + d :]


def gaussian_logpdf(actions: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    z = (actions - mean) / std
    return np.sum(-0.5 * z * z - np.log(std) - 0.5 * _LOG_2PI, axis=-1)


def gaussian_kl(mean_b, std_b, mean_c, std_c) -> np.ndarray:
    """KL(behavior || current) for diagonal Gaussians, per batch row."""
    var_ratio = (std_b / std_c) ** 2
    mean_term = ((mean_b - mean_c) / std_c) ** 2
    return 0.5 * np.sum(var_ratio + mean_term - 1.0 - np.log(var_ratio), axis=-1)


def act_full(net: PolicyValueNet, state: np.ndarray, rng: np.random.Generator):
    """Sample one action; returns (action, logprob, mean, std, value).

    The action is the raw Gaussian sample: any clipping to the control
    bounds belongs to the environment, and the stored likelihood is the
    pre-clip density of the stored action.
    """
    v, mean, std = net.outputs(state)
    action = mean[0] + std[0] * rng.normal(size=net.action_dim)
    logprob = float(gaussian_logpdf(action, mean[0], std[0]))
    return action, logprob, mean[0], std[0], float(v[0])


def act(net: PolicyValueNet, state: np.ndarray, rng: np.random.Generator):
    action, logprob, _, _, _ = act_full(net, state, rng)
    return action, logprob


def act_batch(net: PolicyValueNet, states: np.ndarray, rng: np.random.Generator):
    """Vectorized act_full over rows; returns (actions, logprobs, means, stds, values)."""
    v, mean, std = net.outputs(states)
    actions = mean + std * rng.normal(size=mean.shape)
    logprobs = gaussian_logpdf(actions, mean, std)
    return actions, logprobs, mean, std, v


def close_episode(memory: ReplayMemory, episode: Episode, net: PolicyValueNet, config: ReFERConfig):
    """Compute return targets for a finished episode and store it.

    Backward recursion with the truncated likelihood ratio of the
    successor step (the correction applies to the continuation, whose
    first action is the one at t+1):
    q_t = r_t + gamma * (min(1, rho_{t+1}) * (q_{t+1} - V(s_{t+1})) + V(s_{t+1})),
    bootstrapping q_T = V(s_T) (zero for true terminations).
    """
    t_len = len(episode)
    all_states = np.vstack([episode.states, episode.final_state[None, :]])
    v_all, mean, std = net.outputs(all_states)
    values = v_all[:t_len]
    bootstrap = 0.0 if episode.terminal else float(v_all[t_len])

    logp_now = gaussian_logpdf(episode.actions, mean[:t_len], std[:t_len])
    rho = np.exp(np.clip(logp_now - episode.behavior_logprob, -60.0, 60.0))

    qret = np.empty(t_len)
    q_next = bootstrap
    v_next = bootstrap
    rho_next = 1.0
    gamma = config.gamma
    for t in range(t_len - 1, -1, -1):
        qret[t] = episode.rewards[t] + gamma * (min(1.0, rho_next) * (q_next - v_next) + v_next)
        q_next = qret[t]
        v_next = values[t]
        rho_next = rho[t]

    episode.values = values.copy()
    episode.rho = rho
    episode.qret = qret
    episode.bootstrap_value = bootstrap
    memory.append(episode)


def relabel_minibatch(memory: ReplayMemory, ep_idx: np.ndarray, t_idx: np.ndarray, reward_net) -> np.ndarray:
    """Replace sampled experiences' stored rewards with the current learned reward."""
    states = np.stack([memory.episodes[e].states[t] for e, t in zip(ep_idx, t_idx)])
    actions = np.stack([memory.episodes[e].actions[t] for e, t in zip(ep_idx, t_idx)])
    rewards = reward_net.rewards(states, actions)
    for b, (e, t) in enumerate(zip(ep_idx, t_idx)):
        memory.episodes[e].rewards[t] = rewards[b]
    return rewards


@dataclass
class UpdateStats:
    far_fraction: float
    mean_kl: float
    value_loss: float
    mean_rho: float


def policy_update(
    net: PolicyValueNet,
    memory: ReplayMemory,
    config: ReFERConfig,
    adam: nn.AdamState,
    rng: np.random.Generator,
    reward_net=None,
) -> UpdateStats:
    """One gradient step from a uniformly sampled minibatch of experiences."""
    batch = config.minibatch
    ep_idx, t_idx = memory.sample_indices(rng, batch)
    d = net.action_dim

    states = np.empty((batch, net.spec.input_dim))
    actions = np.empty((batch, d))
    blp = np.empty(batch)
    bmean = np.empty((batch, d))
    bstd = np.empty((batch, d))
    for b, (e, t) in enumerate(zip(ep_idx, t_idx)):
        ep = memory.episodes[e]
        states[b] = ep.states[t]
        actions[b] = ep.actions[t]
        blp[b] = ep.behavior_logprob[t]
        bmean[b] = ep.behavior_mean[t]
        bstd[b] = ep.behavior_std[t]

    if reward_net is not None:
        relabel_minibatch(memory, ep_idx, t_idx, reward_net)

    out, cache = nn.forward_cached(net.spec, net.theta, states)
    value = out[:, 0] * net.value_scale
    mean = out[:, 1 : 1 + d]
    std = out[:, 1 + d :]

    logp = gaussian_logpdf(actions, mean, std)
    rho = np.exp(np.clip(logp - blp, -60.0, 60.0))
    far = (rho < 1.0 / config.c_max) | (rho > config.c_max)
    near = ~far

    # refresh stored statistics for the sampled steps, then rebuild their
    # return targets from the (possibly fresher) successor statistics
    refresh_final = {}
    for b, (e, t) in enumerate(zip(ep_idx, t_idx)):
        ep = memory.episodes[e]
        ep.values[t] = value[b]
        ep.rho[t] = rho[b]
        if t == len(ep) - 1 and not ep.terminal:
            refresh_final.setdefault(e, None)
    if refresh_final:
        finals = np.stack([memory.episodes[e].final_state for e in refresh_final])
        v_fin, _, _ = net.outputs(finals)
        for e, v in zip(refresh_final, v_fin):
            memory.episodes[e].bootstrap_value = float(v)

    gamma = config.gamma
    qret = np.empty(batch)
    for b, (e, t) in enumerate(zip(ep_idx, t_idx)):
        ep = memory.episodes[e]
        if t + 1 < len(ep):
            v_next = ep.values[t + 1]
            q_next = ep.qret[t + 1]
            rho_next = min(1.0, ep.rho[t + 1])
        else:
            v_next = q_next = ep.bootstrap_value
            rho_next = 1.0
        q = ep.rewards[t] + gamma * (rho_next * (q_next - v_next) + v_next)
        ep.qret[t] = q
        qret[b] = q

    advantage = qret - value

    # task gradients (ascent direction), masked for far-policy samples.
    # the policy-gradient advantage is normalized by its batch spread:
    # early in training advantages carry the full return scale, which
    # otherwise drives the Gaussian head into a runaway.
    cot_task = np.zeros((batch, 1 + 2 * d))
    # value regression on the raw head: ascent of -(raw - q / value_scale)^2 / 2
    cot_task[near, 0] = advantage[near] / net.value_scale
    adv_spread = float(np.std(advantage[near])) if near.any() else 1.0
    pg_adv = advantage / max(adv_spread, 1e-8)
    pg_coeff = np.where(near, np.minimum(1.0, rho) * pg_adv, 0.0)[:, None]
    am = actions - mean
    var = std * std
    cot_task[:, 1 : 1 + d] = pg_coeff * am / var
    cot_task[:, 1 + d :] = pg_coeff * (am * am - var) / (var * std)

    # divergence penalty gradients (ascent direction = -dKL), all samples
    cot_kl = np.zeros_like(cot_task)
    dm = mean - bmean
    cot_kl[:, 1 : 1 + d] = -dm / var
    cot_kl[:, 1 + d :] = -(1.0 / std - (bstd * bstd + dm * dm) / (var * std))

    beta = config.beta
    cot = ((1.0 - beta) * cot_task + beta * cot_kl) / batch
    grad, _ = nn.backward_cached(net.spec, net.theta, cache, cot)
    nn.adam_step(adam, net.theta, grad, ascent=True)

    kl = gaussian_kl(bmean, bstd, mean, std)
    return UpdateStats(
        far_fraction=float(far.mean()),
        mean_kl=float(kl.mean()),
        value_loss=float(np.mean(((value - qret) / net.value_scale) ** 2)),
        mean_rho=float(rho.mean()),
    )


def adapt_beta(config: ReFERConfig, observed_far_fraction: float) -> float:
    """Anneal the penalty weight toward the far-fraction target.

    Too many far-policy samples -> strengthen the penalty (beta toward 1);
    too few -> relax it (beta decays geometrically). Clamped to [1e-4, 1].
    """
    if not (0.0 <= observed_far_fraction <= 1.0):
        raise ValueError("far fraction must lie in [0, 1]")
    rate = config.beta_rate
    if observed_far_fraction > config.target_far_fraction:
        config.beta = min(1.0, (1.0 - rate) * config.beta + rate)
    elif observed_far_fraction < config.target_far_fraction:
        config.beta = max(1e-4, (1.0 - rate) * config.beta)
    return config.beta
