"""Guided cost learning: max-entropy reward recovery from demonstrations.

The reward network maps concatenated (state, action) to a bounded scalar
in (-0.5, 0.5). Its objective prefers high returns on demonstrations while
a partition term, estimated by importance-weighted Monte Carlo over pooled
demonstration and background trajectories, pushes returns down elsewhere.
Sampler densities mix by inverse-linear pooling; every partition-related
quantity is handled in log space because trajectory returns reach hundreds
of reward units.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .trajectory import Trajectory

_uid_counter = itertools.count()


def _next_uid() -> int:
    return next(_uid_counter)


@dataclass
class RewardNet:
    """Bounded reward r(s, a) in (-0.5, 0.5) over concatenated inputs."""

    spec: nn.MlpSpec
    theta: np.ndarray
    obs_dim: int
    act_dim: int

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, width: int = 64, hidden_layers: int = 2, rng=None):
        spec = nn.MlpSpec(
            input_dim=obs_dim + act_dim,
            hidden_widths=(width,) * hidden_layers,
            output_dim=1,
            output_transform="shifted_sigmoid",
        )
        rng = rng if rng is not None else np.random.default_rng()
        return cls(spec=spec, theta=nn.init_params(spec, rng), obs_dim=obs_dim, act_dim=act_dim)

    def rewards(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        x = np.concatenate([states, actions], axis=1)
        out, _ = nn.forward_cached(self.spec, self.theta, x)
        return out[:, 0]


def trajectory_return(reward_net: RewardNet, tau: Trajectory) -> float:
    """Sum of per-step rewards; bounded inside (-T/2, T/2) by construction."""
    return float(np.sum(reward_net.rewards(tau.states, tau.actions)))


@dataclass
class LinearGaussianController:
    """Linear policy a = W s + b with diagonal Gaussian noise."""

    W: np.ndarray  # (action_dim, state_dim)
    b: np.ndarray  # (action_dim,)
    sigma: np.ndarray  # (action_dim,), floored at 1e-6
    density_uid: int = field(default_factory=_next_uid)

    def __post_init__(self):
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=np.float64), 1e-6)

    def mean_actions(self, states: np.ndarray) -> np.ndarray:
        return np.atleast_2d(states) @ self.W.T + self.b

    def trajectory_logprob(self, tau: Trajectory) -> float:
        mean = self.mean_actions(tau.states)
        z = (tau.actions - mean) / self.sigma
        return float(np.sum(-0.5 * z * z - np.log(self.sigma) - 0.5 * np.log(2.0 * np.pi)))


@dataclass
class PolicySnapshot:
    """Frozen policy-network parameters attached to background trajectories."""

    snapshot_id: int
    spec: nn.MlpSpec
    theta: np.ndarray
    density_uid: int = field(default_factory=_next_uid)

    def trajectory_logprob(self, tau: Trajectory) -> float:
        out, _ = nn.forward_cached(self.spec, self.theta, tau.states)
        d = self.spec.action_dim
        mean, std = out[:, 1 : 1 + d], out[:, 1 + d :]
        z = (tau.actions - mean) / std
        return float(np.sum(-0.5 * z * z - np.log(std) - 0.5 * np.log(2.0 * np.pi)))


def trajectory_logprob(policy, tau: Trajectory) -> float:
    """Log-density of tau's actions under a controller, snapshot, or any
    object exposing trajectory_logprob.

    Initial-state and dynamics factors are omitted: the simulators are
    deterministic, so those factors coincide for every policy evaluated on
    the same trajectory and cancel wherever densities are compared.
    """
    return policy.trajectory_logprob(tau)


def fit_demo_controller(demos, ridge: float = 1e-6) -> LinearGaussianController:
    """Least-squares linear-Gaussian fit over all demonstration steps."""
    states = np.vstack([tau.states for tau in demos])
    actions = np.vstack([tau.actions for tau in demos])
    n, ds = states.shape
    if n < ds + 1:
        raise ValueError(f"need at least state_dim+1={ds + 1} steps to fit the controller, got {n}")
    x = np.concatenate([states, np.ones((n, 1))], axis=1)
    gram = x.T @ x + ridge * np.eye(ds + 1)
    w_aug = np.linalg.solve(gram, x.T @ actions)  # (ds+1, da)
    mean = x @ w_aug
    resid = actions - mean
    sigma = np.sqrt(np.mean(resid**2, axis=0))
    return LinearGaussianController(W=w_aug[:-1].T.copy(), b=w_aug[-1].copy(), sigma=sigma)


class LogprobCache:
    """Memo for (policy, trajectory) log-densities; both ids are permanent."""

    def __init__(self):
        self._store = {}

    def get(self, policy, tau: Trajectory) -> float:
        key = (policy.density_uid, tau.uid)
        val = self._store.get(key)
        if val is None:
            val = trajectory_logprob(policy, tau)
            self._store[key] = val
        return val

    def drop_trajectory(self, tau: Trajectory):
        self._store = {k: v for k, v in self._store.items() if k[1] != tau.uid}

    def __len__(self):
        return len(self._store)


def importance_log_weights(trajectories, policies, cache: LogprobCache | None = None) -> np.ndarray:
    """log omega_m for inverse-linear pooling over the samples' policies.

    `policies[m]` is the policy that generated `trajectories[m]`; the
    pooled mixture density of sample m is the count-weighted average of
    the distinct policies' densities, matching multiplicities.
    """
    m_total = len(trajectories)
    if m_total == 0:
        raise ValueError("empty trajectory batch")
    if len(policies) != m_total:
        raise ValueError("one generating policy per trajectory required")
    distinct = {}
    for p in policies:
        entry = distinct.setdefault(id(p), [p, 0])
        entry[1] += 1
    plist = [v[0] for v in distinct.values()]
    counts = np.array([v[1] for v in distinct.values()], dtype=float)

    logp = np.empty((len(plist), m_total))
    for d, pol in enumerate(plist):
        for m, tau in enumerate(trajectories):
            logp[d, m] = cache.get(pol, tau) if cache is not None else trajectory_logprob(pol, tau)

    # log((1/M) sum_d count_d p_d(tau_m)) via stabilized log-sum-exp
    shifted = logp + np.log(counts)[:, None]
    peak = shifted.max(axis=0)
    log_denom = peak + np.log(np.sum(np.exp(shifted - peak), axis=0)) - np.log(m_total)
    return -log_denom


def importance_weights(trajectories, policies, cache: LogprobCache | None = None) -> np.ndarray:
    """Linear-space pooled weights (finite for short trajectories)."""
    return np.exp(importance_log_weights(trajectories, policies, cache))


@dataclass
class ObjectiveParts:
    demo_return_sum: float
    log_partition: float  # log((1/M) sum_m omega_m e^{R_m})
    demo_count: int
    objective: float


def reward_objective_parts(
    reward_net: RewardNet, demo_minibatch, bg_minibatch, log_weights: np.ndarray
) -> ObjectiveParts:
    """Monte-Carlo max-entropy objective over a pooled minibatch.

    objective = sum_demo R - K * log((1/M) sum_m omega_m e^{R_m}) with
    K = len(demo_minibatch); the unknown trajectory-space volume shifts
    the objective by a constant and is dropped.
    """
    demos = list(demo_minibatch)
    bgs = list(bg_minibatch)
    if not demos or not bgs:
        raise ValueError("demo and background minibatches must be non-empty")
    pooled = demos + bgs
    if len(log_weights) != len(pooled):
        raise ValueError("one log-weight per pooled trajectory required")
    returns = np.array([trajectory_return(reward_net, tau) for tau in pooled])
    k = len(demos)
    demo_sum = float(np.sum(returns[:k]))
    s = log_weights + returns
    peak = s.max()
    log_partition = float(peak + np.log(np.sum(np.exp(s - peak))) - np.log(len(pooled)))
    return ObjectiveParts(demo_sum, log_partition, k, demo_sum - k * log_partition)


def reward_objective(reward_net: RewardNet, demo_minibatch, bg_minibatch, log_weights: np.ndarray) -> float:
    return reward_objective_parts(reward_net, demo_minibatch, bg_minibatch, log_weights).objective


@dataclass
class RewardUpdateStats:
    demo_return_mean: float
    bg_return_mean: float
    objective: float


def reward_gradient(reward_net: RewardNet, demo_minibatch, bg_minibatch, log_weights: np.ndarray):
    """Ascent gradient of the minibatch objective w.r.t. reward parameters.

    Demonstration samples carry coefficient (1 - K * w_m) on their return
    gradients, background samples carry -K * w_m, where w is the softmax
    of (log omega + R) over the pooled minibatch: the partition estimate
    normalizes itself, so the unknown trajectory-space volume cancels.
    """
    demos = list(demo_minibatch)
    bgs = list(bg_minibatch)
    if not demos or not bgs:
        raise ValueError("demo and background minibatches must be non-empty")
    pooled = demos + bgs
    k = len(demos)

    rows = np.vstack([np.concatenate([tau.states, tau.actions], axis=1) for tau in pooled])
    seg = np.repeat(np.arange(len(pooled)), [len(tau) for tau in pooled])
    out, cache = nn.forward_cached(reward_net.spec, reward_net.theta, rows)
    returns = np.bincount(seg, weights=out[:, 0], minlength=len(pooled))

    s = log_weights + returns
    s = s - s.max()
    wtil = np.exp(s)
    wtil /= wtil.sum()

    coeff = np.empty(len(pooled))
    coeff[:k] = 1.0 - k * wtil[:k]
    coeff[k:] = -k * wtil[k:]

    cot = coeff[seg][:, None]
    grad, _ = nn.backward_cached(reward_net.spec, reward_net.theta, cache, cot)

    peak_lp = (log_weights + returns).max()
    log_partition = float(
        peak_lp + np.log(np.sum(np.exp(log_weights + returns - peak_lp))) - np.log(len(pooled))
    )
    stats = RewardUpdateStats(
        demo_return_mean=float(np.mean(returns[:k])),
        bg_return_mean=float(np.mean(returns[k:])),
        objective=float(np.sum(returns[:k]) - k * log_partition),
    )
    return grad, stats


class BackgroundBatch:
    """Bounded FIFO of forward-RL trajectories with their policy snapshots."""

    def __init__(self, capacity: int = 512):
        self.capacity = capacity
        self.trajectories: list[Trajectory] = []
        self._snapshots: dict[int, PolicySnapshot] = {}
        self.cache = LogprobCache()

    def __len__(self):
        return len(self.trajectories)

    def add(self, tau: Trajectory, snapshot: PolicySnapshot):
        if tau.snapshot_id != snapshot.snapshot_id:
            raise ValueError("trajectory snapshot_id does not match the snapshot")
        self._snapshots[snapshot.snapshot_id] = snapshot
        self.trajectories.append(tau)
        while len(self.trajectories) > self.capacity:
            dropped = self.trajectories.pop(0)
            self.cache.drop_trajectory(dropped)
        live = {t.snapshot_id for t in self.trajectories}
        self._snapshots = {sid: snap for sid, snap in self._snapshots.items() if sid in live}

    def snapshot_for(self, tau: Trajectory) -> PolicySnapshot:
        return self._snapshots[tau.snapshot_id]


def reward_update(
    reward_net: RewardNet,
    demos,
    demo_controller: LinearGaussianController,
    background: BackgroundBatch,
    adam: nn.AdamState,
    rng: np.random.Generator,
    demo_minibatch: int = 16,
    bg_minibatch: int = 16,
) -> RewardUpdateStats:
    """One ascent step on the reward objective from sampled minibatches.

    Demonstrations are drawn uniformly (with replacement when the demo set
    is smaller than the minibatch); background trajectories likewise from
    the FIFO batch. Per-agent demonstration trajectories simply appear as
    separate draws, so multiple agents are processed one after another.
    """
    if len(background) == 0:
        raise ValueError("background batch is empty; collect forward-RL episodes first")
    demo_idx = rng.choice(len(demos), size=demo_minibatch, replace=len(demos) < demo_minibatch)
    bg_idx = rng.choice(len(background), size=bg_minibatch, replace=len(background) < bg_minibatch)
    demo_batch = [demos[i] for i in demo_idx]
    bg_batch = [background.trajectories[i] for i in bg_idx]

    policies = [demo_controller] * len(demo_batch) + [background.snapshot_for(t) for t in bg_batch]
    logw = importance_log_weights(demo_batch + bg_batch, policies, background.cache)
    grad, stats = reward_gradient(reward_net, demo_batch, bg_batch, logw)
    nn.adam_step(adam, reward_net.theta, grad, ascent=True)
    return stats


def reward_sensitivity(reward_net: RewardNet, state, config, dphi_grid=None):
    """Per-agent reward curves under individual heading rotations about z.

    Each agent's heading is rotated by dphi (others untouched), its
    observation rebuilt, and the reward evaluated at zero action. Returns
    (dphi_grid, per_agent (n_grid, n_agents), mean, std).
    """
    from . import swarm as swarm_mod

    if dphi_grid is None:
        dphi_grid = np.linspace(-np.pi, np.pi, 73)
    dphi_grid = np.asarray(dphi_grid, dtype=float)
    n = state.n_agents
    zero_action = np.zeros((1, reward_net.act_dim))
    per_agent = np.empty((len(dphi_grid), n))
    for g, dphi in enumerate(dphi_grid):
        for i in range(n):
            perturbed = state.copy()
            perturbed.headings[i] = swarm_mod.apply_turn(state.headings[i], float(dphi), 0.0)
            obs = swarm_mod.observe(perturbed, i, config)
            per_agent[g, i] = reward_net.rewards(obs[None, :], zero_action)[0]
    return dphi_grid, per_agent, per_agent.mean(axis=1), per_agent.std(axis=1)
