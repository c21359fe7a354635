"""Tiny deterministic MDP whose trajectory space is fully enumerable.

Scalar state starting at 0, binary actions in {-1, +1}, transition
s' = s + 0.5 * a, horizon T: exactly 2^T trajectories. Used as the exact
oracle for the importance-weighted partition estimate and the reward
gradient: the partition function, the max-entropy trajectory distribution
and its per-step soft-optimal policy are all computable in closed form.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from imarl.gcl import _next_uid
from imarl.trajectory import Trajectory

STEP = 0.5


def rollout(action_signs) -> Trajectory:
    """Trajectory for one +/-1 action sequence."""
    states = []
    actions = []
    s = 0.0
    for a in action_signs:
        states.append([s])
        actions.append([float(a)])
        s += STEP * a
    return Trajectory(states=np.array(states), actions=np.array(actions))


def enumerate_trajectories(horizon: int):
    """All 2^horizon trajectories, in lexicographic action order."""
    return [rollout(signs) for signs in itertools.product((-1.0, 1.0), repeat=horizon)]


def state_key(s: float) -> int:
    return round(s / STEP)


@dataclass
class TreePolicy:
    """Markov policy over the binary tree: log-probs per (t, state) node."""

    horizon: int
    table: dict  # (t, state_key) -> (logp_minus, logp_plus)
    density_uid: int = field(default_factory=_next_uid)

    def logprob_step(self, t: int, s: float, a: float) -> float:
        lm, lp = self.table[(t, state_key(s))]
        return lp if a > 0 else lm

    def trajectory_logprob(self, tau: Trajectory) -> float:
        return sum(
            self.logprob_step(t, tau.states[t, 0], tau.actions[t, 0]) for t in range(len(tau))
        )

    def sample(self, rng: np.random.Generator) -> Trajectory:
        signs = []
        s = 0.0
        for t in range(self.horizon):
            lm, lp = self.table[(t, state_key(s))]
            a = 1.0 if rng.uniform() < np.exp(lp) else -1.0
            signs.append(a)
            s += STEP * a
        return rollout(signs)


def coin_policy(horizon: int, p_plus: float) -> TreePolicy:
    """State-independent policy taking +1 with probability p_plus."""
    table = {}
    for t in range(horizon):
        for k in range(-t, t + 1):
            table[(t, k)] = (np.log1p(-p_plus), np.log(p_plus))
    return TreePolicy(horizon=horizon, table=table)


def soft_optimal_policy(reward_fn, horizon: int) -> TreePolicy:
    """Markov policy whose trajectory law is the max-entropy distribution.

    Backward soft Bellman recursion over the tree:
    V_T = 0, Q_t(s, a) = r(s, a) + V_{t+1}(s + STEP a),
    V_t(s) = logsumexp_a Q_t(s, a), pi(a|s) = exp(Q - V).
    The product of pi over a trajectory equals e^{R(tau)} / Z with
    Z = sum_tau e^{R(tau)} = exp(V_0(0)).
    """
    values = {state_key(0.0) * 0: 0.0}  # placeholder; rebuilt per depth below
    v_next = {}
    for k in range(-horizon, horizon + 1):
        v_next[k] = 0.0
    table = {}
    for t in range(horizon - 1, -1, -1):
        v_here = {}
        for k in range(-t, t + 1):
            s = k * STEP
            q = {}
            for a in (-1.0, 1.0):
                r = float(reward_fn(np.array([[s]]), np.array([[a]]))[0])
                q[a] = r + v_next[state_key(s + STEP * a)]
            peak = max(q.values())
            v = peak + np.log(np.exp(q[-1.0] - peak) + np.exp(q[1.0] - peak))
            table[(t, k)] = (q[-1.0] - v, q[1.0] - v)
            v_here[k] = v
        v_next = v_here
    policy = TreePolicy(horizon=horizon, table=table)
    policy.log_partition = v_next[0]  # log Z at the root
    return policy


def exact_partition(reward_net, trajectories) -> float:
    """Z = sum over the enumerated trajectory space of e^{R(tau)}."""
    from imarl.gcl import trajectory_return

    returns = np.array([trajectory_return(reward_net, tau) for tau in trajectories])
    peak = returns.max()
    return float(np.exp(peak) * np.sum(np.exp(returns - peak)))
