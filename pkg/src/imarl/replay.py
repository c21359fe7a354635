"""Episode-grouped experience replay with oldest-episode-first eviction.

Experiences are stored as per-episode arrays (states, actions, behavior
statistics, rewards, value estimates, likelihood ratios and return
targets) so minibatch gathers and lazy target refreshes stay cheap. The
behavior Gaussian's mean/std are kept alongside the log-likelihood: the
divergence penalty of the learner needs the full collection-time
distribution, not just the density at the sampled action.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Episode:
    """One agent's completed episode, ready for replay."""

    states: np.ndarray  # (T, state_dim)
    actions: np.ndarray  # (T, action_dim)
    behavior_logprob: np.ndarray  # (T,)
    behavior_mean: np.ndarray  # (T, action_dim)
    behavior_std: np.ndarray  # (T, action_dim)
    rewards: np.ndarray  # (T,) relabelable
    final_state: np.ndarray  # (state_dim,)
    terminal: bool  # true termination vs time-limit truncation
    agent_id: int = 0
    episode_id: int = 0
    values: np.ndarray | None = None  # (T,) V(s_t), refreshed lazily
    rho: np.ndarray | None = None  # (T,) current/behavior ratios
    qret: np.ndarray | None = None  # (T,) return targets
    bootstrap_value: float = 0.0  # V(s_T), 0 for true terminations

    def __post_init__(self):
        t = len(self.states)
        if t == 0:
            raise ValueError("episode must contain at least one step")
        for name in ("actions", "behavior_logprob", "behavior_mean", "behavior_std", "rewards"):
            if len(getattr(self, name)) != t:
                raise ValueError(f"{name} length mismatch")

    def __len__(self) -> int:
        return len(self.states)


class EpisodeBuilder:
    """Accumulates one agent's steps until the episode closes."""

    def __init__(self, agent_id: int = 0, episode_id: int = 0):
        self.agent_id = agent_id
        self.episode_id = episode_id
        self._states = []
        self._actions = []
        self._logprobs = []
        self._means = []
        self._stds = []
        self._rewards = []

    def add(self, state, action, logprob, mean, std, reward):
        self._states.append(np.asarray(state, dtype=np.float64))
        self._actions.append(np.asarray(action, dtype=np.float64))
        self._logprobs.append(float(logprob))
        self._means.append(np.asarray(mean, dtype=np.float64))
        self._stds.append(np.asarray(std, dtype=np.float64))
        self._rewards.append(float(reward))

    def __len__(self):
        return len(self._states)

    def scale_rewards(self, factor: float):
        self._rewards = [r * factor for r in self._rewards]

    def build(self, final_state, terminal: bool) -> Episode:
        return Episode(
            states=np.stack(self._states),
            actions=np.stack(self._actions),
            behavior_logprob=np.array(self._logprobs),
            behavior_mean=np.stack(self._means),
            behavior_std=np.stack(self._stds),
            rewards=np.array(self._rewards),
            final_state=np.asarray(final_state, dtype=np.float64),
            terminal=terminal,
            agent_id=self.agent_id,
            episode_id=self.episode_id,
        )


class ReplayMemory:
    """Ring of episodes bounded by a total experience count."""

    def __init__(self, capacity: int = 262144):
        self.capacity = capacity
        self.episodes: list[Episode] = []
        self._lengths: list[int] = []
        self.total = 0

    def append(self, episode: Episode):
        self.episodes.append(episode)
        self._lengths.append(len(episode))
        self.total += len(episode)
        while self.total > self.capacity and len(self.episodes) > 1:
            dropped = self.episodes.pop(0)
            self._lengths.pop(0)
            self.total -= len(dropped)
        if self.total > self.capacity:
            # single oversized episode: keep it (capacity is a soft bound then)
            pass

    def __len__(self) -> int:
        return self.total

    def sample_indices(self, rng: np.random.Generator, batch: int):
        """Uniform (episode_index, step_index) pairs over stored experiences."""
        if self.total == 0:
            raise ValueError("empty replay memory")
        flat = rng.integers(self.total, size=batch)
        bounds = np.cumsum(self._lengths)
        ep_idx = np.searchsorted(bounds, flat, side="right")
        starts = bounds - np.asarray(self._lengths)
        t_idx = flat - starts[ep_idx]
        return ep_idx, t_idx
