"""Trajectory container shared by demonstrations, background batches and files."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

SOURCES = ("demonstration", "background")

_uid_counter = itertools.count()


@dataclass
class Trajectory:
    """Ordered (state, action) sequence of one agent over one episode."""

    states: np.ndarray  # (T, state_dim)
    actions: np.ndarray  # (T, action_dim)
    agent_id: int = 0
    episode_id: int = 0
    source: str = "demonstration"
    snapshot_id: int | None = None
    rewards: np.ndarray | None = None
    # process-unique handle for density caching; not persisted
    uid: int = field(default_factory=lambda: next(_uid_counter), compare=False)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        if len(self.states) == 0:
            raise ValueError("trajectory must be non-empty")
        if len(self.states) != len(self.actions):
            raise ValueError("states and actions must have equal length")
        if self.source not in SOURCES:
            raise ValueError(f"unknown trajectory source {self.source!r}")
        if self.rewards is not None:
            self.rewards = np.asarray(self.rewards, dtype=np.float64)
            if self.rewards.shape != (len(self.states),):
                raise ValueError("rewards must be one scalar per step")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]
