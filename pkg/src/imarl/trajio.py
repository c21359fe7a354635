"""Persistence for trajectory datasets and append-only metrics streams.

Dataset files are a single plain-text JSON header line followed by
little-endian binary records; see FORMAT.md for the byte-exact layout.
Readers refuse newer format versions and report byte positions for
truncated or inconsistent bodies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .trajectory import Trajectory

DATASET_FORMAT = "imarl-traj"
DATASET_VERSION = 1

_HEAD_DTYPE = np.dtype("<u4")


def save_dataset(trajectories, path, env_id: str = "", config_hash: str = "", seed: int = 0):
    """Write trajectories to `path`; lossless for float64 states/actions."""
    trajectories = list(trajectories)
    if trajectories:
        sd = trajectories[0].state_dim
        ad = trajectories[0].action_dim
        has_reward = trajectories[0].rewards is not None
        for tr in trajectories:
            if tr.state_dim != sd or tr.action_dim != ad:
                raise ValueError("all trajectories in a dataset must share dimensions")
            if (tr.rewards is not None) != has_reward:
                raise ValueError("either all or no trajectories carry rewards")
    else:
        sd = ad = 0
        has_reward = False

    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "env_id": env_id,
        "state_dim": sd,
        "action_dim": ad,
        "n_trajectories": len(trajectories),
        "config_hash": config_hash,
        "seed": int(seed),
        "has_reward": has_reward,
        "trajectories": [
            {
                "agent_id": int(tr.agent_id),
                "episode_id": int(tr.episode_id),
                "length": len(tr),
                "source": tr.source,
                "snapshot_id": None if tr.snapshot_id is None else int(tr.snapshot_id),
            }
            for tr in trajectories
        ],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        for tr in trajectories:
            n = len(tr)
            ids = np.empty((n, 2), dtype=_HEAD_DTYPE)
            ids[:, 0] = tr.agent_id
            ids[:, 1] = np.arange(n)
            f.write(ids.tobytes())
            f.write(np.ascontiguousarray(tr.states, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(tr.actions, dtype="<f8").tobytes())
            if has_reward:
                f.write(np.ascontiguousarray(tr.rewards, dtype="<f8").tobytes())


def load_dataset(path):
    """Read a dataset; returns (trajectories, header). Bit-exact round trip."""
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: malformed dataset header") from exc
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a trajectory dataset")
        if header.get("version", 0) > DATASET_VERSION:
            raise ValueError(f"{path}: dataset version {header['version']} too new")
        body = f.read()

    sd, ad = header["state_dim"], header["action_dim"]
    has_reward = header["has_reward"]
    per_step = 2 * 4 + 8 * (sd + ad + (1 if has_reward else 0))
    expected = sum(meta["length"] for meta in header["trajectories"]) * per_step
    if len(body) != expected:
        raise ValueError(
            f"{path}: body is {len(body)} bytes, expected {expected} "
            f"({len(header['trajectories'])} trajectories of {per_step} bytes/step)"
        )

    trajectories = []
    off = 0
    for meta in header["trajectories"]:
        n = meta["length"]
        ids = np.frombuffer(body, dtype=_HEAD_DTYPE, count=2 * n, offset=off).reshape(n, 2)
        off += 8 * n
        states = np.frombuffer(body, dtype="<f8", count=n * sd, offset=off).reshape(n, sd)
        off += 8 * n * sd
        actions = np.frombuffer(body, dtype="<f8", count=n * ad, offset=off).reshape(n, ad)
        off += 8 * n * ad
        rewards = None
        if has_reward:
            rewards = np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(np.float64)
            off += 8 * n
        if not np.all(ids[:, 0] == meta["agent_id"]):
            raise ValueError(f"{path}: agent id mismatch at byte {off}")
        trajectories.append(
            Trajectory(
                states=states.astype(np.float64),
                actions=actions.astype(np.float64),
                agent_id=meta["agent_id"],
                episode_id=meta["episode_id"],
                source=meta["source"],
                snapshot_id=meta["snapshot_id"],
                rewards=rewards,
            )
        )
    return trajectories, header


class MetricsWriter:
    """Append-only CSV stream, one flush per record, exact float round trip."""

    def __init__(self, path, columns):
        self.columns = list(columns)
        self._f = open(path, "w", buffering=1)
        self._f.write(",".join(self.columns) + "\n")
        self._f.flush()

    def emit(self, record: dict):
        missing = [c for c in self.columns if c not in record]
        if missing:
            raise ValueError(f"metrics record missing columns {missing}")
        cells = []
        for c in self.columns:
            v = record[c]
            cells.append(format(v, ".17g") if isinstance(v, float) else str(v))
        self._f.write(",".join(cells) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
