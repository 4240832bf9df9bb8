"""Trajectory containers and the demo JSONL format.

One JSON object per line::

    {"obs": [[...], ...], "actions": [[...], ...], "rewards": [...], "terminated": bool}

``obs`` holds T or T+1 rows for T actions; with T+1 rows the last is the
observation after the final action. Actions are in normalized units.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass
class Trajectory:
    observations: np.ndarray   # (T+1, obs_dim)
    actions: np.ndarray        # (T, action_dim)
    rewards: np.ndarray        # (T,)
    terminated: bool = False
    truncated: bool = False
    sources: list = field(default_factory=list)

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        t = self.actions.shape[0]
        if t == 0:
            raise InputError("empty trajectory")
        if self.rewards.shape[0] != t:
            raise InputError(f"{self.rewards.shape[0]} rewards for {t} actions")
        if self.observations.shape[0] == t:
            # no final observation recorded: repeat the last one
            self.observations = np.vstack([self.observations, self.observations[-1:]])
        if self.observations.shape[0] != t + 1:
            raise InputError(f"{self.observations.shape[0]} observations for {t} actions")
        if self.terminated and self.truncated:
            raise InputError("trajectory cannot be both terminated and truncated")

    def __len__(self):
        return self.actions.shape[0]

    @property
    def obs_dim(self):
        return self.observations.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]

    @property
    def success(self):
        return bool(self.terminated)

    def to_json(self):
        return {
            "obs": self.observations.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "terminated": bool(self.terminated),
        }

    @classmethod
    def from_json(cls, doc):
        try:
            return cls(doc["obs"], doc["actions"], doc["rewards"], bool(doc["terminated"]))
        except KeyError as exc:
            raise InputError(f"demo record missing field {exc}") from None


@dataclass
class DemoDataset:
    trajectories: list

    def __post_init__(self):
        dims = {(t.obs_dim, t.action_dim) for t in self.trajectories}
        if len(dims) > 1:
            raise InputError(f"inconsistent observation/action dimensions {sorted(dims)}")

    def __len__(self):
        return len(self.trajectories)

    @property
    def obs_dim(self):
        return self.trajectories[0].obs_dim

    @property
    def action_dim(self):
        return self.trajectories[0].action_dim

    def pairs(self):
        """Stacked (observation, action) pairs over all steps."""
        if not self.trajectories:
            raise InputError("empty dataset")
        obs = np.concatenate([t.observations[:-1] for t in self.trajectories])
        act = np.concatenate([t.actions for t in self.trajectories])
        return obs, act

    def subset(self, fraction, rng=None):
        n = int(round(fraction * len(self.trajectories)))
        if rng is None:
            return DemoDataset(self.trajectories[:n])
        idx = np.sort(rng.permutation(len(self.trajectories))[:n])
        return DemoDataset([self.trajectories[i] for i in idx])


def write_jsonl(path, trajectories):
    with open(path, "w") as f:
        for t in trajectories:
            f.write(json.dumps(t.to_json()) + "\n")


def read_jsonl(path):
    trajs = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                trajs.append(Trajectory.from_json(json.loads(line)))
            except (InputError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    return DemoDataset(trajs)
