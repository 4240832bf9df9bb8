"""FIFO transition store with uniform sampling (with replacement)."""
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NotReady, ShapeError

SOURCES = ("bc", "rl", "demo")
SOURCE_CODE = {name: i for i, name in enumerate(SOURCES)}
DEFAULT_CAPACITY = 2_000_000


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    terminal: bool = False
    truncated: bool = False
    source: str = "rl"

    def __post_init__(self):
        if self.terminal and self.truncated:
            raise InputError("transition cannot be both terminal and truncated")
        if self.source not in SOURCE_CODE:
            raise InputError(f"unknown transition source {self.source!r}")


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray
    truncated: np.ndarray
    source: np.ndarray   # integer codes into SOURCES

    def __len__(self):
        return self.obs.shape[0]


class ReplayBuffer:
    """Ring buffer whose backing arrays grow geometrically up to ``capacity``."""

    def __init__(self, obs_dim, action_dim, capacity=DEFAULT_CAPACITY, initial_alloc=4096):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.capacity = int(capacity)
        self._alloc = 0
        self._store = {}
        self._grow(min(self.capacity, initial_alloc))
        self.size = 0
        self._head = 0   # next write slot once full
        self.n_pushed = 0
        self.n_sample_calls = 0

    def _grow(self, n):
        shapes = {
            "obs": (self.obs_dim,), "actions": (self.action_dim,), "rewards": (),
            "next_obs": (self.obs_dim,), "terminal": (), "truncated": (), "source": (),
        }
        dtypes = {"terminal": bool, "truncated": bool, "source": np.int8}
        for key, shape in shapes.items():
            new = np.zeros((n, *shape), dtype=dtypes.get(key, np.float64))
            if self._alloc:
                new[:self._alloc] = self._store[key]
            self._store[key] = new
        self._alloc = n

    def __len__(self):
        return self.size

    def push(self, t):
        obs = np.asarray(t.obs, dtype=np.float64)
        act = np.asarray(t.action, dtype=np.float64)
        nxt = np.asarray(t.next_obs, dtype=np.float64)
        if obs.shape != (self.obs_dim,) or nxt.shape != (self.obs_dim,) or act.shape != (self.action_dim,):
            raise ShapeError(
                f"transition shapes obs {obs.shape}, action {act.shape}, next_obs {nxt.shape} "
                f"do not match buffer schema ({self.obs_dim}, {self.action_dim})")
        if self.size < self.capacity:
            if self.size == self._alloc:
                self._grow(min(self.capacity, 2 * self._alloc))
            i = self.size
            self.size += 1
        else:
            i = self._head
            self._head = (self._head + 1) % self.capacity
        st = self._store
        st["obs"][i] = obs
        st["actions"][i] = act
        st["rewards"][i] = float(t.reward)
        st["next_obs"][i] = nxt
        st["terminal"][i] = bool(t.terminal)
        st["truncated"][i] = bool(t.truncated)
        st["source"][i] = SOURCE_CODE[t.source]
        self.n_pushed += 1

    def _ordered_index(self):
        """Physical slots ordered oldest first."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self._head + np.arange(self.capacity)) % self.capacity

    def _gather(self, idx):
        st = self._store
        return Batch(*(st[k][idx].copy() for k in
                       ("obs", "actions", "rewards", "next_obs", "terminal", "truncated", "source")))

    def contents(self):
        """Every stored transition, oldest first."""
        return self._gather(self._ordered_index())

    def sample(self, k, rng):
        # draws are with replacement, so only an empty buffer is unusable here;
        # the learner applies its own batch-size readiness threshold
        if self.size == 0:
            raise NotReady("replay buffer is empty")
        self.n_sample_calls += 1
        return self._gather(rng.integers(0, self.size, size=k))

    def source_counts(self):
        codes = self._store["source"][:self.size]
        return {name: int(np.sum(codes == i)) for i, name in enumerate(SOURCES)}


def seed_from_demos(buffer, data, shaper):
    """Push every demo step with a shaped reward; terminal only on the final step of a success."""
    if len(data) == 0:
        return 0
    if (data.obs_dim, data.action_dim) != (buffer.obs_dim, buffer.action_dim):
        raise InputError(
            f"demo dimensions ({data.obs_dim}, {data.action_dim}) do not match buffer "
            f"({buffer.obs_dim}, {buffer.action_dim})")
    count = 0
    for traj in data.trajectories:
        n = len(traj)
        for t in range(n):
            last = t == n - 1
            buffer.push(Transition(traj.observations[t], traj.actions[t], shaper(traj.rewards[t]),
                                   traj.observations[t + 1], terminal=last and traj.terminated,
                                   truncated=last and traj.truncated, source="demo"))
            count += 1
    return count
