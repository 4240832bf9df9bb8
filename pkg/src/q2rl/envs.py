"""Sparse-reward 2-D point-mass tasks with scripted teachers.

Actions are position deltas bounded by ``max_delta`` per axis. Agents work in
normalized units ([-1, 1] per axis); :meth:`Env.scale_action` converts.
Dynamics are deterministic; randomness only enters through ``reset``.
"""
import copy
from dataclasses import asdict, dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    kind: str = "slot_insert"
    max_delta: float = 0.05
    max_episode_len: int = 40
    init_low: tuple = (0.1, 0.05)
    init_high: tuple = (0.9, 0.3)
    fixed_init: tuple | None = None
    # point_reach
    goal: tuple = (0.5, 0.8)
    goal_eps: float = 0.05
    # slot_insert
    wall_y: float = 0.6
    wall_thickness: float = 0.15
    slot_x: float = 0.5
    slot_width: float = 0.05
    insert_depth: float = 0.08

    def __post_init__(self):
        if self.kind not in ("point_reach", "slot_insert"):
            raise ValueError(f"unknown env kind {self.kind!r}")
        if self.max_episode_len < 1 or not np.isfinite(self.max_delta) or self.max_delta <= 0:
            raise ValueError("invalid episode length or action bound")

    @property
    def obs_dim(self):
        return 4

    @property
    def action_dim(self):
        return 2

    @property
    def action_bounds(self):
        return [(-self.max_delta, self.max_delta)] * self.action_dim

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc):
        doc = {k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()}
        return cls(**doc)


@dataclass
class StepResult:
    next_obs: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    info: dict = field(default_factory=dict)


class Env:
    def __init__(self, spec):
        self.spec = spec
        self.pos = np.zeros(2)
        self.t = 0

    @property
    def obs_dim(self):
        return self.spec.obs_dim

    @property
    def action_dim(self):
        return self.spec.action_dim

    def scale_action(self, a_norm):
        return np.asarray(a_norm, dtype=np.float64) * self.spec.max_delta

    def reset(self, rng):
        s = self.spec
        if s.fixed_init is not None:
            self.pos = np.array(s.fixed_init, dtype=np.float64)
        else:
            self.pos = rng.uniform(s.init_low, s.init_high)
        self.t = 0
        return self.observe()

    def step(self, action):
        s = self.spec
        delta = np.clip(np.asarray(action, dtype=np.float64), -s.max_delta, s.max_delta)
        self.pos = self._move(self.pos, delta)
        self.t += 1
        success = self._success(self.pos)
        return StepResult(
            next_obs=self.observe(),
            reward=1.0 if success else 0.0,
            terminated=success,
            truncated=(not success) and self.t >= s.max_episode_len,
            info={"step": self.t - 1},
        )

    def _move(self, pos, delta):
        return np.clip(pos + delta, 0.0, 1.0)


class PointReach(Env):
    def observe(self):
        return np.concatenate([self.pos, np.asarray(self.spec.goal) - self.pos])

    def _success(self, pos):
        return float(np.linalg.norm(pos - np.asarray(self.spec.goal))) < self.spec.goal_eps


class SlotInsert(Env):
    """Point mass below a wall band; success means reaching ``insert_depth`` inside the slot."""

    @property
    def entry(self):
        return np.array([self.spec.slot_x, self.spec.wall_y])

    def observe(self):
        return np.concatenate([self.pos, self.entry - self.pos])

    def in_wall(self, p):
        s = self.spec
        in_band = s.wall_y <= p[1] <= s.wall_y + s.wall_thickness
        in_slot = abs(p[0] - s.slot_x) <= 0.5 * s.slot_width
        return in_band and not in_slot

    def _move(self, pos, delta):
        target = np.clip(pos + delta, 0.0, 1.0)
        if not self.in_wall(target):
            return target
        # blocked: keep whichever single-axis move stays free, else stay put
        slide_x = np.array([target[0], pos[1]])
        if not self.in_wall(slide_x):
            return slide_x
        slide_y = np.array([pos[0], target[1]])
        if not self.in_wall(slide_y):
            return slide_y
        return pos.copy()

    def _success(self, pos):
        s = self.spec
        return (abs(pos[0] - s.slot_x) <= 0.5 * s.slot_width
                and pos[1] >= s.wall_y + s.insert_depth)


def make_env(spec):
    if isinstance(spec, dict):
        spec = EnvSpec.from_dict(spec)
    return PointReach(spec) if spec.kind == "point_reach" else SlotInsert(spec)


def point_reach_spec(**overrides):
    return replace(EnvSpec(kind="point_reach", max_episode_len=60), **overrides)


def slot_insert_spec(**overrides):
    return replace(EnvSpec(kind="slot_insert", max_episode_len=40), **overrides)


def shift_variant(env, dx=0.0, width_scale=1.0):
    """Copy of a SlotInsert env with the slot translated by ``dx`` and its width scaled."""
    if not isinstance(env, SlotInsert):
        raise TypeError("shift_variant applies to SlotInsert environments")
    spec = replace(env.spec, slot_x=float(np.clip(env.spec.slot_x + dx, 0.0, 1.0)),
                   slot_width=env.spec.slot_width * width_scale)
    shifted = copy.copy(env)
    shifted.spec = spec
    shifted.pos = env.pos.copy()
    return shifted


@dataclass(frozen=True)
class TeacherNoise:
    kind: str = "gaussian"   # gaussian | uniform | none
    scale: float = 0.0


def scripted_teacher(env_kind, obs, noise=TeacherNoise(), rng=None, gain=1.5, align_tol=0.01):
    """Proportional controller in normalized action units, plus optional noise.

    PointReach: head straight for the goal. SlotInsert: line up under the slot
    entry first, then push up through it.
    """
    obs = np.asarray(obs, dtype=np.float64)
    rel = obs[2:4]
    if env_kind == "point_reach":
        a = gain * rel / 0.05
    elif env_kind == "slot_insert":
        dx, dy = rel
        if abs(dx) > align_tol and dy < 0.04:
            # stay a little below the wall until aligned
            a = np.array([dx, dy - 0.03]) * gain / 0.05
        else:
            a = np.array([dx * gain / 0.05, 1.0])
    else:
        raise ValueError(f"unknown env kind {env_kind!r}")
    a = np.clip(a, -1.0, 1.0)
    if noise.kind != "none" and noise.scale > 0:
        if noise.kind == "gaussian":
            a = a + noise.scale * rng.standard_normal(a.shape)
        elif noise.kind == "uniform":
            a = a + rng.uniform(-noise.scale, noise.scale, a.shape)
        else:
            raise ValueError(f"unknown noise kind {noise.kind!r}")
    return a
