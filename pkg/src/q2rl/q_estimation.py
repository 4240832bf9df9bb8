"""Value-of-BC estimation: rollouts, Monte-Carlo returns, and the frozen Q_BC.

Q_BC(s, a) = V(s) + alpha * log pi_BC(a|s) + alpha * H[pi_BC(.|s)] is never
distilled into a network; it is evaluated from the value net and the BC
policy on demand. A critic ensemble can then be regressed onto it.
"""
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .approximator import Adam, Mlp, gradient, mse_loss
from .data import Trajectory, write_jsonl
from .errors import InputError, ShapeError
from .replay import Batch
from .sac import RewardShaper, critic_update

log = logging.getLogger(__name__)


@dataclass
class QEstConfig:
    n_rollouts: int = 100
    alpha: float = 1.0
    use_mode: bool = False
    value_hidden_dims: tuple = (64, 64)
    value_steps: int = 3000
    init_steps: int = 20_000
    batch_size: int = 256
    learning_rate: float = 3e-4

    def to_dict(self):
        d = asdict(self)
        d["value_hidden_dims"] = list(d["value_hidden_dims"])
        return d


@dataclass
class RolloutSet:
    episodes: list
    seed: int | None = None
    policy_id: str = ""
    shaper: RewardShaper = field(default_factory=RewardShaper)

    def __len__(self):
        return len(self.episodes)

    @property
    def n_steps(self):
        return sum(len(e) for e in self.episodes)

    @property
    def success_rate(self):
        return float(np.mean([e.terminated for e in self.episodes])) if self.episodes else float("nan")

    def pairs(self):
        obs = np.concatenate([e.observations[:-1] for e in self.episodes])
        act = np.concatenate([e.actions for e in self.episodes])
        return obs, act


def run_episode(env, act_fn, rng, shaper):
    """One episode; ``act_fn(obs)`` returns a normalized action. Stores the clipped executed action."""
    obs = env.reset(rng)
    observations, actions, rewards = [obs], [], []
    while True:
        a = np.clip(act_fn(obs), -1.0, 1.0)
        res = env.step(env.scale_action(a))
        actions.append(a)
        rewards.append(shaper(res.reward))
        observations.append(res.next_obs)
        if res.terminated or res.truncated:
            return Trajectory(np.array(observations), np.array(actions), np.array(rewards),
                              terminated=res.terminated, truncated=res.truncated)
        obs = res.next_obs


def collect_rollouts(env, policy, n_episodes, rng, shaper=None, use_mode=False, seed=None, policy_id=""):
    if n_episodes < 0:
        raise InputError("n_episodes must be non-negative")
    shaper = shaper or RewardShaper()
    episodes = [run_episode(env, lambda o: policy.sample(o, rng, use_mode=use_mode), rng, shaper)
                for _ in range(n_episodes)]
    return RolloutSet(episodes, seed, policy_id, shaper)


def monte_carlo_returns(episode, gamma):
    """Discounted return from every step, with no bootstrap past the last step."""
    if not 0.0 <= gamma < 1.0:
        raise InputError(f"gamma must lie in [0, 1), got {gamma}")
    rewards = np.asarray(episode.rewards if isinstance(episode, Trajectory) else episode, dtype=np.float64)
    if rewards.size == 0:
        raise InputError("cannot compute returns of an empty episode")
    return kernels.discounted_returns(np.ascontiguousarray(rewards), float(gamma))


class ValueEstimator:
    def __init__(self, net):
        self.net = net
        self.loss_curve = []

    def __call__(self, obs):
        return self.net.forward(np.atleast_2d(obs))[..., 0]

    def to_dict(self):
        return {"kind": "value_estimator", "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, doc):
        return cls(Mlp.from_dict(doc["net"]))


def fit_value(rollouts, gamma, cfg=None, rng=None):
    """Regress V(s_t) onto G_t pooled over every rollout step."""
    cfg = cfg or QEstConfig()
    if len(rollouts) == 0:
        raise InputError("cannot fit a value function to an empty rollout set")
    rng = rng if rng is not None else np.random.default_rng(0)
    obs = np.concatenate([e.observations[:-1] for e in rollouts.episodes])
    ret = np.concatenate([monte_carlo_returns(e, gamma) for e in rollouts.episodes])[:, None]
    n_trunc = sum(e.truncated for e in rollouts.episodes)
    if n_trunc:
        log.info("value fit: %d of %d rollouts truncated (returns not bootstrapped)", n_trunc, len(rollouts))
    net = Mlp([obs.shape[1], *cfg.value_hidden_dims, 1], rng=rng)
    opt = Adam(net.params, cfg.learning_rate)
    est = ValueEstimator(net)
    est.loss_curve.append(mse_loss(net.forward(obs), ret)[0])
    for _ in range(cfg.value_steps):
        idx = rng.integers(0, obs.shape[0], size=min(cfg.batch_size, obs.shape[0]))
        _, grads = gradient(net, mse_loss, obs[idx], ret[idx])
        opt.step(net.params, grads)
    est.loss_curve.append(mse_loss(net.forward(obs), ret)[0])
    est.initial_loss, est.final_loss = est.loss_curve[0], est.loss_curve[-1]
    return est


@dataclass(frozen=True)
class QBCEstimate:
    value: ValueEstimator
    bc: object
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise InputError("alpha must be positive")

    def batch(self, obs, actions):
        obs = np.atleast_2d(obs)
        actions = np.atleast_2d(actions)
        if obs.shape[0] != actions.shape[0]:
            raise ShapeError(f"{obs.shape[0]} observations but {actions.shape[0]} actions")
        logp, ent = self.bc.log_prob_and_entropy(obs, actions)
        return self.value(obs) + self.alpha * logp + self.alpha * ent


def q_bc(est, s, a):
    return float(est.batch(s, a)[0])


def init_q_rl(targets, rollouts, ensemble, n_steps, batch_size=256, learning_rate=3e-4, rng=None):
    """Regress every critic member onto Q_BC over the rollout pairs, then sync the targets."""
    if n_steps == 0:
        return ensemble
    if len(rollouts) == 0:
        raise InputError("cannot initialize critics from an empty rollout set")
    rng = rng if rng is not None else np.random.default_rng(0)
    obs, act = rollouts.pairs()
    y = targets.batch(obs, act)
    opt = Adam(ensemble.members.params, learning_rate)
    n = obs.shape[0]
    for _ in range(n_steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        batch = Batch(obs[idx], act[idx], None, None, None, None, None)
        critic_update(ensemble, batch, y[idx], opt)
    ensemble.sync_targets()
    return ensemble


def save_rollouts(path, rollouts):
    """Rollouts as demo-format JSONL plus a ``.meta.json`` sidecar."""
    write_jsonl(path, rollouts.episodes)
    meta = {"seed": rollouts.seed, "policy_id": rollouts.policy_id,
            "shaping": {"scale": rollouts.shaper.scale, "bias": rollouts.shaper.bias},
            "n_episodes": len(rollouts), "truncated": [bool(e.truncated) for e in rollouts.episodes]}
    with open(f"{path}.meta.json", "w") as f:
        json.dump(meta, f, indent=2)
