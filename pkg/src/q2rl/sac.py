"""Soft actor-critic learner: critic ensemble, subsample-min TD targets, auxiliary BC actor loss.

Losses are exposed as pure functions of their random draws (``critic_loss``,
``actor_loss``, ``entropy_coef_loss``) so they can be checked against finite
differences; the ``*_update`` wrappers draw the noise and take one Adam step.
"""
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import distributions as D
from .approximator import Adam, Mlp, soft_update
from .errors import InputError, NotReady, NumericError


@dataclass(frozen=True)
class RewardShaper:
    scale: float = 5.0
    bias: float = -1.0

    def __call__(self, r):
        return self.scale * r + self.bias


def shape_reward(sh, r):
    return sh(r)


@dataclass
class RLConfig:
    gamma: float = 0.99
    tau: float = 0.005
    utd: int = 4
    subsample: int = 2
    batch_size: int = 256
    ensemble_size: int = 10
    hidden_dims: tuple = (64, 64)
    use_layer_norm: bool = True
    learning_rate: float = 3e-4
    bc_loss_weight: float = 0.1
    bc_loss_target: str = "bc_samples"   # bc_samples | demo
    reward_scale: float = 5.0
    reward_bias: float = -1.0
    auto_entropy: bool = True
    init_entropy_coef: float = 0.1
    target_entropy: float | None = None   # None means -action_dim
    replay_capacity: int = 2_000_000

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise InputError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.utd < 1:
            raise InputError("utd must be at least 1")
        if not 1 <= self.subsample <= self.ensemble_size:
            raise InputError("subsample must lie in [1, ensemble_size]")
        if self.bc_loss_weight < 0:
            raise InputError("bc_loss_weight must be non-negative")
        if self.bc_loss_target not in ("bc_samples", "demo"):
            raise InputError(f"unknown bc_loss_target {self.bc_loss_target!r}")

    @property
    def shaper(self):
        return RewardShaper(self.reward_scale, self.reward_bias)

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(d["hidden_dims"])
        return d


BOUNDARY_EPS = 1e-3


def _log1m_tanh2(u):
    """log(1 - tanh(u)^2), stable for large |u|."""
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class TanhGaussianActor:
    """Gaussian in a latent space squashed by tanh into the normalized action box."""

    def __init__(self, obs_dim, action_dim, hidden_dims=(64, 64), use_layer_norm=True, rng=None):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.net = Mlp([obs_dim, *hidden_dims, 2 * action_dim], use_layer_norm=use_layer_norm, rng=rng)

    def dist(self, obs):
        """Latent mean and clamped log sigma."""
        raw = self.net.forward(np.atleast_2d(obs))
        d = self.action_dim
        return raw[..., :d], D.clamp_log_sigma(raw[..., d:])

    def sample(self, obs, rng, use_mode=False):
        single = np.ndim(obs) == 1
        mu, ls = self.dist(obs)
        u = mu if use_mode else mu + np.exp(ls) * rng.standard_normal(mu.shape)
        a = np.tanh(u)
        return a[0] if single else a

    def mode(self, obs):
        return self.sample(obs, None, use_mode=True)

    def log_prob(self, obs, a):
        mu, ls = self.dist(obs)
        return squashed_log_prob(mu, ls, np.atleast_2d(a))

    def copy(self):
        other = TanhGaussianActor.__new__(TanhGaussianActor)
        other.__dict__.update(self.__dict__)
        other.net = self.net.copy()
        return other

    def to_dict(self):
        return {"kind": "tanh_gaussian_actor", "obs_dim": self.obs_dim, "action_dim": self.action_dim,
                "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, doc):
        actor = cls.__new__(cls)
        actor.obs_dim, actor.action_dim = doc["obs_dim"], doc["action_dim"]
        actor.net = Mlp.from_dict(doc["net"])
        return actor


def squashed_log_prob(mu, log_sigma, a):
    """Density of a = tanh(u), u ~ N(mu, sigma); actions are pulled inside the open box first."""
    u = np.arctanh(np.clip(a, -1.0 + BOUNDARY_EPS, 1.0 - BOUNDARY_EPS))
    return D.normal_log_prob(mu, log_sigma, u) - np.sum(_log1m_tanh2(u), axis=-1)


class CriticEnsemble:
    def __init__(self, obs_dim, action_dim, ensemble_size=10, hidden_dims=(64, 64),
                 use_layer_norm=True, rng=None):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.members = Mlp([obs_dim + action_dim, *hidden_dims, 1], use_layer_norm=use_layer_norm,
                           ensemble_size=ensemble_size, rng=rng)
        self.targets = self.members.copy()

    @property
    def size(self):
        return self.members.ensemble_size

    @staticmethod
    def _inputs(obs, act):
        return np.concatenate([np.atleast_2d(obs), np.atleast_2d(act)], axis=-1)

    def q(self, obs, act):
        """Per-member values, shape (E, B)."""
        return self.members.forward(self._inputs(obs, act))[..., 0]

    def q_target(self, obs, act):
        return self.targets.forward(self._inputs(obs, act))[..., 0]

    def aggregate(self, obs, act, how="mean"):
        q = self.q(obs, act)
        return q.mean(axis=0) if how == "mean" else q.min(axis=0)

    def sync_targets(self):
        soft_update(self.targets, self.members, 1.0)

    def copy(self):
        other = CriticEnsemble.__new__(CriticEnsemble)
        other.__dict__.update(self.__dict__)
        other.members = self.members.copy()
        other.targets = self.targets.copy()
        return other

    def to_dict(self):
        return {"kind": "critic_ensemble", "obs_dim": self.obs_dim, "action_dim": self.action_dim,
                "members": self.members.to_dict(), "targets": self.targets.to_dict()}

    @classmethod
    def from_dict(cls, doc):
        ens = cls.__new__(cls)
        ens.obs_dim, ens.action_dim = doc["obs_dim"], doc["action_dim"]
        ens.members = Mlp.from_dict(doc["members"])
        ens.targets = Mlp.from_dict(doc["targets"])
        return ens


# -- losses ----------------------------------------------------------------

def critic_targets(batch, ensemble, actor, cfg, rng, ent_coef, return_info=False):
    """Soft TD targets with a min over a random member subset of the target critics.

    One subset is drawn per call and shared by the batch; next actions use
    independent noise per transition.
    """
    subset = np.sort(rng.choice(ensemble.size, size=cfg.subsample, replace=False))
    mu, ls = actor.dist(batch.next_obs)
    eps = rng.standard_normal(mu.shape)
    u = mu + np.exp(ls) * eps
    a_next = np.tanh(u)
    logp = D.normal_log_prob(mu, ls, u) - np.sum(_log1m_tanh2(u), axis=-1)
    q_next = ensemble.targets.members_subset(subset).forward(
        ensemble._inputs(batch.next_obs, a_next))[..., 0].min(axis=0)
    not_done = 1.0 - batch.terminal.astype(np.float64)
    y = batch.rewards + cfg.gamma * not_done * (q_next - ent_coef * logp)
    if return_info:
        return y, {"subset": subset, "next_actions": a_next, "next_log_prob": logp}
    return y


def critic_loss(ensemble, obs, actions, targets):
    """Member-mean squared TD error and gradients for every member."""
    x = ensemble._inputs(obs, actions)
    pred, cache = ensemble.members.forward_cache(x)
    diff = pred[..., 0] - targets[None, :]
    n = targets.shape[0]
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise NumericError("non-finite critic loss", {"loss": loss})
    # each member minimizes its own mean; reported loss is the member average
    grads, _ = ensemble.members.backward(cache, (2.0 * diff / n)[..., None])
    return loss, grads


def critic_update(ensemble, batch, targets, opt):
    loss, grads = critic_loss(ensemble, batch.obs, batch.actions, targets)
    opt.step(ensemble.members.params, grads)
    return loss


def actor_loss(actor, ensemble, obs, eps, ent_coef, bc_actions=None, bc_weight=0.0):
    """Reparameterized SAC actor loss plus ``bc_weight * mean(-log pi(bc_actions|s))``.

    Returns (loss, grads, info) with gradients for the actor parameters only.
    """
    raw, cache = actor.net.forward_cache(obs)
    d = actor.action_dim
    mu, ls = raw[..., :d], D.clamp_log_sigma(raw[..., d:])
    sigma = np.exp(ls)
    u = mu + sigma * eps
    a = np.tanh(u)
    logp = D.normal_log_prob(mu, ls, u) - np.sum(_log1m_tanh2(u), axis=-1)
    x = ensemble._inputs(obs, a)
    q_all, qcache = ensemble.members.forward_cache(x)
    q = q_all[..., 0].mean(axis=0)
    n = obs.shape[0]
    sac = float(np.mean(ent_coef * logp - q))
    # dQ/da through every member, averaged over the ensemble
    _, dx = ensemble.members.backward(qcache, np.full(q_all.shape, 1.0 / (ensemble.size * n)))
    dq_du = dx[..., actor.obs_dim:].sum(axis=0) * (1.0 - a * a)
    # at u = mu + sigma*eps: dlogp/dmu = 2a and dlogp/dls = -1 + 2a*sigma*eps
    dmu = (ent_coef * 2.0 * a) / n - dq_du
    dls = ent_coef * (-1.0 + 2.0 * a * sigma * eps) / n - dq_du * sigma * eps
    bc = 0.0
    if bc_weight > 0 and bc_actions is not None:
        u_bc = np.arctanh(np.clip(bc_actions, -1.0 + BOUNDARY_EPS, 1.0 - BOUNDARY_EPS))
        lp_bc, g_mu, g_ls, _ = D.normal_log_prob_grad(mu, ls, u_bc)
        bc = float(-np.mean(lp_bc - np.sum(_log1m_tanh2(u_bc), axis=-1)))
        dmu = dmu - bc_weight * g_mu / n
        dls = dls - bc_weight * g_ls / n
    loss = sac + bc_weight * bc
    if not np.isfinite(loss):
        raise NumericError("non-finite actor loss", {"sac": sac, "bc": bc})
    inside = (raw[..., d:] > D.LOG_SIGMA_MIN) & (raw[..., d:] < D.LOG_SIGMA_MAX)
    grads, _ = actor.net.backward(cache, np.concatenate([dmu, dls * inside], axis=-1))
    return loss, grads, {"log_prob": logp, "sac_loss": sac, "bc_loss": bc}


def entropy_coef_loss(log_coef, log_probs, target_entropy):
    """Temperature loss -log_coef * mean(log pi + target) and its gradient."""
    m = float(np.mean(log_probs + target_entropy))
    return -log_coef * m, -m


# -- learner ---------------------------------------------------------------

class SacLearner:
    """Owns the actor, the critic ensemble, their optimizers and the temperature."""

    def __init__(self, obs_dim, action_dim, cfg=None, seed=0, bc=None, critic=None):
        self.cfg = cfg or RLConfig()
        c = self.cfg
        init_rng = np.random.default_rng([seed, 1])
        self.rng = np.random.default_rng([seed, 2])
        self.actor = TanhGaussianActor(obs_dim, action_dim, c.hidden_dims, c.use_layer_norm, rng=init_rng)
        self.critic = critic if critic is not None else CriticEnsemble(
            obs_dim, action_dim, c.ensemble_size, c.hidden_dims, c.use_layer_norm, rng=init_rng)
        self.bc = bc
        self.actor_opt = Adam(self.actor.net.params, c.learning_rate)
        self.critic_opt = Adam(self.critic.members.params, c.learning_rate)
        self.log_coef = {"log_coef": np.array(np.log(c.init_entropy_coef))}
        self.coef_opt = Adam(self.log_coef, c.learning_rate)
        self.target_entropy = float(-action_dim if c.target_entropy is None else c.target_entropy)
        self.steps = 0

    @property
    def ent_coef(self):
        return float(np.exp(self.log_coef["log_coef"]))

    def reset_critic_optimizer(self):
        self.critic_opt = Adam(self.critic.members.params, self.cfg.learning_rate)

    def train_step(self, replay):
        """One learner step: ``utd`` critic updates, one actor update, one target soft update."""
        c = self.cfg
        if len(replay) < c.batch_size:
            raise NotReady(f"replay holds {len(replay)} transitions, need {c.batch_size}")
        closses = []
        for _ in range(c.utd):
            batch = replay.sample(c.batch_size, self.rng)
            y = critic_targets(batch, self.critic, self.actor, c, self.rng, self.ent_coef)
            closses.append(critic_update(self.critic, batch, y, self.critic_opt))
        eps = self.rng.standard_normal((batch.obs.shape[0], self.actor.action_dim))
        bc_actions = None
        if c.bc_loss_weight > 0:
            if c.bc_loss_target == "demo":
                demo = batch.source == 2
                bc_actions = batch.actions.copy()
                if not demo.all() and self.bc is not None:
                    bc_actions[~demo] = self.bc.sample(batch.obs[~demo], self.rng)
            elif self.bc is not None:
                bc_actions = self.bc.sample(batch.obs, self.rng)
            if bc_actions is not None:
                bc_actions = np.clip(bc_actions, -1.0, 1.0)
        aloss, grads, info = actor_loss(self.actor, self.critic, batch.obs, eps, self.ent_coef,
                                        bc_actions, c.bc_loss_weight)
        self.actor_opt.step(self.actor.net.params, grads)
        if c.auto_entropy:
            _, g = entropy_coef_loss(self.log_coef["log_coef"], info["log_prob"], self.target_entropy)
            self.coef_opt.step(self.log_coef, {"log_coef": np.array(g)})
        soft_update(self.critic.targets, self.critic.members, c.tau)
        self.steps += 1
        return {
            "learner_step": self.steps,
            "critic_loss": float(np.mean(closses)),
            "actor_loss": aloss,
            "mean_q_rl": float(np.mean(self.critic.q(batch.obs, batch.actions))),
            "entropy": float(-np.mean(info["log_prob"])),
            "entropy_coef": self.ent_coef,
        }

    def snapshot(self):
        """Immutable copies of the acting networks."""
        return self.actor.copy(), self.critic.copy()

    def state_dict(self):
        return {"actor": self.actor.to_dict(), "critic": self.critic.to_dict(),
                "log_coef": float(self.log_coef["log_coef"]), "steps": self.steps,
                "config": self.cfg.to_dict()}


def save_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f)
