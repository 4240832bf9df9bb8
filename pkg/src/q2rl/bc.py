"""Behavior-cloning policies (Gaussian or GMM head) trained by maximum likelihood."""
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import distributions as D
from .approximator import Adam, Mlp
from .errors import InputError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class BcConfig:
    head: str = "gaussian"
    n_components: int = 5
    hidden_dims: tuple = (64, 64)
    use_layer_norm: bool = True
    epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 3e-3
    lr_schedule: str = "cosine"   # cosine | constant
    holdout_fraction: float = 0.1
    checkpoint_every: int = 0
    seed: int = 0


class BcPolicy:
    def __init__(self, obs_dim, action_dim, head="gaussian", n_components=5,
                 hidden_dims=(64, 64), use_layer_norm=True, rng=None):
        if head not in ("gaussian", "gmm"):
            raise ValueError(f"unknown head {head!r}")
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.head = head
        self.n_components = n_components if head == "gmm" else 1
        d, c = action_dim, self.n_components
        out = 2 * d if head == "gaussian" else c * (1 + 2 * d)
        self.net = Mlp([obs_dim, *hidden_dims, out], use_layer_norm=use_layer_norm, rng=rng)
        self.loss_curve = []
        self.checkpoints = []

    # -- distribution parameters -------------------------------------------

    def _split(self, raw):
        d, c = self.action_dim, self.n_components
        if self.head == "gaussian":
            return {"mu": raw[:, :d], "raw_log_sigma": raw[:, d:]}
        return {
            "logits": raw[:, :c],
            "mu": raw[:, c:c + c * d].reshape(-1, c, d),
            "raw_log_sigma": raw[:, c + c * d:].reshape(-1, c, d),
        }

    def params_batch(self, obs):
        obs = np.atleast_2d(obs)
        if obs.shape[1] != self.obs_dim:
            raise ShapeError(f"observation has {obs.shape[1]} features, policy expects {self.obs_dim}")
        p = self._split(self.net.forward(obs))
        p["log_sigma"] = D.clamp_log_sigma(p.pop("raw_log_sigma"))
        if self.head == "gmm":
            logits = p.pop("logits")
            p["log_w"] = logits - np.max(logits, axis=-1, keepdims=True)
            p["log_w"] -= np.log(np.sum(np.exp(p["log_w"]), axis=-1, keepdims=True))
        return p

    def distribution(self, obs):
        p = self.params_batch(np.asarray(obs)[None, :] if np.ndim(obs) == 1 else obs)
        if self.head == "gaussian":
            return D.DiagGaussianParams(p["mu"][0], p["log_sigma"][0])
        w = np.exp(p["log_w"][0])
        return D.GmmParams.from_arrays(w / w.sum(), p["mu"][0], p["log_sigma"][0])

    def _check_action(self, a, n):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if a.shape != (n, self.action_dim):
            raise ShapeError(f"actions of shape {a.shape}, expected ({n}, {self.action_dim})")
        return a

    def log_prob(self, obs, a):
        p = self.params_batch(obs)
        a = self._check_action(a, p["mu"].shape[0])
        if self.head == "gaussian":
            return D.normal_log_prob(p["mu"], p["log_sigma"], a)
        return D.mixture_log_prob(p["log_w"], p["mu"], p["log_sigma"], a)

    def entropy(self, obs):
        p = self.params_batch(obs)
        if self.head == "gaussian":
            return D.normal_entropy(p["log_sigma"])
        return D.mixture_entropy_upper(np.exp(p["log_w"]), p["log_sigma"])

    def log_prob_and_entropy(self, obs, a):
        """Both terms from one forward pass."""
        p = self.params_batch(obs)
        a = self._check_action(a, p["mu"].shape[0])
        if self.head == "gaussian":
            return (D.normal_log_prob(p["mu"], p["log_sigma"], a), D.normal_entropy(p["log_sigma"]))
        return (D.mixture_log_prob(p["log_w"], p["mu"], p["log_sigma"], a),
                D.mixture_entropy_upper(np.exp(p["log_w"]), p["log_sigma"]))

    def sample(self, obs, rng, use_mode=False):
        single = np.ndim(obs) == 1
        p = self.params_batch(obs)
        if self.head == "gaussian":
            if use_mode:
                a = p["mu"].copy()
            else:
                a = p["mu"] + np.exp(p["log_sigma"]) * rng.standard_normal(p["mu"].shape)
        elif use_mode:
            idx = np.argmax(p["log_w"], axis=-1)
            a = p["mu"][np.arange(idx.shape[0]), idx]
        else:
            a, _ = D.sample_mixture_batch(p["log_w"], p["mu"], p["log_sigma"], rng)
        return a[0] if single else a

    def mode(self, obs):
        return self.sample(obs, None, use_mode=True)

    # -- training ----------------------------------------------------------

    def nll(self, obs, a):
        """Mean negative log-likelihood and its parameter gradients."""
        raw, cache = self.net.forward_cache(obs)
        parts = self._split(raw)
        raw_ls = parts["raw_log_sigma"]
        ls = D.clamp_log_sigma(raw_ls)
        inside = (raw_ls > D.LOG_SIGMA_MIN) & (raw_ls < D.LOG_SIGMA_MAX)
        n = obs.shape[0]
        if self.head == "gaussian":
            lp, dmu, dls, _ = D.normal_log_prob_grad(parts["mu"], ls, a)
            draw = np.concatenate([dmu, dls * inside], axis=1)
        else:
            lp, dlogits, dmu, dls = D.mixture_log_prob_grad(parts["logits"], parts["mu"], ls, a)
            draw = np.concatenate([dlogits, dmu.reshape(n, -1), (dls * inside).reshape(n, -1)], axis=1)
        grads, _ = self.net.backward(cache, -draw / n)
        return float(-np.mean(lp)), grads

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        return {
            "kind": "bc_policy",
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "head": self.head,
            "n_components": self.n_components,
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc):
        pol = cls.__new__(cls)
        pol.obs_dim = doc["obs_dim"]
        pol.action_dim = doc["action_dim"]
        pol.head = doc["head"]
        pol.n_components = doc["n_components"]
        pol.net = Mlp.from_dict(doc["net"])
        pol.loss_curve = []
        pol.checkpoints = []
        return pol

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def policy_log_prob(policy, s, a):
    return float(policy.log_prob(np.atleast_2d(s), np.atleast_2d(a))[0])


def policy_entropy(policy, s):
    return float(policy.entropy(np.atleast_2d(s))[0])


def train_bc(data, cfg=None):
    """Fit a BC policy to demo (observation, action) pairs by minibatch Adam on the NLL.

    With ``holdout_fraction > 0`` the returned weights are those of the epoch
    with the lowest held-out NLL.
    """
    cfg = cfg or BcConfig()
    if len(data) == 0:
        raise InputError("cannot train BC on an empty dataset")
    obs, act = data.pairs()
    rng = np.random.default_rng(cfg.seed)
    policy = BcPolicy(obs.shape[1], act.shape[1], cfg.head, cfg.n_components,
                      cfg.hidden_dims, cfg.use_layer_norm, rng=rng)
    perm = rng.permutation(obs.shape[0])
    n_hold = int(cfg.holdout_fraction * obs.shape[0])
    hold, train = perm[:n_hold], perm[n_hold:]
    if train.size == 0:
        train, hold = perm, perm[:0]
    if cfg.lr_schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown lr schedule {cfg.lr_schedule!r}")
    opt = Adam(policy.net.params, learning_rate=cfg.learning_rate)
    total_steps = cfg.epochs * -(-train.size // cfg.batch_size)

    def holdout_nll():
        return policy.nll(obs[hold], act[hold])[0] if hold.size else float("nan")

    best = (holdout_nll(), 0, None)
    policy.loss_curve.append({"epoch": 0, "train_nll": policy.nll(obs[train], act[train])[0],
                              "holdout_nll": best[0]})
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train)
        total = 0.0
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if cfg.lr_schedule == "cosine":
                opt.learning_rate = 0.5 * cfg.learning_rate * (1 + np.cos(np.pi * opt.step_count / total_steps))
            loss, grads = policy.nll(obs[idx], act[idx])
            opt.step(policy.net.params, grads)
            total += loss * idx.size
        h = holdout_nll()
        policy.loss_curve.append({"epoch": epoch, "train_nll": total / order.size, "holdout_nll": h})
        if hold.size and h < best[0]:
            best = (h, epoch, {k: v.copy() for k, v in policy.net.params.items()})
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            policy.checkpoints.append((epoch, policy.net.copy()))
    if best[2] is not None:
        policy.net.params = best[2]
        log.info("BC: selected epoch %d (held-out NLL %.4f)", best[1], best[0])
    policy.selected_epoch = best[1] if best[2] is not None else cfg.epochs
    return policy


class NoisyModePolicy:
    """Deterministic policy (a base policy's mode) plus additive noise.

    Not soft-optimal: the likelihood it reports is a Gaussian with sigma equal
    to the noise scale, whatever the actual noise kind.
    """

    head = "gaussian"
    n_components = 1

    def __init__(self, base, kind="gaussian", scale=0.1):
        if kind not in ("gaussian", "uniform"):
            raise ValueError(f"unknown noise kind {kind!r}")
        self.base = base
        self.kind = kind
        self.scale = float(scale)
        self.obs_dim = base.obs_dim
        self.action_dim = base.action_dim

    def params_batch(self, obs):
        mu = np.atleast_2d(self.base.mode(np.atleast_2d(obs)))
        return {"mu": mu, "log_sigma": np.full_like(mu, np.log(self.scale))}

    def distribution(self, obs):
        p = self.params_batch(obs)
        return D.DiagGaussianParams(p["mu"][0], p["log_sigma"][0])

    def log_prob(self, obs, a):
        p = self.params_batch(obs)
        return D.normal_log_prob(p["mu"], p["log_sigma"], np.atleast_2d(a))

    def entropy(self, obs):
        return D.normal_entropy(self.params_batch(obs)["log_sigma"])

    def log_prob_and_entropy(self, obs, a):
        p = self.params_batch(obs)
        return D.normal_log_prob(p["mu"], p["log_sigma"], np.atleast_2d(a)), D.normal_entropy(p["log_sigma"])

    def sample(self, obs, rng, use_mode=False):
        single = np.ndim(obs) == 1
        mu = self.params_batch(obs)["mu"]
        if not use_mode:
            if self.kind == "gaussian":
                mu = mu + self.scale * rng.standard_normal(mu.shape)
            else:
                mu = mu + rng.uniform(-self.scale, self.scale, mu.shape)
        return mu[0] if single else mu

    def mode(self, obs):
        return self.sample(obs, None, use_mode=True)


def config_dict(cfg):
    d = asdict(cfg)
    d["hidden_dims"] = list(d["hidden_dims"])
    return d
