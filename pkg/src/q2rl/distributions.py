"""Diagonal-Gaussian and Gaussian-mixture action distributions.

Two layers: frozen dataclasses with scalar-returning functions for single
distributions, and array functions (``normal_*``, ``mixture_*``) that work
over arbitrary leading batch axes and also return gradients where training
needs them. Actions are never squashed.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 2.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def clamp_log_sigma(raw):
    return np.clip(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)


@dataclass(frozen=True)
class DiagGaussianParams:
    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        ls = np.atleast_1d(np.asarray(self.log_sigma, dtype=np.float64))
        if mu.shape != ls.shape or mu.ndim != 1:
            raise ShapeError(f"mu {mu.shape} and log_sigma {ls.shape} must be equal-length vectors")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(ls))):
            raise ValueError("non-finite distribution parameters")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_sigma", ls)

    @property
    def dim(self):
        return self.mu.shape[0]

    @property
    def sigma(self):
        return np.exp(self.log_sigma)


@dataclass(frozen=True)
class GmmParams:
    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        comps = tuple(self.components)
        if len(comps) == 0 or w.shape != (len(comps),):
            raise ShapeError("need one weight per component and at least one component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must lie on the simplex, got {w}")
        if len({c.dim for c in comps}) != 1:
            raise ShapeError("mixture components disagree on action dimension")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_arrays(cls, weights, mus, log_sigmas):
        return cls(weights, tuple(DiagGaussianParams(m, s) for m, s in zip(mus, log_sigmas)))

    @property
    def dim(self):
        return self.components[0].dim

    @property
    def mus(self):
        return np.stack([c.mu for c in self.components])

    @property
    def log_sigmas(self):
        return np.stack([c.log_sigma for c in self.components])


# -- batched array forms --------------------------------------------------

def normal_log_prob(mu, log_sigma, a):
    z = (a - mu) * np.exp(-log_sigma)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_sigma, axis=-1) - mu.shape[-1] * HALF_LOG_2PI


def normal_log_prob_grad(mu, log_sigma, a):
    """Log-density plus its derivatives w.r.t. mu, log_sigma and a."""
    inv_var = np.exp(-2.0 * log_sigma)
    diff = a - mu
    lp = normal_log_prob(mu, log_sigma, a)
    dmu = diff * inv_var
    dlog_sigma = diff * diff * inv_var - 1.0
    return lp, dmu, dlog_sigma, -dmu


def normal_entropy(log_sigma):
    return np.sum(log_sigma + 0.5 + HALF_LOG_2PI, axis=-1)


def _safe_log(w):
    with np.errstate(divide="ignore"):
        return np.log(w)


def mixture_log_prob(log_w, mu, log_sigma, a):
    """log sum_i w_i N(a; mu_i, sigma_i). ``mu`` is (..., C, d), ``a`` is (..., d)."""
    comp = normal_log_prob(mu, log_sigma, a[..., None, :]) + log_w
    m = np.max(comp, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(comp - m), axis=-1, keepdims=True)))[..., 0]


def mixture_log_prob_grad(logits, mu, log_sigma, a):
    """Mixture log-density with weights softmax(logits), and its gradients.

    Returns (lp, dlogits, dmu, dlog_sigma).
    """
    lm = np.max(logits, axis=-1, keepdims=True)
    log_w = logits - lm - np.log(np.sum(np.exp(logits - lm), axis=-1, keepdims=True))
    comp_lp, dmu_c, dls_c, _ = normal_log_prob_grad(mu, log_sigma, a[..., None, :])
    joint = comp_lp + log_w
    m = np.max(joint, axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(joint - m), axis=-1, keepdims=True))
    resp = np.exp(joint - lse)
    dlogits = resp - np.exp(log_w)
    return lse[..., 0], dlogits, resp[..., None] * dmu_c, resp[..., None] * dls_c


def mixture_entropy_upper(w, log_sigma):
    """sum_i w_i H[N_i] - sum_i w_i log w_i, with 0 log 0 = 0."""
    comp_h = normal_entropy(log_sigma)
    wlogw = np.where(w > 0, w * _safe_log(np.where(w > 0, w, 1.0)), 0.0)
    return np.sum(w * comp_h, axis=-1) - np.sum(wlogw, axis=-1)


def softmax(logits):
    e = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


# -- single-distribution API ----------------------------------------------

def _check_action(p, a):
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if a.shape != (p.dim,):
        raise ShapeError(f"action of shape {a.shape} for a {p.dim}-dimensional distribution")
    return a


def gaussian_log_prob(p, a):
    a = _check_action(p, a)
    return float(normal_log_prob(p.mu, p.log_sigma, a))


def gaussian_entropy(p):
    return float(normal_entropy(p.log_sigma))


def gmm_log_prob(p, a):
    a = _check_action(p, a)
    return float(mixture_log_prob(_safe_log(p.weights), p.mus, p.log_sigmas, a))


def gmm_entropy_upper(p):
    return float(mixture_entropy_upper(p.weights, p.log_sigmas))


def mode(p):
    """Gaussian mean, or mean of the highest-weight mixture component (lowest index on ties)."""
    if isinstance(p, GmmParams):
        return p.components[int(np.argmax(p.weights))].mu.copy()
    return p.mu.copy()


def sample(p, rng, use_mode=False):
    if use_mode:
        return mode(p)
    if isinstance(p, GmmParams):
        p = p.components[int(rng.choice(len(p.components), p=p.weights))]
    return p.mu + p.sigma * rng.standard_normal(p.dim)


def sample_mixture_batch(log_w, mu, log_sigma, rng):
    """Ancestral samples for a batch of mixtures; ``mu`` is (B, C, d)."""
    w = np.exp(log_w)
    u = rng.random(w.shape[0])
    idx = np.minimum((np.cumsum(w, axis=-1) < u[:, None]).sum(axis=-1), w.shape[-1] - 1)
    rows = np.arange(w.shape[0])
    eps = rng.standard_normal((mu.shape[0], mu.shape[2]))
    return mu[rows, idx] + np.exp(log_sigma[rows, idx]) * eps, idx
