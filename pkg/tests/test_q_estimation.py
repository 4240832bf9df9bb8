import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from q2rl import distributions as D
from q2rl.approximator import Mlp
from q2rl.bc import BcConfig, BcPolicy, train_bc
from q2rl.data import DemoDataset, Trajectory, read_jsonl
from q2rl.envs import TeacherNoise, make_env, point_reach_spec, scripted_teacher
from q2rl.errors import InputError, ShapeError
from q2rl.q_estimation import (
    QBCEstimate, QEstConfig, RolloutSet, ValueEstimator, collect_rollouts, fit_value, init_q_rl,
    monte_carlo_returns, q_bc, run_episode, save_rollouts,
)
from q2rl.sac import CriticEnsemble, RewardShaper


class FixedPolicy:
    """Policy stub emitting a fixed distribution at every state."""

    def __init__(self, dist):
        self.dist = dist

    def log_prob_and_entropy(self, obs, actions):
        if isinstance(self.dist, D.GmmParams):
            lp = [D.gmm_log_prob(self.dist, a) for a in actions]
            h = D.gmm_entropy_upper(self.dist)
        else:
            lp = [D.gaussian_log_prob(self.dist, a) for a in actions]
            h = D.gaussian_entropy(self.dist)
        return np.array(lp), np.full(len(actions), h)


def _const_value(obs_dim, c):
    net = Mlp([obs_dim, 8, 1], rng=np.random.default_rng(0))
    net.params["W1"][:] = 0.0
    net.params["b1"][:] = c
    return ValueEstimator(net)


def _episode(rewards, terminated=True):
    n = len(rewards)
    return Trajectory(np.arange(n + 1.0)[:, None].repeat(2, 1), np.zeros((n, 1)), rewards, terminated)


# -- returns ---------------------------------------------------------------

def test_returns_simple_cases():
    np.testing.assert_array_equal(monte_carlo_returns(_episode([0.0] * 5), 0.99), np.zeros(5))
    r = [0.3, -1.0, 2.0]
    np.testing.assert_array_equal(monte_carlo_returns(_episode(r), 0.0), r)


def test_shaped_return_example():
    g = monte_carlo_returns(_episode([-1.0, -1.0, 9.0]), 0.99)
    # hand-summed discounted return
    assert -1 - 0.99 + 0.9801 * 9 == pytest.approx(6.8309, abs=1e-12)
    assert g[0] == pytest.approx(6.8309, abs=1e-12)


def test_returns_errors():
    with pytest.raises(InputError):
        monte_carlo_returns(np.array([]), 0.9)
    with pytest.raises(InputError):
        monte_carlo_returns(_episode([1.0]), 1.0)


@settings(max_examples=60, deadline=None)
@given(rewards=st.lists(st.floats(-10, 10), min_size=1, max_size=40), gamma=st.floats(0, 0.999))
def test_returns_recursion(rewards, gamma):
    g = monte_carlo_returns(np.array(rewards), gamma)
    nxt = np.r_[g[1:], 0.0]
    np.testing.assert_allclose(g, np.array(rewards) + gamma * nxt, atol=1e-9)


# -- rollouts --------------------------------------------------------------

def _teacher_policy(noise=0.0):
    class Teacher:
        def sample(self, obs, rng, use_mode=False):
            n = TeacherNoise("none") if use_mode else TeacherNoise("gaussian", noise)
            return scripted_teacher("point_reach", obs, n, rng)
    return Teacher()


def test_collect_rollouts_basic():
    env = make_env(point_reach_spec())
    assert len(collect_rollouts(env, _teacher_policy(), 0, np.random.default_rng(0))) == 0
    rs = collect_rollouts(env, _teacher_policy(0.3), 5, np.random.default_rng(0))
    assert len(rs) == 5
    for e in rs.episodes:
        assert len(e) <= env.spec.max_episode_len
        assert e.terminated or e.truncated
        assert set(np.unique(e.rewards)) <= {-1.0, 4.0}
    with pytest.raises(InputError):
        collect_rollouts(env, _teacher_policy(), -1, np.random.default_rng(0))


def test_collect_rollouts_deterministic():
    env = make_env(point_reach_spec())
    a = collect_rollouts(env, _teacher_policy(), 4, np.random.default_rng(3), use_mode=True)
    b = collect_rollouts(env, _teacher_policy(), 4, np.random.default_rng(3), use_mode=True)
    for x, y in zip(a.episodes, b.episodes):
        np.testing.assert_array_equal(x.observations, y.observations)
        np.testing.assert_array_equal(x.actions, y.actions)


def test_default_config_values():
    cfg = QEstConfig()
    assert cfg.n_rollouts == 100 and cfg.init_steps == 20_000 and cfg.alpha == 1.0


def test_rollout_persistence(tmp_path):
    env = make_env(point_reach_spec())
    rs = collect_rollouts(env, _teacher_policy(0.2), 3, np.random.default_rng(0), seed=0, policy_id="bc@10")
    save_rollouts(tmp_path / "r.jsonl", rs)
    back = read_jsonl(tmp_path / "r.jsonl")
    for x, y in zip(rs.episodes, back.trajectories):
        np.testing.assert_array_equal(x.rewards, y.rewards)
    meta = json.loads((tmp_path / "r.jsonl.meta.json").read_text())
    assert meta["policy_id"] == "bc@10" and meta["shaping"] == {"scale": 5.0, "bias": -1.0}


# -- value fit -------------------------------------------------------------

def _constant_return_rollouts(rng, c, n=20):
    # gamma = 0 makes every return equal its reward
    eps = []
    for _ in range(n):
        T = rng.integers(1, 8)
        obs = rng.uniform(0, 1, (T + 1, 4))
        eps.append(Trajectory(obs, np.zeros((T, 2)), np.full(T, c), True))
    return RolloutSet(eps)


def test_fit_value_constant_returns(rng):
    rs = _constant_return_rollouts(rng, -3.0)
    est = fit_value(rs, 0.0, QEstConfig(value_steps=2000, learning_rate=1e-3), rng)
    obs, _ = rs.pairs()
    assert np.max(np.abs(est(obs) + 3.0)) <= 0.05
    assert est.final_loss < est.initial_loss


def test_fit_value_single_step_terminal(rng):
    eps = [Trajectory(rng.uniform(0, 1, (2, 4)), np.zeros((1, 2)), [4.0], True) for _ in range(30)]
    est = fit_value(RolloutSet(eps), 0.99, QEstConfig(value_steps=2000, learning_rate=1e-3), rng)
    assert np.max(np.abs(est(np.array([e.observations[0] for e in eps])) - 4.0)) <= 0.05


def test_fit_value_empty():
    with pytest.raises(InputError):
        fit_value(RolloutSet([]), 0.99)


# -- Q_BC ------------------------------------------------------------------

def test_q_bc_closed_form_sum():
    est = QBCEstimate(_const_value(3, 2.0), FixedPolicy(D.DiagGaussianParams([0.0], [0.0])), 1.0)
    assert q_bc(est, np.zeros(3), [0.0]) == pytest.approx(2.5, abs=1e-12)
    assert 2.0 - 0.9189385 + 1.4189385 == pytest.approx(2.5, abs=1e-12)


def test_q_bc_shift_with_value_bias(rng):
    bc = BcPolicy(4, 2, rng=rng)
    v = ValueEstimator(Mlp([4, 8, 1], rng=rng))
    s, a = rng.normal(size=(20, 4)), rng.normal(size=(20, 2))
    before = QBCEstimate(v, bc).batch(s, a)
    v.net.params["b1"] += 1.75
    np.testing.assert_allclose(QBCEstimate(v, bc).batch(s, a) - before, 1.75, atol=1e-12)


def test_q_bc_real_policy_matches_parts(rng):
    bc = BcPolicy(4, 2, head="gmm", n_components=3, rng=rng)
    v = ValueEstimator(Mlp([4, 8, 1], rng=rng))
    s, a = rng.normal(size=4), rng.normal(size=2)
    p = bc.distribution(s)
    expected = v(s)[0] + 0.5 * D.gmm_log_prob(p, a) + 0.5 * D.gmm_entropy_upper(p)
    assert q_bc(QBCEstimate(v, bc, 0.5), s, a) == pytest.approx(expected, abs=1e-12)


def test_q_bc_shape_error(rng):
    est = QBCEstimate(ValueEstimator(Mlp([4, 8, 1], rng=rng)), BcPolicy(4, 2, rng=rng))
    with pytest.raises(ShapeError):
        q_bc(est, np.zeros(4), np.zeros(3))
    with pytest.raises(ShapeError):
        est.batch(np.zeros((3, 4)), np.zeros((2, 2)))


def test_boltzmann_recovery(rng):
    """pi = exp(Q - V_soft) for a quadratic Q; Q_BC with the analytic V recovers Q."""
    d = 3
    A = rng.normal(size=(d, 2))
    sigma = np.exp(rng.uniform(-1, 0.5, d))
    f = lambda s: np.sin(s[0]) + s[1] ** 2

    def Q(s, a):
        m = A @ s
        return f(s) - 0.5 * np.sum((a - m) ** 2 / sigma ** 2)

    class Boltzmann:
        def log_prob_and_entropy(self, obs, actions):
            lp = np.array([D.gaussian_log_prob(D.DiagGaussianParams(A @ s, np.log(sigma)), a)
                           for s, a in zip(obs, actions)])
            return lp, np.full(len(obs), D.gaussian_entropy(D.DiagGaussianParams(np.zeros(d), np.log(sigma))))

    class AnalyticValue:
        # E_{a~pi}[Q(s, a)] = f(s) - d/2
        def __call__(self, obs):
            return np.array([f(s) - d / 2 for s in np.atleast_2d(obs)])

    est = QBCEstimate(AnalyticValue(), Boltzmann(), 1.0)
    for _ in range(100):
        s, a = rng.normal(size=2), rng.normal(size=d) * 2
        assert abs(q_bc(est, s, a) - Q(s, a)) <= 1e-9


def test_duplicated_components_reparameterization(rng):
    base = D.DiagGaussianParams([0.3, -0.2], [0.1, -0.3])
    w = 0.3
    dup = D.GmmParams([w, 1 - w], (base, base))
    v = _const_value(2, 0.7)
    single, split = QBCEstimate(v, FixedPolicy(base)), QBCEstimate(v, FixedPolicy(dup))
    for _ in range(10):
        a = rng.normal(size=2)
        assert D.gmm_log_prob(dup, a) == pytest.approx(D.gaussian_log_prob(base, a), abs=1e-12)
        weight_entropy = -(w * np.log(w) + (1 - w) * np.log(1 - w))
        diff = q_bc(split, np.zeros(2), a) - q_bc(single, np.zeros(2), a)
        assert diff == pytest.approx(weight_entropy, abs=1e-12)


# -- critic initialization -------------------------------------------------

def test_init_zero_steps_is_identity(rng):
    ens = CriticEnsemble(4, 2, 3, (8,), rng=rng)
    before = {k: v.copy() for k, v in ens.members.params.items()}
    init_q_rl(None, RolloutSet([]), ens, 0)
    for k in before:
        np.testing.assert_array_equal(ens.members.params[k], before[k])


@pytest.fixture(scope="module")
def point_reach_bc_phase():
    rng = np.random.default_rng(11)
    env = make_env(point_reach_spec())
    demos = []
    for _ in range(20):
        demos.append(run_episode(env, lambda o: scripted_teacher("point_reach", o, TeacherNoise("gaussian", 0.2), rng),
                                 rng, RewardShaper(1.0, 0.0)))
    bc = train_bc(DemoDataset(demos), BcConfig(epochs=200))
    rs = collect_rollouts(env, bc, 30, rng)
    value = fit_value(rs, 0.99, QEstConfig(value_steps=3000, learning_rate=1e-3), rng)
    return bc, rs, QBCEstimate(value, bc)


def test_init_q_rl_matches_targets(point_reach_bc_phase):
    bc, rs, est = point_reach_bc_phase
    ens = CriticEnsemble(4, 2, 10, (64, 64), rng=np.random.default_rng(0))
    init_q_rl(est, rs, ens, 3000, learning_rate=1e-3, rng=np.random.default_rng(1))
    obs, act = rs.pairs()
    resid = np.abs(ens.aggregate(obs, act) - est.batch(obs, act))
    assert np.mean(resid <= 0.5) >= 0.9
    for k in ens.members.params:
        np.testing.assert_array_equal(ens.members.params[k], ens.targets.params[k])


def test_value_fit_on_rollouts_improves(point_reach_bc_phase):
    _, _, est = point_reach_bc_phase
    assert est.value.final_loss < est.value.initial_loss
