"""Experiment orchestration: Q-estimation phase, then online gated actor-critic learning.

The online loop is split into an actor worker (acts, steps the env, batches
transitions) and a learner worker (ingests batches, trains, publishes
parameter snapshots). Sync mode drives both from one thread; async mode runs
them on two threads joined only by bounded queues. With the deterministic
scheduler the async workers take turns in exactly the sync order, so the
transition sequence matches the sync run.
"""
import csv
import dataclasses
import hashlib
import json
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bc import BcPolicy, train_bc
from .config import RunConfig
from .data import DemoDataset, read_jsonl, write_jsonl
from .envs import TeacherNoise, make_env, scripted_teacher, shift_variant
from .errors import ConfigError, ShapeError
from .gating import GateConfig, GateLog, gate
from .q_estimation import QBCEstimate, collect_rollouts, fit_value, init_q_rl, run_episode, save_rollouts
from .replay import ReplayBuffer, Transition, seed_from_demos
from .sac import CriticEnsemble, RewardShaper, SacLearner, TanhGaussianActor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("env_step", "learner_step", "eval_success", "bc_action_fraction",
                  "mean_q_bc", "mean_q_rl", "critic_loss", "actor_loss")


# -- acting policies -------------------------------------------------------

class ActingPolicy:
    """Chooses an executed action (normalized units) and reports where it came from."""

    def __init__(self, variant, bc=None, actor=None, q_est=None, critic=None, gate_cfg=GateConfig()):
        self.variant = variant
        self.bc, self.actor, self.q_est, self.critic = bc, actor, q_est, critic
        self.gate_cfg = gate_cfg

    def with_nets(self, actor, critic):
        return ActingPolicy(self.variant, self.bc, actor, self.q_est, critic, self.gate_cfg)

    def with_modes(self, bc_action, rl_action):
        g = GateConfig(bc_action, rl_action, self.gate_cfg.critic_agg, self.gate_cfg.bc_scorer)
        return ActingPolicy(self.variant, self.bc, self.actor, self.q_est, self.critic, g)

    def act(self, obs, rng):
        """Returns (action, source, q_bc_value, q_rl_value)."""
        if self.variant == "bc_only":
            a = self.bc.sample(obs, rng, use_mode=self.gate_cfg.bc_action == "mode")
            return np.clip(a, -1.0, 1.0), "bc", float("nan"), float("nan")
        if self.variant == "rl_from_scratch":
            a = self.actor.sample(obs, rng, use_mode=self.gate_cfg.rl_action == "mode")
            q = float(self.critic.aggregate(obs, a, self.gate_cfg.critic_agg)[0])
            return a, "rl", float("nan"), q
        d = gate(obs, self.bc, self.actor, self.q_est, self.critic, rng, self.gate_cfg)
        return d.chosen_action, d.source, d.q_bc_value, d.q_rl_value


def gate_config_for(variant, bc_action, rl_action, critic_agg="mean"):
    scorer = "critic" if variant in ("no_gating", "ibrl_style") else "q_bc"
    return GateConfig(bc_action, rl_action, critic_agg, scorer)


@dataclass
class EvalResult:
    success_rate: float
    mean_length: float
    bc_fraction: float
    successes: list = field(default_factory=list)


def evaluate(policy, env, n_episodes=20, rng=None):
    """Roll out without learning. ``policy`` is an ActingPolicy or anything with ``sample``."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    if not isinstance(policy, ActingPolicy):
        inner = policy
        act = lambda o: (np.clip(inner.sample(o, rng), -1.0, 1.0), "rl")
    else:
        act = lambda o: policy.act(o, rng)[:2]
    shaper = RewardShaper(1.0, 0.0)
    successes, lengths, n_bc, n_steps = [], [], 0, 0
    for _ in range(n_episodes):
        sources = []

        def step_fn(o):
            a, src = act(o)
            sources.append(src)
            return a

        traj = run_episode(env, step_fn, rng, shaper)
        successes.append(bool(traj.terminated))
        lengths.append(len(traj))
        n_bc += sum(s == "bc" for s in sources)
        n_steps += len(sources)
    return EvalResult(float(np.mean(successes)), float(np.mean(lengths)), n_bc / n_steps, successes)


# -- messages --------------------------------------------------------------

@dataclass(frozen=True)
class TransitionBatch:
    seq: int
    transitions: tuple


def _params_digest(actor_params, critic_params):
    h = hashlib.sha256()
    for group in (actor_params, critic_params):
        for k in sorted(group):
            h.update(k.encode())
            h.update(np.ascontiguousarray(group[k]).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class Snapshot:
    seq: int
    learner_step: int
    actor_params: dict
    critic_params: dict
    checksum: str

    @classmethod
    def build(cls, seq, learner_step, actor, critic):
        a = {k: v.copy() for k, v in actor.net.params.items()}
        c = {k: v.copy() for k, v in critic.members.params.items()}
        return cls(seq, learner_step, a, c, _params_digest(a, c))

    def valid(self):
        return _params_digest(self.actor_params, self.critic_params) == self.checksum


class SnapshotCorrupt(RuntimeError):
    pass


# -- workers ---------------------------------------------------------------

class ActorWorker:
    def __init__(self, env, policy, rng, shaper, flush_every, gate_log=None):
        self.env = env
        self.policy = policy
        self.rng = rng
        self.shaper = shaper
        self.flush_every = flush_every
        self.gate_log = gate_log
        self.obs = env.reset(rng)
        self.env_step = 0
        self.outbox = []
        self.sent = 0
        self.snapshots_adopted = 0
        self.history = []            # every executed transition, in order
        self.window = []             # (source, q_bc, q_rl) since the last metrics row

    def act_one(self):
        """Take one env step; returns a TransitionBatch when the outbox fills, else None."""
        a, source, qb, qr = self.policy.act(self.obs, self.rng)
        res = self.env.step(self.env.scale_action(a))
        t = Transition(self.obs.copy(), np.asarray(a, dtype=np.float64).copy(), self.shaper(res.reward),
                       res.next_obs.copy(), terminal=res.terminated, truncated=res.truncated, source=source)
        if self.gate_log is not None:
            self.gate_log.record(self.env_step, _Decision(source, qb, qr))
        self.window.append((source, qb, qr))
        self.history.append(t)
        self.outbox.append(t)
        self.env_step += 1
        self.obs = self.env.reset(self.rng) if (res.terminated or res.truncated) else res.next_obs
        if len(self.outbox) == self.flush_every:
            return self._flush()
        return None

    def _flush(self):
        msg = TransitionBatch(self.sent, tuple(self.outbox))
        self.outbox = []
        self.sent += 1
        return msg

    def drain(self):
        """Leftover transitions at shutdown; not a cadence message."""
        if not self.outbox:
            return None
        msg = TransitionBatch(-1, tuple(self.outbox))
        self.outbox = []
        return msg

    def adopt(self, snap):
        if not snap.valid():
            raise SnapshotCorrupt(f"snapshot {snap.seq} failed checksum validation")
        actor = self.policy.actor.copy()
        critic = self.policy.critic.copy()
        actor.net.params = {k: v.copy() for k, v in snap.actor_params.items()}
        critic.members.params = {k: v.copy() for k, v in snap.critic_params.items()}
        self.policy = self.policy.with_nets(actor, critic)
        self.snapshots_adopted += 1

    def take_window(self):
        w, self.window = self.window, []
        return w


@dataclass(frozen=True)
class _Decision:
    source: str
    q_bc_value: float
    q_rl_value: float


class LearnerWorker:
    def __init__(self, learner, replay, publish_every, learning_starts):
        self.learner = learner
        self.replay = replay
        self.publish_every = publish_every
        self.learning_starts = learning_starts
        self.published = 0
        self.ingested = 0
        self.window = []

    @property
    def steps(self):
        return self.learner.steps if self.learner is not None else 0

    def ingest(self, msg):
        for t in msg.transitions:
            self.replay.push(t)
        self.ingested += len(msg.transitions)

    @property
    def ready(self):
        return self.learner is not None and len(self.replay) >= self.learning_starts

    def learn_one(self):
        """One learner step; returns a Snapshot on the publish cadence, else None."""
        self.window.append(self.learner.train_step(self.replay))
        if self.learner.steps % self.publish_every == 0:
            snap = Snapshot.build(self.published, self.learner.steps, self.learner.actor, self.learner.critic)
            self.published += 1
            return snap
        return None

    def take_window(self):
        w, self.window = self.window, []
        return w


# -- experiment state and artifacts ----------------------------------------

@dataclass
class ExperimentState:
    cfg: RunConfig
    env: object
    bc: object
    q_est: object
    learner: object
    replay: ReplayBuffer
    rollouts: object = None
    seeded: int = 0
    actor_worker: ActorWorker = None
    learner_worker: LearnerWorker = None
    metrics: list = field(default_factory=list)
    messages: dict = field(default_factory=lambda: {"transition_batches": 0, "snapshots": 0})
    best_success: float = -1.0

    @property
    def env_step(self):
        return self.actor_worker.env_step if self.actor_worker else 0

    @property
    def learner_step(self):
        return self.learner.steps if self.learner is not None else 0


@dataclass
class RunResult:
    run_dir: Path | None
    metrics: list
    state: ExperimentState
    transitions: list
    wall_time: float = 0.0


def _stream(seed, name):
    names = ["rollouts", "value", "qinit", "actor", "eval", "demos", "subset"]
    return np.random.default_rng([seed, 17, names.index(name)])


def make_demos(cfg, rng=None):
    """Scripted-teacher demos on the unshifted env, in normalized action units."""
    env = make_env(cfg.env)
    rng = rng if rng is not None else _stream(cfg.seed, "demos")
    noise = TeacherNoise(cfg.bc.teacher_noise_kind, cfg.bc.teacher_noise_scale)
    trajs = [run_episode(env, lambda o: scripted_teacher(cfg.env.kind, o, noise, rng), rng, RewardShaper(1.0, 0.0))
             for _ in range(cfg.bc.n_demos)]
    return DemoDataset(trajs)


def load_bc(cfg):
    path = cfg.bc.checkpoint
    if path is None or not os.path.exists(path):
        raise ConfigError(f"bc.checkpoint does not exist: {path!r}")
    return BcPolicy.load(path)


def online_env(cfg):
    env = make_env(cfg.env)
    d = cfg.driver
    if d.shift_dx != 0.0 or d.shift_width_scale != 1.0:
        env = shift_variant(env, d.shift_dx, d.shift_width_scale)
    return env


def _nanmean(xs):
    xs = [x for x in xs if np.isfinite(x)]
    return float(np.mean(xs)) if xs else float("nan")


class _Artifacts:
    def __init__(self, run_dir):
        self.run_dir = Path(run_dir) if run_dir else None
        self._metrics_file = None
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        self.gate_log = GateLog(self.run_dir / "gate_log.csv" if self.run_dir else None)
        if self.run_dir:
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            (self.run_dir / "demos").mkdir(parents=True, exist_ok=True)
            self._metrics_file = open(self.run_dir / "metrics.csv", "w", newline="")
            self._metrics = csv.writer(self._metrics_file)
            self._metrics.writerow(METRIC_COLUMNS)

    def write_config(self, cfg):
        if self.run_dir:
            (self.run_dir / "config.json").write_text(cfg.to_json() + "\n")

    def metrics_row(self, row):
        if self._metrics_file:
            self._metrics.writerow([row[c] if isinstance(row[c], int) else repr(float(row[c]))
                                    for c in METRIC_COLUMNS])
            self._metrics_file.flush()

    def save_json(self, name, doc):
        if self.run_dir:
            with open(self.run_dir / "checkpoints" / name, "w") as f:
                json.dump(doc, f)

    def demos_path(self, name):
        return self.run_dir / "demos" / name if self.run_dir else None

    def close(self):
        self.gate_log.close()
        if self._metrics_file:
            self._metrics_file.close()


# -- phase 1 ---------------------------------------------------------------

def prepare(cfg, bc=None, demos=None, artifacts=None):
    """Build the experiment state: Q-estimation phase, critic init and replay seeding."""
    v = cfg.variant
    env = online_env(cfg)
    bc = bc if bc is not None else load_bc(cfg)
    if (bc.obs_dim, bc.action_dim) != (env.obs_dim, env.action_dim):
        raise ShapeError(f"BC policy dims ({bc.obs_dim}, {bc.action_dim}) do not match env "
                         f"({env.obs_dim}, {env.action_dim})")
    rl = cfg.rl
    if v.name == "rl_from_scratch" and rl.bc_loss_weight != 0.0:
        rl = dataclasses.replace(rl, bc_loss_weight=0.0)
    shaper = rl.shaper
    replay = ReplayBuffer(env.obs_dim, env.action_dim, rl.replay_capacity)
    learner = SacLearner(env.obs_dim, env.action_dim, rl, seed=cfg.seed,
                         bc=None if v.name == "rl_from_scratch" else bc) if v.learns else None
    q_est, rollouts = None, None
    if v.uses_q_estimation:
        qc = cfg.q_estimation
        rollouts = collect_rollouts(env, bc, qc.n_rollouts, _stream(cfg.seed, "rollouts"), shaper,
                                    use_mode=qc.use_mode, seed=cfg.seed, policy_id=str(cfg.bc.checkpoint or "bc"))
        value = fit_value(rollouts, rl.gamma, qc, _stream(cfg.seed, "value"))
        q_est = QBCEstimate(value, bc, qc.alpha)
        if v.uses_q_init:
            init_q_rl(q_est, rollouts, learner.critic, qc.init_steps, qc.batch_size, qc.learning_rate,
                      _stream(cfg.seed, "qinit"))
        if artifacts is not None and artifacts.run_dir:
            save_rollouts(artifacts.demos_path("rollouts.jsonl"), rollouts)
            artifacts.save_json("value.json", value.to_dict())
    seeded = 0
    if v.seed_fraction > 0:
        if demos is None:
            if cfg.bc.demos is None:
                raise ConfigError("variant.seed_fraction > 0 requires bc.demos")
            demos = read_jsonl(cfg.bc.demos)
        subset = demos.subset(v.seed_fraction, _stream(cfg.seed, "subset"))
        seeded = seed_from_demos(replay, subset, shaper)
        if artifacts is not None and artifacts.run_dir:
            write_jsonl(artifacts.demos_path("seeded.jsonl"), subset.trajectories)
    if cfg.driver.warm_replay_with_rollouts and rollouts is not None:
        for ep in rollouts.episodes:
            for t in range(len(ep)):
                last = t == len(ep) - 1
                replay.push(Transition(ep.observations[t], ep.actions[t], ep.rewards[t], ep.observations[t + 1],
                                       terminal=last and ep.terminated, truncated=last and ep.truncated,
                                       source="bc"))
                seeded += 1
    if artifacts is not None:
        artifacts.save_json("bc.json", bc.to_dict())
    return ExperimentState(cfg, env, bc, q_est, learner, replay, rollouts, seeded)


def _acting_policy(state, bc_action, rl_action):
    cfg = state.cfg
    v = cfg.variant.name
    g = gate_config_for(v, bc_action, rl_action, cfg.driver.critic_agg)
    if state.learner is None:
        return ActingPolicy(v, state.bc, None, state.q_est, None, g)
    actor, critic = state.learner.snapshot()
    return ActingPolicy(v, state.bc, actor, state.q_est, critic, g)


# -- online loop -----------------------------------------------------------

class _Recorder:
    """Periodic evaluation, metrics rows and checkpoints; shared by every loop flavor."""

    def __init__(self, state, artifacts):
        self.state = state
        self.artifacts = artifacts
        self.eval_env = online_env(state.cfg)
        self.n_evals = 0

    def record(self, policy):
        st, d = self.state, self.state.cfg.driver
        aw, lw = st.actor_worker, st.learner_worker
        ev = evaluate(policy.with_modes(d.eval_bc_action, d.eval_rl_action), self.eval_env,
                      d.eval_episodes, np.random.default_rng([st.cfg.seed, 23, self.n_evals]))
        self.n_evals += 1
        window = aw.take_window()
        lwin = lw.take_window()
        row = {
            "env_step": aw.env_step,
            "learner_step": lw.steps,
            "eval_success": ev.success_rate,
            "bc_action_fraction": (sum(s == "bc" for s, _, _ in window) / len(window)) if window else float("nan"),
            "mean_q_bc": _nanmean([q for _, q, _ in window]),
            "mean_q_rl": _nanmean([q for _, _, q in window]),
            "critic_loss": _nanmean([m["critic_loss"] for m in lwin]),
            "actor_loss": _nanmean([m["actor_loss"] for m in lwin]),
        }
        st.metrics.append(row)
        self.artifacts.metrics_row(row)
        if st.cfg.driver.checkpoints and st.learner is not None:
            doc = {"env_step": aw.env_step, "learner_step": lw.steps, "eval_success": ev.success_rate,
                   "actor": policy.actor.to_dict(), "critic": policy.critic.to_dict()}
            self.artifacts.save_json("latest.json", doc)
            if ev.success_rate > st.best_success:
                st.best_success = ev.success_rate
                self.artifacts.save_json("best.json", doc)
        return row


def _workers(state, artifacts):
    cfg, d = state.cfg, state.cfg.driver
    policy = _acting_policy(state, d.gate_bc_action, d.gate_rl_action)
    aw = ActorWorker(state.env, policy, _stream(cfg.seed, "actor"), cfg.rl.shaper, d.actor_flush_every,
                     artifacts.gate_log)
    starts = max(d.learning_starts or 0, cfg.rl.batch_size)
    lw = LearnerWorker(state.learner, state.replay, d.learner_publish_every, starts)
    state.actor_worker, state.learner_worker = aw, lw
    return aw, lw


def _sync_loop(state, recorder):
    aw, lw = state.actor_worker, state.learner_worker
    d = state.cfg.driver
    recorder.record(aw.policy)
    for _ in range(d.total_env_steps):
        msg = aw.act_one()
        if msg is not None:
            state.messages["transition_batches"] += 1
            lw.ingest(msg)
        if lw.ready:
            snap = lw.learn_one()
            if snap is not None:
                state.messages["snapshots"] += 1
                aw.adopt(snap)
        if aw.env_step % d.eval_every == 0 or aw.env_step == d.total_env_steps:
            recorder.record(aw.policy)
    leftover = aw.drain()
    if leftover is not None:
        lw.ingest(leftover)


_STOP = object()


def _async_loop(state, recorder, deterministic):
    """Two threads: the actor thread owns the env, the learner thread owns replay and nets."""
    aw, lw = state.actor_worker, state.learner_worker
    d = state.cfg.driver
    to_learner = queue.Queue(maxsize=d.channel_capacity)
    to_actor = queue.Queue(maxsize=d.channel_capacity)
    errors = []
    stop = threading.Event()

    def put(q, item):
        while not stop.is_set():
            try:
                q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def get(q):
        while True:
            try:
                return q.get(timeout=0.1)
            except queue.Empty:
                if stop.is_set():
                    return _STOP

    def actor_main():
        try:
            recorder.record(aw.policy)
            for _ in range(d.total_env_steps):
                if stop.is_set():
                    break
                if not deterministic:
                    while True:
                        try:
                            snap = to_actor.get_nowait()
                        except queue.Empty:
                            break
                        aw.adopt(snap)
                msg = aw.act_one()
                if not put(to_learner, ("tick", msg)):
                    break
                if deterministic:
                    # lockstep: wait for the learner's reply to this tick
                    reply = get(to_actor)
                    if reply is _STOP:
                        break
                    if reply is not None:
                        aw.adopt(reply)
                if aw.env_step % d.eval_every == 0 or aw.env_step == d.total_env_steps:
                    recorder.record(aw.policy)
            put(to_learner, ("done", aw.drain()))
        except Exception as exc:   # surfaced to the orchestrator
            errors.append(exc)
            stop.set()

    def learner_main():
        try:
            done = False
            while not done:
                item = get(to_learner)
                if item is _STOP:
                    break
                kind, msg = item
                if msg is not None:
                    if kind == "tick":
                        state.messages["transition_batches"] += 1
                    lw.ingest(msg)
                if kind == "done":
                    done = True
                    continue
                snap = None
                if deterministic:
                    if lw.ready:
                        snap = lw.learn_one()
                    if snap is not None:
                        state.messages["snapshots"] += 1
                    put(to_actor, snap)
                else:
                    # free-running: at most one learner step per ingested transition
                    while lw.ready and lw.steps < lw.ingested and to_learner.empty():
                        snap = lw.learn_one()
                        if snap is not None:
                            state.messages["snapshots"] += 1
                            put(to_actor, snap)
        except Exception as exc:
            errors.append(exc)
            stop.set()

    threads = [threading.Thread(target=actor_main, name="q2rl-actor"),
               threading.Thread(target=learner_main, name="q2rl-learner")]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        log.error("async run stopped early: %s", errors[0])
        raise errors[0]


def run(cfg, bc=None, demos=None, run_dir=None):
    """Execute one configured run; writes artifacts when ``run_dir`` is given."""
    t0 = time.perf_counter()
    artifacts = _Artifacts(run_dir)
    try:
        artifacts.write_config(cfg)
        state = prepare(cfg, bc, demos, artifacts)
        _workers(state, artifacts)
        recorder = _Recorder(state, artifacts)
        if cfg.driver.total_env_steps > 0:
            if cfg.driver.mode == "sync":
                _sync_loop(state, recorder)
            else:
                _async_loop(state, recorder, cfg.driver.async_scheduler == "deterministic")
        if run_dir:
            summary = {"messages": state.messages, "env_steps": state.env_step,
                       "learner_steps": state.learner_step, "seeded": state.seeded,
                       "replay_size": len(state.replay), "best_eval_success": state.best_success}
            (Path(run_dir) / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    finally:
        artifacts.close()
    transitions = state.actor_worker.history if state.actor_worker else []
    return RunResult(Path(run_dir) if run_dir else None, state.metrics, state, transitions,
                     time.perf_counter() - t0)


def run_q2rl(cfg, **kw):
    if cfg.variant.name != "full":
        cfg = cfg.replace(variant={"name": "full"})
    return run(cfg, **kw)


def run_variant(cfg, variant, **kw):
    return run(cfg.replace(variant={"name": variant}), **kw)


def run_async(cfg, **kw):
    return run(cfg.replace(driver={"mode": "async"}), **kw)


def train_bc_from_config(cfg, demos=None):
    demos = demos if demos is not None else make_demos(cfg)
    return train_bc(demos, cfg.bc), demos


def load_bundle(run_dir, checkpoint="latest"):
    """Rebuild a stored run's acting policy; returns (config, ActingPolicy)."""
    from .config import parse_config
    from .q_estimation import ValueEstimator

    run_dir = Path(run_dir)
    cfg = parse_config(run_dir / "config.json")
    ck = run_dir / "checkpoints"
    if not (ck / "bc.json").exists():
        raise FileNotFoundError(f"no BC checkpoint in {ck}")
    bc = BcPolicy.load(ck / "bc.json")
    v = cfg.variant
    q_est = None
    if v.uses_q_estimation:
        with open(ck / "value.json") as f:
            q_est = QBCEstimate(ValueEstimator.from_dict(json.load(f)), bc, cfg.q_estimation.alpha)
    actor = critic = None
    if v.learns:
        path = ck / f"{checkpoint}.json"
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        with open(path) as f:
            doc = json.load(f)
        actor, critic = TanhGaussianActor.from_dict(doc["actor"]), CriticEnsemble.from_dict(doc["critic"])
    d = cfg.driver
    g = gate_config_for(v.name, d.eval_bc_action, d.eval_rl_action, d.critic_agg)
    return cfg, ActingPolicy(v.name, bc, actor, q_est, critic, g)
