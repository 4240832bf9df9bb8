"""Per-step choice between the BC action and the RL action by comparing their Q-values."""
import csv
from dataclasses import dataclass

import numpy as np

from .errors import NumericError


@dataclass(frozen=True)
class GateConfig:
    bc_action: str = "sample"     # sample | mode
    rl_action: str = "mode"       # sample | mode
    critic_agg: str = "mean"      # mean | min
    bc_scorer: str = "q_bc"       # q_bc | critic (the critic also scores a_BC)
    force_q_bc: float | None = None
    force_q_rl: float | None = None

    def __post_init__(self):
        for name, allowed in [("bc_action", ("sample", "mode")), ("rl_action", ("sample", "mode")),
                              ("critic_agg", ("mean", "min")), ("bc_scorer", ("q_bc", "critic"))]:
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}")


@dataclass(frozen=True)
class GateDecision:
    chosen_action: np.ndarray
    source: str
    q_bc_value: float
    q_rl_value: float
    a_bc: np.ndarray
    a_rl: np.ndarray


def choose(q_bc_value, q_rl_value):
    """'bc' only on a strict win; equality goes to RL."""
    return "bc" if q_bc_value > q_rl_value else "rl"


def gate(s, bc, rl_actor, q_bc_est, critic, rng, cfg=GateConfig()):
    s = np.asarray(s, dtype=np.float64)
    a_bc = np.clip(bc.sample(s, rng, use_mode=cfg.bc_action == "mode"), -1.0, 1.0)
    a_rl = rl_actor.sample(s, rng, use_mode=cfg.rl_action == "mode")
    if cfg.force_q_bc is not None:
        v_bc = float(cfg.force_q_bc)
    elif cfg.bc_scorer == "critic":
        v_bc = float(critic.aggregate(s, a_bc, cfg.critic_agg)[0])
    else:
        v_bc = float(q_bc_est.batch(s, a_bc)[0])
    if cfg.force_q_rl is not None:
        v_rl = float(cfg.force_q_rl)
    else:
        v_rl = float(critic.aggregate(s, a_rl, cfg.critic_agg)[0])
    bad = [name for name, v, forced in [("q_bc", v_bc, cfg.force_q_bc), ("q_rl", v_rl, cfg.force_q_rl)]
           if forced is None and not np.isfinite(v)]
    if bad:
        raise NumericError(f"non-finite gate value for {', '.join(bad)}",
                           {"obs": s.tolist(), "a_bc": a_bc.tolist(), "a_rl": a_rl.tolist(),
                            "q_bc": v_bc, "q_rl": v_rl})
    source = choose(v_bc, v_rl)
    chosen = a_bc if source == "bc" else a_rl
    return GateDecision(chosen.copy(), source, v_bc, v_rl, a_bc, a_rl)


class GateLog:
    """Per-step CSV rows: env_step, source, q_bc_value, q_rl_value."""

    HEADER = ("env_step", "source", "q_bc_value", "q_rl_value")

    def __init__(self, path=None):
        self.rows = []
        self._file = open(path, "w", newline="") if path else None
        self._writer = csv.writer(self._file) if self._file else None
        if self._writer:
            self._writer.writerow(self.HEADER)

    def record(self, env_step, decision):
        row = (env_step, decision.source, repr(decision.q_bc_value), repr(decision.q_rl_value))
        self.rows.append(row)
        if self._writer:
            self._writer.writerow(row)

    def bc_fraction(self):
        if not self.rows:
            return float("nan")
        return sum(r[1] == "bc" for r in self.rows) / len(self.rows)

    def close(self):
        if self._file:
            self._file.close()
            self._file = None
