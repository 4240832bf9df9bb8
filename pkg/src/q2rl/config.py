"""Strict JSON run configuration: six sections plus a seed, defaults filled, unknown keys rejected."""
import dataclasses
import json
import typing
from dataclasses import dataclass, field, fields

from .bc import BcConfig
from .envs import EnvSpec, point_reach_spec, slot_insert_spec
from .errors import ConfigError
from .q_estimation import QEstConfig
from .sac import RLConfig

VARIANTS = ("full", "no_gating", "no_qinit", "ibrl_style", "bc_only", "rl_from_scratch")


@dataclass
class BcSection(BcConfig):
    n_demos: int = 50
    teacher_noise_kind: str = "gaussian"
    teacher_noise_scale: float = 0.75
    demos: str | None = None
    checkpoint: str | None = None


@dataclass
class DriverConfig:
    total_env_steps: int = 20_000
    eval_every: int = 2000
    eval_episodes: int = 20
    learning_starts: int | None = None     # None means rl.batch_size
    mode: str = "sync"                     # sync | async
    async_scheduler: str = "deterministic"  # deterministic | free
    actor_flush_every: int = 30
    learner_publish_every: int = 30
    channel_capacity: int = 64
    warm_replay_with_rollouts: bool = False
    shift_dx: float = 0.0
    shift_width_scale: float = 1.0
    gate_bc_action: str = "sample"
    gate_rl_action: str = "mode"
    eval_bc_action: str = "sample"
    eval_rl_action: str = "mode"
    critic_agg: str = "mean"
    checkpoints: bool = True

    def __post_init__(self):
        if self.actor_flush_every < 1 or self.learner_publish_every < 1:
            raise ConfigError("actor_flush_every and learner_publish_every must be positive")
        if self.mode not in ("sync", "async"):
            raise ConfigError(f"driver.mode must be 'sync' or 'async', got {self.mode!r}")
        if self.async_scheduler not in ("deterministic", "free"):
            raise ConfigError(f"driver.async_scheduler must be 'deterministic' or 'free', got {self.async_scheduler!r}")
        if self.eval_episodes < 1 or self.eval_every < 1 or self.total_env_steps < 0:
            raise ConfigError("eval_episodes and eval_every must be positive, total_env_steps non-negative")


@dataclass
class VariantConfig:
    name: str = "full"
    seed_fraction: float = 0.0

    def __post_init__(self):
        if self.name not in VARIANTS:
            raise ConfigError(f"unknown variant {self.name!r}; expected one of {', '.join(VARIANTS)}")
        if not 0.0 <= self.seed_fraction <= 1.0:
            raise ConfigError("variant.seed_fraction must lie in [0, 1]")

    @property
    def uses_q_estimation(self):
        return self.name in ("full", "no_gating", "no_qinit")

    @property
    def uses_q_init(self):
        return self.name in ("full", "no_gating")

    @property
    def learns(self):
        return self.name != "bc_only"


SECTIONS = {
    "env": EnvSpec,
    "bc": BcSection,
    "q_estimation": QEstConfig,
    "rl": RLConfig,
    "driver": DriverConfig,
    "variant": VariantConfig,
}


@dataclass
class RunConfig:
    env: EnvSpec = field(default_factory=slot_insert_spec)
    bc: BcSection = field(default_factory=BcSection)
    q_estimation: QEstConfig = field(default_factory=QEstConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    driver: DriverConfig = field(default_factory=DriverConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    seed: int = 0

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            out[name] = _section_to_dict(getattr(self, name))
        out["seed"] = self.seed
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **sections):
        """Copy with whole sections or section fields replaced, e.g. ``replace(rl={"utd": 2})``."""
        doc = self.to_dict()
        for key, val in sections.items():
            if isinstance(val, dict):
                doc[key].update(val)
            else:
                doc[key] = _section_to_dict(val) if dataclasses.is_dataclass(val) else val
        return from_dict(doc)


def _section_to_dict(obj):
    return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _coerce(where, value, tp):
    args = typing.get_args(tp)
    if args:
        if value is None and type(None) in args:
            return None
        tp = next(t for t in args if t is not type(None))
    if value is None:
        raise ConfigError(f"{where} may not be null")
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if tp is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{where} has unsupported type {tp!r}")


def _build_section(name, doc, base=None):
    cls = SECTIONS[name]
    if not isinstance(doc, dict):
        raise ConfigError(f"section {name!r} must be an object")
    base = base if base is not None else (slot_insert_spec() if cls is EnvSpec else cls())
    known = {f.name for f in fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key!s} ({key!r} is not a recognized {name} field)")
    kwargs = {}
    for f in fields(cls):
        default = getattr(base, f.name)
        kwargs[f.name] = _coerce(f"{name}.{f.name}", doc[f.name], f.type) if f.name in doc else default
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from None


def from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    for key in doc:
        if key not in SECTIONS and key != "seed":
            raise ConfigError(f"unknown key {key!r} at top level")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    env_doc = doc.get("env", {})
    env_base = None
    if isinstance(env_doc, dict) and env_doc.get("kind") == "point_reach":
        env_base = point_reach_spec()
    sections = {name: _build_section(name, doc.get(name, {}), env_base if name == "env" else None)
                for name in SECTIONS}
    return RunConfig(seed=seed, **sections)


def parse_config(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(doc)
