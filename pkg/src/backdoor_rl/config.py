"""Experiment configuration: TOML file, environment overrides, seeds, manifests.

Precedence, lowest first: built-in defaults, the TOML file, ``BACKDOOR_RL_*``
environment variables, command-line flags. Every section is a dataclass and
unknown keys are rejected with the offending dotted path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacker import AttackConfig
from .dqn import DqnConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

ENV_PREFIX = "BACKDOOR_RL_"
ATTACKERS = ("proposed", "neighbourhood", "minmax", "random", "none")

# fixed spawn keys: adding a component never shifts an existing stream
COMPONENT_KEYS = {
    "env": 0,
    "agent": 1,
    "explore": 2,
    "attacker": 3,
    "eval": 4,
    "intensity": 5,
    "baseline": 6,
    "tabular": 7,
    "warmup": 8,
}


class ConfigError(ValueError):
    pass


@dataclass
class TriggerConfig:
    coordinate: int = 0
    threshold: float = 0.5
    override_value: float = 0.6
    override_step: int = 0


@dataclass
class BaselineConfig:
    neighbourhood_penalty: float = 10.0
    minmax_r_max: float = 5.0
    minmax_r_min: float = -15.0
    random_bound: float = 20.0


@dataclass
class TrainingConfig:
    attacker: str = "proposed"
    poison_mode: str = "batch"
    min_normal_return: float = 400.0


@dataclass
class EvalConfig:
    episodes: int = 10
    intensity_samples: int = 1000


@dataclass
class SweepConfig:
    epsilons: list = field(default_factory=lambda: [0.01, 0.1, 0.25, 0.5, 2.0, 4.0])
    compare_epsilon: float = 0.5


@dataclass
class TabularInstance:
    n_states: int = 2
    slip: float = 0.0
    trigger_states: list = field(default_factory=lambda: [0])
    bad_action: int = 0


@dataclass
class TabularConfig:
    gamma: float = 0.9
    epsilon: float = 0.5
    rho: float = 200.0
    resolution: float = 0.1
    bounds: float = 0.0  # 0 selects 1.5 x max |Q*|
    instances: list = field(default_factory=lambda: [
        TabularInstance(2), TabularInstance(3)])


@dataclass
class ExperimentConfig:
    name: str = "cartpole"
    env: str = "cartpole"
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = "runs"
    dqn: DqnConfig = field(default_factory=DqnConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    tabular: TabularConfig = field(default_factory=TabularConfig)

    def validate(self) -> "ExperimentConfig":
        if self.env != "cartpole":
            raise ConfigError(f"env: only 'cartpole' is supported, got {self.env!r}")
        if self.training.attacker not in ATTACKERS:
            raise ConfigError(f"training.attacker: must be one of {ATTACKERS}")
        if self.training.poison_mode not in ("insertion", "batch"):
            raise ConfigError("training.poison_mode: must be 'insertion' or 'batch'")
        if self.evaluation.episodes < 1:
            raise ConfigError("evaluation.episodes: must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds: must not be empty")
        for inst in self.tabular.instances:
            if inst.n_states < 1 or inst.bad_action not in (0, 1):
                raise ConfigError("tabular.instances: bad n_states or bad_action")
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    return obj


def _coerce(value, default, path: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("1", "true", "yes", "on", "0", "false", "no", "off"):
            return value.lower() in ("1", "true", "yes", "on")
        raise ConfigError(f"{path}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
            value = [_coerce(v, default[0], f"{path}[{i}]") for i, v in enumerate(value)]
        return type(default)(value)
    return value


def _merge(obj, data: dict, path: str = ""):
    """Return a copy of dataclass ``obj`` updated from ``data``."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a table")
    names = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"{where}: unknown key")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            updates[key] = _merge(current, value, where)
        elif key == "instances":
            if not isinstance(value, list):
                raise ConfigError(f"{where}: expected a list of tables")
            updates[key] = [_merge(TabularInstance(), v, f"{where}[{i}]")
                            for i, v in enumerate(value)]
        else:
            updates[key] = _coerce(value, current, where)
    try:
        return dataclasses.replace(obj, **updates)
    except ValueError as exc:  # __post_init__ validation of the section
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def load_config(path=None, overrides: dict | None = None,
                environ: dict | None = None) -> ExperimentConfig:
    """Defaults, then the TOML file, then environment, then ``overrides``."""
    cfg = ExperimentConfig()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        cfg = _merge(cfg, data)
    cfg = _merge(cfg, env_overrides(os.environ if environ is None else environ))
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg.validate()


# flag name -> dotted config path
FLAG_PATHS = {
    "seed": "seed",
    "seeds": "seeds",
    "out": "out",
    "attacker": "training.attacker",
    "epsilon": "attack.epsilon",
    "episodes": "evaluation.episodes",
}


def nest(flat: dict) -> dict:
    """{'a.b': 1} -> {'a': {'b': 1}}."""
    out: dict = {}
    for dotted, value in flat.items():
        node = out
        *heads, last = dotted.split(".")
        for h in heads:
            node = node.setdefault(h, {})
        node[last] = value
    return out


def env_overrides(environ) -> dict:
    """Overrides from ``BACKDOOR_RL_<FLAG>`` variables (the flags' mirror)."""
    flat = {}
    for flag, dotted in FLAG_PATHS.items():
        value = environ.get(ENV_PREFIX + flag.upper())
        if value is not None and value != "":
            if flag == "seeds":
                value = [int(v) for v in value.split(",") if v.strip()]
            flat[dotted] = value
    return nest(flat)


def seed_sequence(master: int, component: str) -> np.random.SeedSequence:
    if component not in COMPONENT_KEYS:
        raise KeyError(f"unknown seed component {component!r}")
    return np.random.SeedSequence(int(master), spawn_key=(COMPONENT_KEYS[component],))


def component_rng(master: int, component: str, *extra: int) -> np.random.Generator:
    """Independent generator for one component of a run.

    ``extra`` integers (e.g. an attacker index) subdivide the stream further.
    """
    ss = seed_sequence(master, component)
    if extra:
        ss = np.random.SeedSequence(ss.entropy, spawn_key=ss.spawn_key + tuple(int(e) for e in extra))
    return np.random.default_rng(ss)


def component_seed(master: int, component: str, *extra: int) -> int:
    """A 32-bit integer seed drawn from the component's stream."""
    return int(component_rng(master, component, *extra).integers(2**32))


def versions() -> dict:
    import numba

    from . import __version__
    from ._accel import backend_name

    return {"python": platform.python_version(), "numpy": np.__version__,
            "numba": numba.__version__, "backdoor_rl": __version__, "backend": backend_name()}


def write_manifest(directory, cfg: ExperimentConfig, command: list, seed: int | None,
                   extra: dict | None = None) -> Path:
    """manifest.json with everything needed to rerun ``command`` exactly."""
    path = Path(directory) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {"command": list(command), "seed": seed, "config_hash": cfg.hash(),
            "config": cfg.to_dict(), "versions": versions()}
    if extra:
        data.update(extra)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))
    return path


def config_from_manifest(path) -> tuple[ExperimentConfig, list]:
    data = json.loads(Path(path).read_text())
    cfg = _merge(ExperimentConfig(), data["config"]).validate()
    return cfg, data["command"]
