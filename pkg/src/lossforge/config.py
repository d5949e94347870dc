"""Run configuration: dataclasses plus schema-validated JSON loading.

Defaults: a population of 25 evolved for 50 generations with 70% crossover,
25% mutation and 5% elitism; 250 meta gradient steps with one base step per
meta step; 500-step partial training sessions for fitness. Every value is
overridable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .filters import FilterConfig
from .metaopt import TASK_LOSSES, MetaTrainConfig


@dataclass
class GpConfig:
    population_size: int = 25
    generations: int = 50
    crossover_rate: float = 0.7
    mutation_rate: float = 0.25
    elitism_rate: float = 0.05
    tournament_size: int = 3
    init_depth: tuple = (2, 5)
    max_depth: int = 10
    rng_seed: int = 0

    def validate(self):
        for name in ("crossover_rate", "mutation_rate", "elitism_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"gp.{name}", "must be within [0, 1]")
        for name in ("population_size", "generations", "tournament_size",
                     "max_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"gp.{name}", "must be >= 1")
        dmin, dmax = self.init_depth
        if not (1 <= dmin <= dmax <= self.max_depth):
            raise ConfigError("gp.init_depth",
                              f"must satisfy 1 <= min <= max <= {self.max_depth}")
        if 0 < self.elitism_rate * self.population_size < 1:
            raise ConfigError("gp.elitism_rate",
                              "elitism enabled but rate * population_size < 1")
        return self

    def elite_count(self) -> int:
        if self.elitism_rate <= 0:
            return 0
        return math.ceil(self.elitism_rate * self.population_size)


@dataclass
class TrainConfig:
    """Base-learner and optimizer settings for fitness / meta-test training."""

    learner: str = "mlp"
    hidden: tuple = (32,)
    activation: str = "relu"
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64

    def validate(self):
        if self.learner not in ("mlp", "logistic", "linear"):
            raise ConfigError("train.learner", "must be mlp, logistic or linear")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError("train.activation", "must be relu or tanh")
        if self.lr <= 0:
            raise ConfigError("train.lr", "must be > 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("train.momentum", "must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        return self

    @property
    def hidden_layers(self) -> tuple:
        return () if self.learner in ("logistic", "linear") else tuple(self.hidden)


@dataclass
class EvolutionConfig:
    gp: GpConfig = field(default_factory=GpConfig)
    meta: MetaTrainConfig = field(default_factory=MetaTrainConfig)
    filters: FilterConfig = field(default_factory=FilterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    local_search: bool = True
    activation: str = "identity"     # loss-network output activation
    workers: int = 1
    dataset: dict = field(default_factory=dict)

    def validate(self):
        self.gp.validate()
        try:
            self.meta.validate()
        except ValueError as exc:
            raise ConfigError("meta", str(exc)) from exc
        try:
            self.filters.validate()
        except ValueError as exc:
            raise ConfigError("filters", str(exc)) from exc
        self.train.validate()
        if self.activation not in ("identity", "softplus"):
            raise ConfigError("activation", "must be identity or softplus")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if self.meta.task_loss not in TASK_LOSSES:
            raise ConfigError("meta.task_loss",
                              f"must be one of {TASK_LOSSES}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gp"]["init_depth"] = list(self.gp.init_depth)
        d["train"]["hidden"] = list(self.train.hidden)
        return d


_SECTION_TYPES = {
    "gp": GpConfig,
    "meta": MetaTrainConfig,
    "filters": FilterConfig,
    "train": TrainConfig,
}

_TUPLE_FIELDS = {("gp", "init_depth"), ("train", "hidden")}


def _build_section(name, cls, data):
    if not isinstance(data, dict):
        raise ConfigError(name, "must be an object")
    obj = cls()
    known = set(vars(obj))
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
        if (name, key) in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name}.{key}", "must be a list")
            value = tuple(value)
        expected = type(getattr(obj, key))
        if expected in (int, float) and isinstance(value, bool):
            raise ConfigError(f"{name}.{key}", "must be a number")
        if expected is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, expected) and (name, key) not in _TUPLE_FIELDS:
            raise ConfigError(f"{name}.{key}",
                              f"expected {expected.__name__}, got {type(value).__name__}")
        setattr(obj, key, value)
    return obj


def config_from_dict(data: dict) -> EvolutionConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    cfg = EvolutionConfig()
    for key, value in data.items():
        if key in _SECTION_TYPES:
            setattr(cfg, key, _build_section(key, _SECTION_TYPES[key], value))
        elif key == "local_search":
            if not isinstance(value, bool):
                raise ConfigError("local_search", "must be a boolean")
            cfg.local_search = value
        elif key == "activation":
            cfg.activation = value
        elif key == "workers":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError("workers", "must be an integer")
            cfg.workers = value
        elif key == "dataset":
            if not isinstance(value, dict):
                raise ConfigError("dataset", "must be an object")
            cfg.dataset = value
        else:
            raise ConfigError(key, "unknown field")
    return cfg.validate()


def load_config(path) -> EvolutionConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc.msg} "
                                        f"(line {exc.lineno})") from exc
    return config_from_dict(data)
