"""Experiment configuration: YAML/JSON documents to validated dataclasses."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..perception import PerceptionConfig, PerceptionEnv
from ..synthetic import SyntheticConfig, SyntheticEnv

HYPERPARAMETER_GRID = {
    "learning_rate": [0.0001, 0.0004, 0.001, 0.005],
    "minibatch": [5, 10, 20, 50, 100],
    "l2_weight_decay": [0.01, 0.05, 0.1, 1.0],
}
LEARNER_GRID = {
    "global_cb": {"lam": [0.1, 0.3, 1.0, 5.0, 10.0]},
    "per_module_cb": {"ent_wt": [0.01, 0.03, 0.1, 0.3, 1.0]},
}
LEARNER_KINDS = tuple(LEARNER_GRID)
ENV_KINDS = ("synthetic", "perception")
EVAL_PROTOCOLS = ("running_average", "heldout")


class ConfigError(ValueError):
    pass


def default_grid(kind: str) -> dict[str, list]:
    return {**HYPERPARAMETER_GRID, **LEARNER_GRID[kind]}


@dataclass
class LearnerConfig:
    kind: str = "per_module_cb"
    learning_rate: float = 0.001
    minibatch: int = 10
    l2_weight_decay: float = 0.01
    lam: float = 10.0
    ent_wt: float = 0.01
    hidden_dim: int | None = None
    use_critic: bool = True
    mode: str = "concurrent"

    def off_grid(self) -> list[str]:
        grid = default_grid(self.kind)
        return [k for k, vals in grid.items() if getattr(self, k) not in vals]


@dataclass
class EvalConfig:
    protocol: str = "running_average"
    interval: int = 1000
    seed: int = 12345


@dataclass
class BaselineConfig:
    samples_per_action: int = 1000
    max_epochs: int = 200
    monte_carlo_episodes: int = 100_000
    seed: int | None = None


@dataclass
class ExperimentConfig:
    environment: dict[str, Any] = field(default_factory=lambda: {"kind": "synthetic", "n": 4})
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    episodes: int = 100_000
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    grid: dict[str, list] | None = None
    allow_off_grid: bool = False
    name: str = "experiment"

    @property
    def env_kind(self) -> str:
        return self.environment.get("kind", "synthetic")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = copy.deepcopy(doc or {})
        known = {"environment", "learner", "episodes", "eval", "seeds", "baseline", "grid", "allow_off_grid", "name"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kw: dict[str, Any] = {}
            if "environment" in doc:
                kw["environment"] = dict(doc["environment"])
            if "learner" in doc:
                kw["learner"] = LearnerConfig(**doc["learner"])
            if "eval" in doc:
                kw["eval"] = EvalConfig(**doc["eval"])
            if "baseline" in doc:
                kw["baseline"] = BaselineConfig(**doc["baseline"])
            for key in ("episodes", "seeds", "grid", "allow_off_grid", "name"):
                if key in doc:
                    kw[key] = doc[key]
            cfg = cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.env_kind not in ENV_KINDS:
            raise ConfigError(f"environment.kind must be one of {ENV_KINDS}")
        if self.learner.kind not in LEARNER_KINDS:
            raise ConfigError(f"learner.kind must be one of {LEARNER_KINDS}")
        if int(self.episodes) <= 0:
            raise ConfigError("episodes must be positive")
        if self.learner.minibatch <= 0:
            raise ConfigError("learner.minibatch must be positive")
        if self.eval.protocol not in EVAL_PROTOCOLS:
            raise ConfigError(f"eval.protocol must be one of {EVAL_PROTOCOLS}")
        if self.eval.interval <= 0:
            raise ConfigError("eval.interval must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.allow_off_grid:
            bad = self.learner.off_grid()
            if bad:
                raise ConfigError(
                    f"hyperparameters {bad} are outside the declared grid; set allow_off_grid: true to override"
                )
        self.make_env()  # environment parameters are validated by construction

    def make_env(self):
        env_doc = {k: v for k, v in self.environment.items() if k != "kind"}
        try:
            if self.env_kind == "synthetic":
                return SyntheticEnv(SyntheticConfig(**env_doc))
            return PerceptionEnv(PerceptionConfig.from_dict(env_doc))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid environment config: {exc}") from exc

    def with_overrides(self, **changes) -> "ExperimentConfig":
        doc = self.to_dict()
        for key, value in changes.items():
            if value is None:
                continue
            if key in ("learning_rate", "minibatch", "l2_weight_decay", "lam", "ent_wt"):
                doc["learner"][key] = value
            elif key == "eval_interval":
                doc["eval"]["interval"] = value
            else:
                doc[key] = value
        return ExperimentConfig.from_dict(doc)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return ExperimentConfig.from_dict(doc)
