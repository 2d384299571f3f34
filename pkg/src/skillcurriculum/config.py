"""Run configuration: a JSON document with a fixed schema.

Unknown keys, wrong types and out-of-range values raise ``ConfigError`` with
the line of the offending key when it can be located in the source text.
"""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .continual import MODES, ContinualConfig
from .envs import TASK_NAMES, TaskSpec, make_task_space
from .mixture import PretrainConfig
from .trainer import BCConfig, PpoConfig

PPO_KEYS = tuple(f.name for f in dataclasses.fields(PpoConfig) if f.name not in ("budget", "success_threshold"))
TASK_KEYS = tuple(f.name for f in dataclasses.fields(TaskSpec) if f.name != "name")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainSection:
    m: int = 4
    k: Optional[int] = None
    dataset_size: int = 20_000
    epochs: int = 100
    lr: float = 1e-3
    minibatch_size: int = 256


@dataclass(frozen=True)
class AdaptSection:
    expand_k: int = 0
    tasks: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    budget: int = 200_000
    success_threshold: float = 0.9
    margin_fraction: float = 0.1
    random_retries: int = 2
    mode: str = "optimal"
    output_dir: str = "out"
    jobs: int = 1
    tasks: tuple[str, ...] = TASK_NAMES
    ppo: dict = field(default_factory=dict)
    task_params: dict = field(default_factory=dict)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        unknown = sorted(set(self.tasks) - set(TASK_NAMES))
        if unknown or not self.tasks or len(set(self.tasks)) != len(self.tasks):
            raise ConfigError(f"tasks must be distinct names from {TASK_NAMES}")
        try:
            self.ppo_config()
            self.continual_config()
            self.task_space()
            if self.adapt.expand_k < 0:
                raise ValueError("adapt.expand_k must be nonnegative")
            if self.pretrain.m < 1:
                raise ValueError("pretrain.m must be >= 1")
            BCConfig(self.pretrain.epochs, self.pretrain.lr, self.pretrain.minibatch_size)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(budget=self.budget, success_threshold=self.success_threshold, **self.ppo)

    def continual_config(self) -> ContinualConfig:
        return ContinualConfig(self.ppo_config(), self.margin_fraction, self.random_retries)

    def task_space(self) -> dict[str, TaskSpec]:
        return make_task_space(self.tasks, **self.task_params)

    def pretrain_config(self, tasks) -> PretrainConfig:
        p = self.pretrain
        return PretrainConfig(tuple(tasks), p.k, p.dataset_size, BCConfig(p.epochs, p.lr, p.minibatch_size))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


def _line_of(text: str, key: str) -> Optional[int]:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return None if m is None else text.count("\n", 0, m.start()) + 1


def _where(text: str, key: str) -> str:
    line = _line_of(text, key)
    return f"line {line}: " if line else ""


_SCALARS = {"seed": int, "budget": int, "success_threshold": float, "margin_fraction": float,
            "random_retries": int, "mode": str, "output_dir": str, "jobs": int}


def _check_type(value, kind, name: str, text: str):
    ok = isinstance(value, kind) and not isinstance(value, bool)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        ok, value = True, float(value)
    if not ok:
        raise ConfigError(f"{_where(text, name)}{name} must be {kind.__name__}, got {value!r}")
    return value


def _section(raw: dict, cls, name: str, text: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{_where(text, name)}{name} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{_where(text, key)}unknown key {name}.{key!r}; allowed: {sorted(allowed)}")
    if "tasks" in raw and raw["tasks"] is not None:
        raw = {**raw, "tasks": tuple(raw["tasks"])}
    return cls(**raw)


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON run configuration."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("line 1: configuration must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(RunConfig)}
    kwargs: dict[str, Any] = {}
    for key, value in doc.items():
        if key not in allowed:
            raise ConfigError(f"{_where(text, key)}unknown key {key!r}; allowed: {sorted(allowed)}")
        if key in _SCALARS:
            kwargs[key] = _check_type(value, _SCALARS[key], key, text)
        elif key == "tasks":
            if not isinstance(value, list) or not all(isinstance(t, str) for t in value):
                raise ConfigError(f"{_where(text, key)}tasks must be a list of task names")
            kwargs[key] = tuple(value)
        elif key in ("ppo", "task_params"):
            known = PPO_KEYS if key == "ppo" else TASK_KEYS
            if not isinstance(value, dict):
                raise ConfigError(f"{_where(text, key)}{key} must be an object")
            for sub in value:
                if sub not in known:
                    raise ConfigError(f"{_where(text, sub)}unknown key {key}.{sub!r}; allowed: {sorted(known)}")
            kwargs[key] = dict(value)
        elif key == "pretrain":
            kwargs[key] = _section(value, PretrainSection, key, text)
        elif key == "adapt":
            kwargs[key] = _section(value, AdaptSection, key, text)
    try:
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())
