"""``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Keys and defaults are the fields of :class:`RunConfig`. Per-task advantage
thresholds use ``epsilon.task_<m> = <float>``. ``tasks`` is a comma list of
task ids served by the fleet (actors are assigned round-robin).
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

from .algorithms import DEFAULT_EPSILON, DEFAULT_GAMMA
from .learner import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    num_tasks: int = 3
    alpha: float = 1.5
    window: int = 200
    clip_lo: float = 0.2
    clip_hi: float = 0.8
    publish_interval: int = 25
    lr: float = 0.05
    batch_size: int = 64
    budget: int = 3000
    algorithm: str = "hgdagger"
    online_capacity: int = 200_000
    # algorithms
    gamma: float = DEFAULT_GAMMA
    beta_rollout: float = 1.0
    beta_eval: float = 2.0
    epsilon: dict = field(default_factory=dict)
    # environment and fleet
    horizon: int = 80
    gate_window: int = 3
    tasks: tuple = (0, 1, 2)
    # demo corpus and pretraining
    demo_per_task: int = 600
    demo_seed: int = 0
    pretrain_fraction: float = 0.5
    pretrain_epochs: int = 16
    pretrain_lr: float = 0.05
    # simulated clock and evaluation
    sim_rate: float = 30.0  # env steps per simulated second
    learner_rate: float = 2.0  # learner steps per env step of one actor
    eval_interval: int = 200
    eval_trials: int = 50
    eval_seed: int = 900_000
    target: float = 0.8

    def __post_init__(self):
        if self.algorithm not in ("hgdagger", "recap"):
            raise ConfigError(f"algorithm must be hgdagger or recap, got {self.algorithm!r}")
        self.tasks = tuple(int(t) for t in self.tasks)
        if not self.tasks or any(not 0 <= t < self.num_tasks for t in self.tasks):
            raise ConfigError("tasks must be nonempty ids in [0, num_tasks)")
        if not 0 < self.pretrain_fraction <= 1:
            raise ConfigError("pretrain_fraction must lie in (0, 1]")
        for name in ("sim_rate", "learner_rate"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.eval_interval < 1 or self.eval_trials < 1:
            raise ConfigError("eval_interval and eval_trials must be >= 1")

    def train_config(self, total_steps: int | None = None) -> TrainConfig:
        return TrainConfig(num_tasks=self.num_tasks, batch_size=self.batch_size,
                           publish_interval=self.publish_interval, lr=self.lr,
                           total_steps=self.budget if total_steps is None else total_steps,
                           algorithm=self.algorithm, alpha=self.alpha, window=self.window,
                           clip_lo=self.clip_lo, clip_hi=self.clip_hi,
                           online_capacity=self.online_capacity, seed=self.seed)

    def epsilon_for(self, task: int) -> float:
        return float(self.epsilon.get(task, DEFAULT_EPSILON))

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    default = _FIELDS[name].default
    if name == "tasks":
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values: dict = {}
    eps = dict(base.epsilon) if base else {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key = value")
        try:
            if key.startswith("epsilon.task_"):
                eps[int(key[len("epsilon.task_"):])] = float(raw)
            elif key in _FIELDS and key != "epsilon":
                values[key] = _coerce(key, raw)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from None
    cfg = dataclasses.replace(base, **values) if base else RunConfig(**values)
    cfg.epsilon = eps
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name in _FIELDS:
        if name == "epsilon":
            continue
        v = getattr(cfg, name)
        lines.append(f"{name} = {','.join(map(str, v)) if name == 'tasks' else v}")
    lines += [f"epsilon.task_{m} = {e}" for m, e in sorted(cfg.epsilon.items())]
    return "\n".join(lines) + "\n"
