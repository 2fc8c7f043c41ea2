"""Experiment configuration: named profiles, a flat key = value file format and a stable hash."""
from __future__ import annotations

import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, fields, replace

METHODS = ("neat", "hyperneat", "cmaes", "mapelites", "ppo", "gcppo", "oracle")
GATES_TASKS = ("parity", "alu")
ARENA_TASKS = ("locomotion", "deceptive", "stones")
TASKS = GATES_TASKS + ARENA_TASKS
PROFILES = ("desk", "paper")

DEFAULT_ARENA = {"locomotion": "locomotion", "deceptive": "easy_maze", "stones": "hard_maze"}
GATES_BUDGET = 300_000  # episodes
ARENA_BUDGET = 1_000_000  # environment steps


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    task: str
    profile: str = "desk"
    curriculum: bool = True
    n_bits: int = 6
    arena: str | None = None
    seeds: int = 10
    budget: int | None = None
    out_dir: str = "runs"
    # NEAT and HyperNEAT
    pop_size: int | None = None
    species_target: int | None = None
    prob_add_conn: float = 0.2
    prob_del_conn: float = 0.2
    prob_mutate_conn: float = 0.1
    prob_mutate_node: float = 0.1
    prob_del_node: float = 0.1
    prob_add_node: float = 0.2
    weight_sigma: float = 0.5
    compat_threshold: float = 3.0
    stagnation: int = 20
    stagnation_delta: float | None = None
    neat_activation: str | None = None
    # HyperNEAT substrate
    hyper_hidden: int | None = None
    hyper_threshold: float = 0.2
    hyper_w_max: float = 3.0
    # CMA-ES
    cma_hidden: int = 24
    cma_sigma0: float = 0.5
    cma_popsize: int | None = None
    # MAP-Elites
    me_batch: int = 100
    me_sigma: float = 0.1
    me_hidden: int = 32
    me_depth: int = 4
    # PPO
    ppo_batch: int | None = None
    ppo_unroll: int | None = None
    ppo_minibatches: int = 32
    ppo_epochs: int = 4
    ppo_lr: float = 3e-4
    ppo_entropy: float = 1e-2
    ppo_clip: float = 0.2
    ppo_gamma: float | None = None
    ppo_gae_lambda: float = 0.95
    ppo_reward_scaling: float | None = None
    ppo_eval_every: int = 10

    @property
    def is_gates(self) -> bool:
        return self.task in GATES_TASKS

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {', '.join(PROFILES)}")
        if self.budget is not None and self.budget <= 0:
            raise ConfigError("budget must be a positive number of evaluations")
        if self.seeds < 1:
            raise ConfigError("need at least one seed")
        if self.task == "parity" and self.n_bits < 2:
            raise ConfigError("parity needs n_bits >= 2")
        if self.method == "gcppo" and self.task != "stones":
            raise ConfigError(f"method 'gcppo' needs goals (stepping-stone coordinates); task {self.task!r} provides none")
        if self.method == "mapelites" and self.is_gates:
            raise ConfigError(f"method 'mapelites' needs a 2D behaviour descriptor; task {self.task!r} has no position")
        if self.method == "oracle" and not self.is_gates:
            raise ConfigError(f"method 'oracle' needs a ground-truth circuit; task {self.task!r} has none")
        return self

    def resolve(self) -> "ExperimentConfig":
        """Fill every automatic setting from the profile and task."""
        self.validate()
        paper = self.profile == "paper"
        gates = self.is_gates
        auto = {
            "arena": None if gates else DEFAULT_ARENA[self.task],
            "budget": GATES_BUDGET if gates else ARENA_BUDGET,
            "pop_size": 5000 if paper else 150,
            "species_target": (50 if gates else 20) if paper else 10,
            "neat_activation": "sigmoid" if gates else "tanh",
            "stagnation_delta": 0.05 if gates else 0.0,
            "hyper_hidden": (max(8, 2 * (self.n_bits if self.task == "parity" else 8))) if gates else 32,
            "ppo_batch": 20498 if paper else (2048 if gates else 2560),
            "ppo_unroll": 1 if gates else 5,
            "ppo_gamma": 1.0 if gates else 0.97,
            "ppo_reward_scaling": 1.0 if gates else 10.0,
        }
        return replace(self, **{k: v for k, v in auto.items() if getattr(self, k) is None})

    def hash(self) -> str:
        """Stable digest of everything that influences a trial's outcome."""
        text = to_text(replace(self.resolve(), out_dir="", seeds=1))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_HINTS = typing.get_type_hints(ExperimentConfig)


def _parse_value(name: str, raw: str):
    hint = _HINTS[name]
    raw = raw.strip()
    if raw in ("None", "auto", ""):
        if type(None) in typing.get_args(hint):
            return None
        raise ConfigError(f"{name} cannot be automatic")
    base = [t for t in typing.get_args(hint) if t is not type(None)]
    kind = base[0] if base else hint
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            v = "auto"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def from_text(text: str, **overrides) -> ExperimentConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    values.update(overrides)
    for req in ("method", "task"):
        if req not in values:
            raise ConfigError(f"config is missing {req!r}")
    return ExperimentConfig(**values)


def apply_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    """Apply ``key=value`` strings (as given on the command line)."""
    changes = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _HINTS:
            raise ConfigError(f"unknown key {key!r}")
        changes[key] = _parse_value(key, raw)
    return replace(cfg, **changes)


def load_config(path: str | os.PathLike, **overrides) -> ExperimentConfig:
    with open(path) as fh:
        return from_text(fh.read(), **overrides)
