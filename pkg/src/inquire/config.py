"""Run configuration: defaults, YAML/JSON files and command-line overrides.

Precedence is flags > file > defaults. The config hash covers every field
except the output directory and the seed, which artifacts record separately.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from . import store
from .agents import QConfig
from .hyperbolic import PoincareConfig
from .rewards import RewardModelConfig, RewardWeights


class ConfigError(ValueError):
    """Invalid configuration file or override."""


@dataclass
class RunConfig:
    corpus: str = "corpus.jsonl"
    taxonomy: str | None = None
    out: str = "runs/default"
    seed: int = 0

    # state embedding
    embedder: str = "hashing"  # hashing | remote
    d_raw: int = 4096
    embed_model: str = "default"
    provider_timeout: float = 30.0
    provider_retries: int = 2

    # rewards
    w_rel: float = 0.2
    w_nov: float = 0.7
    w_cla: float = 0.1
    similarity: str = "lexical"  # lexical | remote

    # hyperbolic table
    d_h: int = 8
    embed_epochs: int = 500
    embed_lr: float = 0.1
    negatives: int = 10

    # networks and agents
    compressed: int = 32
    hidden: tuple[int, ...] = (64, 32)
    gamma: float = 0.9
    tau: float = 0.005
    alpha: float = 0.1
    beta: float = 0.1
    lam: float = 1.0
    optimizer: str = "adam"
    appraisal_lr: tuple[float, float] = (1e-6, 3e-9)
    dialogue_lr: tuple[float, float] = (1e-6, 1e-8)
    reward_lr: tuple[float, float] = (1e-3, 1e-5)
    current_state_target: bool = False
    node_ids: bool = True

    # training loop
    batch_size: int = 64
    agent_epochs: int = 100
    reward_epochs: int = 200
    holdout: float = 0.2
    patience: int = 20
    tol_loss: float = 1e-4
    tol_value: float = 1e-3

    # simulation and metrics
    max_rounds: int = 10
    responder: str = "scripted"  # scripted | remote
    realizer: str = "template"  # template | remote
    chat_model: str = "default"
    workers: int = 1
    mr_gamma: float = 0.7
    coverage_mode: str = "simulated"  # simulated | original

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("appraisal_lr", "dialogue_lr", "reward_lr"):
            val = tuple(float(v) for v in getattr(self, name))
            if len(val) != 2 or min(val) <= 0:
                raise ConfigError(f"{name} must be two positive rates (start, end)")
            setattr(self, name, val)
        checks = [
            (self.d_raw >= 1, "d_raw must be >= 1"),
            (self.d_h >= 1, "d_h must be >= 1"),
            (self.compressed >= 1, "compressed must be >= 1"),
            (all(h >= 1 for h in self.hidden), "hidden sizes must be >= 1"),
            (0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (0.0 <= self.tau <= 1.0, "tau must lie in [0, 1]"),
            (min(self.alpha, self.beta, self.lam) >= 0, "alpha, beta, lam must be >= 0"),
            (min(self.w_rel, self.w_nov, self.w_cla) >= 0, "reward weights must be >= 0"),
            (self.batch_size >= 2, "batch_size must be >= 2 (batch norm)"),
            (self.agent_epochs >= 0 and self.reward_epochs >= 0 and self.embed_epochs >= 0,
             "epoch counts must be >= 0"),
            (0.0 <= self.holdout < 1.0, "holdout must lie in [0, 1)"),
            (self.patience >= 0, "patience must be >= 0"),
            (self.max_rounds >= 0, "max_rounds must be >= 0"),
            (0.0 <= self.mr_gamma <= 1.0, "mr_gamma must lie in [0, 1]"),
            (self.negatives >= 1, "negatives must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.embedder in ("hashing", "remote"), f"unknown embedder {self.embedder!r}"),
            (self.similarity in ("lexical", "remote"), f"unknown similarity {self.similarity!r}"),
            (self.responder in ("scripted", "remote"), f"unknown responder {self.responder!r}"),
            (self.realizer in ("template", "remote"), f"unknown realizer {self.realizer!r}"),
            (self.coverage_mode in ("simulated", "original"),
             f"unknown coverage_mode {self.coverage_mode!r}"),
            (self.optimizer in ("adam", "sgd"), f"unknown optimizer {self.optimizer!r}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    # -- derived component configs

    def weights(self) -> RewardWeights:
        return RewardWeights(self.w_rel, self.w_nov, self.w_cla)

    def poincare(self) -> PoincareConfig:
        return PoincareConfig(dim=self.d_h, epochs=self.embed_epochs, lr=self.embed_lr,
                              negatives=self.negatives, seed=self.seed)

    def reward_model(self) -> RewardModelConfig:
        return RewardModelConfig(compressed=self.compressed, hidden=self.hidden,
                                 epochs=self.reward_epochs, batch_size=self.batch_size,
                                 lr_start=self.reward_lr[0], lr_end=self.reward_lr[1],
                                 holdout=self.holdout, node_ids=self.node_ids, seed=self.seed)

    def q_config(self, agent: str, horizon: int) -> QConfig:
        lr = self.appraisal_lr if agent == "appraisal" else self.dialogue_lr
        return QConfig(compressed=self.compressed, hidden=self.hidden, gamma=self.gamma,
                       tau=self.tau, reg=self.alpha if agent == "appraisal" else self.beta,
                       hier=self.lam, lr_start=lr[0], lr_end=lr[1], lr_horizon=max(1, horizon),
                       optimizer=self.optimizer, current_state_target=self.current_state_target,
                       node_ids=self.node_ids,
                       seed=self.seed + (1 if agent == "appraisal" else 2))

    # -- identity

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        d.pop("seed")
        return store.digest(d)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    """Interpret a string override according to the field's default type."""
    if not isinstance(value, str):
        return value
    default = _FIELDS[name].default
    if default is dataclasses.MISSING:
        return value
    if isinstance(default, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(yaml.safe_load(value) if value.strip().startswith("[") else value.split(","))
    if default is None and value.lower() in ("none", "null", ""):
        return None
    return value


def build(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    merged: dict = {}
    for source in (file_values or {}, overrides or {}):
        for key, val in source.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            if val is None and key not in ("taxonomy",):
                continue
            try:
                merged[key] = _coerce(key, val)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def read_file(path: str | Path) -> dict:
    """YAML or JSON mapping (JSON is valid YAML)."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return data


def load(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    return build(read_file(path) if path else {}, overrides)


def parse_assignments(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        out[key.strip().replace("-", "_")] = val
    return out


def dump(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n"
