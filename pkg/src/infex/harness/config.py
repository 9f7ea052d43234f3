"""Experiment configuration: nested dataclasses serialised as flat dotted JSON."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..agent import AgentConfig, PolicyConfig
from ..envs import EnvSpec
from ..errors import ConfigurationError
from ..numerics import OptimConfig
from ..seeding import derive_seed, stream


@dataclass
class EnvConfig:
    kind: str = "goal-grid"
    grid: int = 15
    cell: int = 2
    frames: int = 4
    max_steps: int = 300

    def spec(self, **overrides) -> EnvSpec:
        return EnvSpec(kind=self.kind, grid=self.grid, cell=self.cell, frames=self.frames,
                       max_steps=self.max_steps, **overrides)


@dataclass
class DataConfig:
    n: int = 50_000
    epsilon: float = 0.3
    random_start: bool = True
    val_fraction: float = 0.05
    pairs: int = 50_000


@dataclass
class PredConfig:
    lr: float = 1e-3
    batch_size: int = 100
    grad_scale: float = 1e-2
    epochs: int = 15
    hidden: int = 256
    joint: int = 256
    horizons: str = "1,3,5,10"

    def optim(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, batch_size=self.batch_size, grad_scale=self.grad_scale, epochs=self.epochs)


@dataclass
class AEConfig:
    bits: int = 64
    lam: float = 0.01
    phase1_lr: float = 1e-3
    phase1_batch_size: int = 100
    phase1_grad_scale: float = 1.0
    phase1_max_epochs: int = 30
    phase2_lr: float = 1e-4
    phase2_batch_size: int = 100
    phase2_grad_scale: float = 5e-3
    phase2_epochs: int = 10

    def phase1(self) -> OptimConfig:
        return OptimConfig(lr=self.phase1_lr, batch_size=self.phase1_batch_size,
                           grad_scale=self.phase1_grad_scale, epochs=self.phase1_max_epochs)

    def phase2(self) -> OptimConfig:
        return OptimConfig(lr=self.phase2_lr, batch_size=self.phase2_batch_size,
                           grad_scale=self.phase2_grad_scale, epochs=self.phase2_epochs)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs"
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pred: PredConfig = field(default_factory=PredConfig)
    ae: AEConfig = field(default_factory=AEConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)

    # -- serialisation -----------------------------------------------------
    def to_flat(self) -> dict:
        return _flatten(self)

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        cfg = cls()
        cfg.update(flat)
        return cfg

    def update(self, flat: dict):
        known = self.to_flat()
        for key, value in flat.items():
            if key not in known:
                raise ConfigurationError(f"unknown config key '{key}'")
            _set(self, key, _coerce(key, value, known[key]))
        self.validate()

    def validate(self):
        # constructing the typed views runs their own checks
        self.env.spec()
        PolicyConfig(**dataclasses.asdict(self.policy))
        if not 0 < self.data.val_fraction < 1:
            raise ConfigurationError("data.val_fraction must lie in (0, 1)")
        self.horizons()

    def dumps(self) -> str:
        return json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            flat = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(flat, dict):
            raise ConfigurationError(f"{path}: expected a JSON object of dotted keys")
        return cls.from_flat(flat)

    # -- derived values ----------------------------------------------------
    def horizons(self) -> list:
        try:
            hs = [int(h) for h in str(self.pred.horizons).split(",") if h.strip()]
        except ValueError as exc:
            raise ConfigurationError(f"bad horizon list '{self.pred.horizons}'") from exc
        if not hs or hs != sorted(hs) or hs[0] < 1:
            raise ConfigurationError(f"horizons must be ascending positive integers, got '{self.pred.horizons}'")
        return hs

    def seed_for(self, name: str) -> int:
        return derive_seed(self.seed, name)

    def rng(self, name: str):
        return stream(self.seed, name)

    def out_root(self) -> Path:
        return Path(os.environ.get("IEX_OUT") or self.out)


def _flatten(obj, prefix="") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, key + "."))
        else:
            out[key] = value
    return out


def _set(obj, dotted, value):
    *path, last = dotted.split(".")
    for part in path:
        obj = getattr(obj, part)
    object.__setattr__(obj, last, value)


def _coerce(key, value, default):
    """Convert ``value`` (JSON value or CLI string) to the type of ``default``."""
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes"):
                    return True
                if value.lower() in ("0", "false", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if default is None:
            if value in (None, "", "none", "null"):
                return None
            return int(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"config key '{key}': cannot use {value!r} as {type(default).__name__}") from exc


def parse_overrides(items) -> dict:
    """``["a.b=1", ...]`` to ``{"a.b": "1"}``."""
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override '{item}' is not of the form key=value")
        out[key.strip()] = value.strip()
    return out
