"""Experiment configuration: one nested YAML tree, validated before any run."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from arcsim import blue, coevolution, federation, jsma
from arcsim import plant as P
from arcsim import red as R


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    """Sizes of the generated normal-operation corpora."""

    normal_episodes: int = 40
    episode_length: int = 240
    test_episodes: int = 10
    eval_runs: int = 16
    eval_length: int = 252
    fault_episodes: int = 6
    fault_sigma: float = 5.0


@dataclass
class RedSection:
    env: R.EnvConfig = field(default_factory=lambda: R.EnvConfig(n_envs=8))
    ppo: R.PPOConfig = field(default_factory=lambda: R.PPOConfig(rollout_steps=64, minibatch=128, epochs=5))
    cycles: int = 200


@dataclass
class CoevolutionSection:
    n_epochs: int = 3
    attacker_cycles: int = 150
    defender_steps: int = 1000
    num_samples: int = 600
    ratios: tuple[float, float, float, float] = (0.5, 0.2, 0.1, 0.2)
    batch_size: int = 64
    disruption_floor: float = 0.3
    episodes_per_try: int = 8
    max_retries: int = 6
    jsma_windows: int = 120
    harden_lr: float = 3e-3
    w_detect: float = 4.0  # stealth weight of the co-evolving attacker; overrides red.env.reward


@dataclass
class JsmaSection:
    k_max: int = 3
    step_fraction: float = 0.5
    n_windows: int = 100


@dataclass
class FederationSection:
    clients: int = 10
    skew: float = 0.5
    rounds: int = 3
    local_steps: int = 1
    lr: float = 1e-2
    batch_size: int = 128
    agg: str = "krum:3"
    poison: str = "sign_flip:100:3"


@dataclass
class ProvenanceSection:
    key_source: str = "puf_sim"
    device_id: str = "gw-1"
    master_seed: int = 42
    batch_size: int = 60


@dataclass
class SeedSection:
    data: int = 0
    baseline: int = 0
    attacker: int = 0
    coevolution: int = 0
    federation: int = 0


@dataclass
class ExperimentConfig:
    plant: P.PlantParams = field(default_factory=P.PlantParams)
    data: DataConfig = field(default_factory=DataConfig)
    blue: blue.BlueConfig = field(default_factory=blue.BlueConfig)
    red: RedSection = field(default_factory=RedSection)
    jsma: JsmaSection = field(default_factory=JsmaSection)
    coevolution: CoevolutionSection = field(default_factory=CoevolutionSection)
    federation: FederationSection = field(default_factory=FederationSection)
    provenance: ProvenanceSection = field(default_factory=ProvenanceSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    output_dir: str = "runs"

    def env_config(self) -> R.EnvConfig:
        """The attack environment; the top-level plant section wins over ``red.env.plant``."""
        return dataclasses.replace(self.red.env, plant=self.plant)

    def jsma_config(self) -> jsma.JsmaConfig:
        return jsma.JsmaConfig(k_max=self.jsma.k_max, step_fraction=self.jsma.step_fraction)

    def coevolution_config(self) -> coevolution.CoevolutionConfig:
        fields = dataclasses.asdict(self.coevolution)
        w_detect = fields.pop("w_detect")
        env = self.env_config()
        env = dataclasses.replace(env, reward=dataclasses.replace(env.reward, w_detect=w_detect))
        return coevolution.CoevolutionConfig(
            **fields, seed=self.seeds.coevolution, env=env, ppo=self.red.ppo, jsma=self.jsma_config()
        )


# ---------------------------------------------------------------------------
# Building from / dumping to plain trees
# ---------------------------------------------------------------------------


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, path)
            except ConfigError:
                continue
        raise ConfigError(f"{path}: value {value!r} does not match {tp}")
    if dataclasses.is_dataclass(tp):
        return build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if args and len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value))) if args else tuple(value)
    if tp is tuple:
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if tp is np.ndarray:
        return np.asarray(value, dtype=float)
    return value


def build(cls, data: Any, path: str = "config"):
    """Instantiate dataclass ``cls`` from a nested mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def to_tree(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_tree(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, (tuple, list)):
        return [to_tree(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def load(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    cfg = build(ExperimentConfig, data)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Build every derived config once so bad values fail before any run starts."""
    try:
        cfg.coevolution_config()
        federation.AggregatorSpec.parse(cfg.federation.agg)
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from exc


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_tree(cfg), sort_keys=False)
