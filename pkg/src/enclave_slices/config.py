"""RunConfig: everything that determines a pipeline run, loadable from TOML or JSON."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ConfigError

try:  # Python 3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml


@dataclass
class DatasetSpec:
    name: str = "digits"
    public: int = 8000
    train: int = 2000
    eval: int = 1000
    query: int = 200
    attack_eval: int = 1000
    public_classes: int = 200


@dataclass
class StageSpec:
    epochs: int = 30
    lr: float = 0.003
    batch_size: int = 64


@dataclass
class PruneSpec:
    delta: float = 0.01
    alpha_setup: float = 0.05
    n: int = 1
    rounds: int = 30
    lambda_complexity: float = 1e-3
    retrain_epochs: int = 2


@dataclass
class AttackSpec:
    epochs: int = 30
    lr: float = 0.003
    budget: int = 0  # 0 -> 10% of the victim training split
    delta: float = 0.03
    configs: list = field(default_factory=lambda: [
        "NO_SHIELD", "BLACK_BOX", "TEESLICE", "DEEP_K(1)", "DEEP_K(2)", "SHALLOW_K(1)", "SHALLOW_K(2)",
        "MAGNITUDE_RATIO(0.01)", "MAGNITUDE_RATIO(0.1)",
    ])


@dataclass
class RunConfig:
    seed: int = 0
    arch: str = "mlp-s"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    public: StageSpec = field(default_factory=lambda: StageSpec(epochs=8, lr=0.003))
    victim: StageSpec = field(default_factory=lambda: StageSpec(epochs=30, lr=0.002))
    dense: StageSpec = field(default_factory=lambda: StageSpec(epochs=30, lr=0.003))
    prune: PruneSpec = field(default_factory=PruneSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    field_p: int = 2**31 - 1
    verify_rate: float = 0.1
    pads_per_op: int = 1000
    workdir: str = "run"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def query_budget(self) -> int:
        return self.attack.budget or max(1, self.dataset.train // 10)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}.{key}")
        else:
            kwargs[key] = _coerce(value, default, f"{where}.{key}")
    return cls(**kwargs)


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{where}: expected a list")
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    return value


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load_config(path: str | Path | None) -> RunConfig:
    """Read TOML or JSON (by extension); ``None`` gives defaults.  TSLC_SEED overrides the seed."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_bytes()
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {p}") from exc
        try:
            data = json.loads(text) if p.suffix == ".json" else _toml.loads(text.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        cfg = config_from_dict(data)
    env = os.environ.get("TSLC_SEED")
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"TSLC_SEED must be an integer, got {env!r}") from exc
    return cfg


def set_path(cfg: RunConfig, dotted: str, raw: str) -> None:
    """Apply a ``--set section.key=value`` override (value parsed as JSON when possible)."""
    parts = dotted.split(".")
    target = cfg
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ConfigError(f"unknown config section {dotted!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not hasattr(target, leaf):
        raise ConfigError(f"unknown config key {dotted!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    setattr(target, leaf, _coerce(value, getattr(target, leaf), dotted))
