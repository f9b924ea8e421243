"""Experiment configuration and its flat ``key = value`` text form.

Config files hold one ``dotted.key = value`` pair per line; values are JSON
literals (``3``, ``1e-3``, ``true``, ``[64, 32]``, ``"ds3"``) and bare words
are read as strings.  ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import ScenarioKind, SyntheticConfig
from .errors import ConfigError
from .nn import ModelSpec, OptimizerConfig
from .strategies import StrategyHyperparams, StrategyKind

# data.num_clients and data.seed are driven by the top-level keys
_DERIVED_KEYS = {"data.num_clients", "data.seed"}


@dataclass
class ModelConfig:
    hidden_dims: tuple[int, ...] = (64, 32)
    use_batch_norm: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(input_dim, tuple(self.hidden_dims), num_classes, self.use_batch_norm,
                         self.bn_eps, self.bn_momentum)


@dataclass
class ExperimentConfig:
    strategy: str = "fedavg"
    scenario: str = "ds1"
    rounds: int = 40
    local_epochs: int = 3
    num_clients: int = 7
    batch_size: int = 64
    eta: float = 0.1
    seed: int = 0
    data_seed: int | None = None
    dataset: str = ""
    out_dir: str = "runs/default"
    timing: str = "wall"
    threads: int = 1
    thresholds: tuple[float, ...] = (50.0, 60.0, 70.0)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    hparams: StrategyHyperparams = field(default_factory=StrategyHyperparams)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.strategy = StrategyKind.parse(self.strategy).value
        self.scenario = ScenarioKind.parse(self.scenario).value
        if self.rounds < 1 or self.local_epochs < 1:
            raise ConfigError("rounds and local_epochs must be >= 1")
        if self.num_clients < 1 or self.batch_size < 1 or self.threads < 1:
            raise ConfigError("num_clients, batch_size and threads must be >= 1")
        if not self.eta > 0:
            raise ConfigError("eta must be > 0")
        if self.timing not in ("wall", "off"):
            raise ConfigError("timing must be 'wall' or 'off'")
        for theta in self.thresholds:
            if not 0 < theta < 100:
                raise ConfigError(f"threshold {theta} outside (0, 100)")

    @property
    def strategy_kind(self) -> StrategyKind:
        return StrategyKind(self.strategy)

    @property
    def scenario_kind(self) -> ScenarioKind:
        return ScenarioKind.parse(self.scenario)

    def synthetic_config(self) -> SyntheticConfig:
        seed = self.seed if self.data_seed is None else self.data_seed
        return dataclasses.replace(self.data, num_clients=self.num_clients, seed=seed)


def to_flat(obj: Any, prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        key = prefix + f.name
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            flat.update(to_flat(value, key + "."))
        elif key not in _DERIVED_KEYS:
            flat[key] = list(value) if isinstance(value, tuple) else value
    return flat


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        items = value if isinstance(value, (list, tuple)) else [value]
        kind = type(default[0]) if default else float
        return tuple(_coerce(key, v, kind(0)) for v in items)
    if isinstance(default, str):
        return str(value)
    return value  # optional fields


def from_flat(flat: dict[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply dotted-key values onto ``base`` (defaults if omitted)."""
    current = to_flat(base or ExperimentConfig())
    for key, value in flat.items():
        if key not in current:
            raise ConfigError(f"unknown configuration key {key!r}")
        current[key] = value
    defaults = ExperimentConfig()

    def build(cls, template, prefix):
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = prefix + f.name
            default = getattr(template, f.name)
            if dataclasses.is_dataclass(default):
                kwargs[f.name] = build(type(default), default, key + ".")
            elif key in _DERIVED_KEYS:
                kwargs[f.name] = default
            else:
                kwargs[f.name] = _coerce(key, current[key], default)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    return build(ExperimentConfig, defaults, "")


def parse_value(text: str) -> Any:
    text = text.strip()
    if text in ("null", "none", "None"):
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if "," in text:
            return [parse_value(part) for part in text.split(",")]
        return text


def loads(text: str, source: str = "<config>") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        flat[key.strip()] = parse_value(value)
    return flat


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in to_flat(cfg).items():
        lines.append(f"{key} = {'null' if value is None else json.dumps(value)}")
    return "\n".join(lines) + "\n"


def parse_overrides(pairs: list[str]) -> dict[str, Any]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    flat: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        flat.update(loads(path.read_text(), str(path)))
    flat.update(overrides or {})
    return from_flat(flat)
