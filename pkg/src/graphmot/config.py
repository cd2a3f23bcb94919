"""Run configuration: one YAML file with a section per component.

Unknown keys and type mismatches are errors.  ``GRAPHMOT_SEED`` overrides the
file's seed; command-line flags override both.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from .benchmark import BenchmarkPreset
from .graph import GraphBuildConfig
from .metrics import EvalConfig
from .model import ModelConfig
from .simulator import ClassSpec, ConfigError, NoiseConfig, SceneConfig
from .tracker import TrackerConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    train_scenes: int = 200
    eval_scenes: int = 50


@dataclass
class PathsConfig:
    data_dir: str = "data"
    checkpoint: str = "model.ckpt"
    out_dir: str = "out"


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    graph: GraphBuildConfig = field(default_factory=GraphBuildConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def tracker_config(self) -> TrackerConfig:
        return dataclasses.replace(self.tracker, graph=self.graph)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, num_classes=len(self.scene.classes))

    def eval_config(self) -> EvalConfig:
        return dataclasses.replace(self.eval, class_names=self.eval.class_names or self.scene.class_names)

    def preset(self) -> BenchmarkPreset:
        return BenchmarkPreset(self.data.train_scenes, self.data.eval_scenes, self.scene, self.noise, data_seed=self.seed)

    def validate(self) -> None:
        self.scene.validate()
        self.noise.validate()
        self.graph.validate()
        self.model_config().validate()
        self.tracker_config().validate()
        self.train.validate()
        self.eval.validate()
        if len(self.graph.class_radii) != len(self.scene.classes):
            raise ConfigError(f"graph.class_radii has {len(self.graph.class_radii)} entries for {len(self.scene.classes)} classes")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tracker"].pop("graph")  # lives in its own section
        return _plain(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(value: Any, default: Any, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{where}: expected a list of {len(default)} values, got {value!r}")
        return tuple(_coerce(v, d, f"{where}[{i}]") for i, (v, d) in enumerate(zip(value, default)))
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if default and isinstance(default[0], float):
            return [_coerce(v, 0.0, f"{where}[{i}]") for i, v in enumerate(value)]
        return list(value)
    return value


def _update(obj, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in fields(obj)}
    changes = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in names:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(obj, key)
        if key == "graph" and isinstance(obj, TrackerConfig):
            raise ConfigError(f"{path}: set graph options in the top-level 'graph' section")
        if is_dataclass(current):
            changes[key] = _update(current, value, path)
        elif key == "classes" and isinstance(obj, SceneConfig):
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{path}: expected a non-empty list of class specs")
            template = ClassSpec("x", (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 1.0, (0, 0), 0.5, (0.0, 0.0))
            changes[key] = [_update(template, v, f"{path}[{i}]") for i, v in enumerate(value)]
        elif current is None:
            changes[key] = value
        else:
            changes[key] = _coerce(value, current, path)
    return dataclasses.replace(obj, **changes)


def from_dict(data: Optional[dict]) -> RunConfig:
    return _update(RunConfig(), data or {}, "")


def load_config(path: Optional[Path] = None, env: Optional[dict] = None) -> RunConfig:
    """Read a YAML config (defaults if ``path`` is None) and apply environment overrides."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {' '.join(str(exc).split())}") from exc
    cfg = from_dict(data)
    env = os.environ if env is None else env
    if env.get("GRAPHMOT_SEED"):
        try:
            cfg = dataclasses.replace(cfg, seed=int(env["GRAPHMOT_SEED"]))
        except ValueError:
            raise ConfigError(f"GRAPHMOT_SEED must be an integer, got {env['GRAPHMOT_SEED']!r}") from None
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-key overrides such as ``{"train.clip_len": 2}``."""
    nested: dict = {}
    for key, value in overrides.items():
        node = nested
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return _update(cfg, nested, "")


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)


def echo_config(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "effective_config.yaml"
    path.write_text(dump_config(cfg))
    return path
