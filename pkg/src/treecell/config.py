"""Experiment configuration: dataclasses with a sectioned text form.

Configs round-trip losslessly through INI (parse -> emit -> parse is the
identity), which makes runs self-describing and resumable.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .evolution import EvolutionConfig
from .meta import MetaConfig
from .speciation import SpeciationConfig
from .training import TrainConfig


@dataclass
class TaskConfig:
    name: str = "synthetic"       # synthetic | char_lm | music
    data_path: str = ""           # corpus text or piano-roll matrix file
    vocab_size: int = 8           # synthetic task
    delay: int = 4
    train_tokens: int = 12_000
    valid_tokens: int = 3_000
    test_tokens: int = 3_000
    data_seed: int = 0


@dataclass
class NetworkConfig:
    layers: int = 1
    width: int = 24
    embedding_dim: int = 12
    cardinality: int = 20         # heterogeneous slot width


@dataclass
class PathsConfig:
    out_dir: str = "runs/experiment"
    meta_model: str = ""          # trained curve-predictor checkpoint


@dataclass
class ExperimentConfig:
    seed: int = 0
    precision: int = 64
    task: TaskConfig = field(default_factory=TaskConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    speciation: SpeciationConfig = field(default_factory=SpeciationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        self.evolution.speciation = self.speciation


_SECTIONS = {
    "task": ("task", TaskConfig),
    "network": ("network", NetworkConfig),
    "evolution": ("evolution", EvolutionConfig),
    "speciation": ("speciation", SpeciationConfig),
    "train": ("train", TrainConfig),
    "meta": ("meta", MetaConfig),
    "paths": ("paths", PathsConfig),
}

_SKIP_FIELDS = {("evolution", "speciation")}  # nested; serialized as own section


def _coerce(value: str, kind):
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    if kind is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    if kind is tuple:
        return tuple(int(v) for v in value.split(",") if v.strip())
    return value


def _field_type(f):
    # resolve simple builtin annotations, including string annotations
    mapping = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}
    if isinstance(f.type, str):
        return mapping.get(f.type, str)
    return f.type if f.type in (int, float, bool, str, tuple) else str


def _emit(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_config(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser["experiment"] = {
        "seed": str(config.seed),
        "precision": str(config.precision),
    }
    for section, (attr, cls) in _SECTIONS.items():
        obj = getattr(config, attr)
        parser[section] = {}
        for f in dataclasses.fields(cls):
            if (section, f.name) in _SKIP_FIELDS:
                continue
            parser[section][f.name] = _emit(getattr(obj, f.name))
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    kwargs = {}
    if parser.has_section("experiment"):
        if parser.has_option("experiment", "seed"):
            kwargs["seed"] = parser.getint("experiment", "seed")
        if parser.has_option("experiment", "precision"):
            kwargs["precision"] = parser.getint("experiment", "precision")
    for section, (attr, cls) in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        values = {}
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"unknown option {key!r} in section [{section}]")
            values[key] = _coerce(raw, _field_type(known[key]))
        kwargs[attr] = cls(**values)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(emit_config(config), encoding="utf-8")
