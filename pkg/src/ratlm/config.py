"""The JSON run configuration: one document resolving every structural choice."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthTask
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainSpec


@dataclass
class DataSection:
    paths: list = field(default_factory=list, metadata={"help": "UTF-8 files or directories forming the corpus"})
    val_fraction: float = field(default=0.05, metadata={"help": "tail fraction of the token stream held out"})
    max_bytes: int | None = field(default=None, metadata={"help": "truncate the corpus after this many bytes"})


@dataclass
class BenchSection:
    d_model: int = field(default=256, metadata={"help": "layer width D for latency runs"})
    n_heads: int = field(default=4, metadata={"help": "heads H for latency runs"})
    batch: int = field(default=1, metadata={"help": "batch size B"})
    reps: int = field(default=5, metadata={"help": "timed repetitions (>= 5)"})
    warmup: int = field(default=1, metadata={"help": "discarded warmup iterations"})
    window: int = field(default=1024, metadata={"help": "SWA window"})
    byte_cap: int | None = field(default=None, metadata={"help": "memory budget; larger grid points become OOM rows"})


SECTIONS = {"model": ModelConfig, "train": TrainSpec, "data": DataSection, "task": SynthTask, "bench": BenchSection}
TOP_LEVEL = {
    "objective": ("corpus", "what train fits: corpus or task"),
    "seed": (0, "global seed (overrides train.seed when given on the command line)"),
    "deterministic": (True, "fixed reduction order and seeds"),
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    data: DataSection = field(default_factory=DataSection)
    task: SynthTask = field(default_factory=SynthTask)
    bench: BenchSection = field(default_factory=BenchSection)
    objective: str = "corpus"
    seed: int = 0
    deterministic: bool = True

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {where!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {unknown}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"bad value in {where!r}: {e}") from None


def resolve(doc: dict | None) -> RunConfig:
    """Apply defaults to a (possibly partial) config document; unknown keys are errors."""
    doc = dict(doc or {})
    unknown = sorted(set(doc) - set(SECTIONS) - set(TOP_LEVEL))
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown}")
    kwargs = {name: _build(cls, doc.get(name, {}), name) for name, cls in SECTIONS.items()}
    for key, (default, _) in TOP_LEVEL.items():
        kwargs[key] = doc.get(key, default)
    if kwargs["objective"] not in ("corpus", "task"):
        raise ConfigError(f"objective must be corpus or task, got {kwargs['objective']!r}")
    return RunConfig(**kwargs)


def load(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return resolve(doc)


def describe_keys() -> str:
    """One line per config key with its default, for --help."""
    lines = []
    for key, (default, text) in TOP_LEVEL.items():
        lines.append(f"  {key} = {json.dumps(default)}  ({text})")
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
            lines.append(f"  {section}.{f.name} = {json.dumps(default)}  ({f.metadata.get('help', '')})")
    return "\n".join(lines)
