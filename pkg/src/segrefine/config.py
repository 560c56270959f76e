"""JSON run configuration with strict key checking and a provenance digest."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import CorruptionConfig
from .losses import LossWeights
from .model import ModelConfig
from .pipeline import TrainConfig

SECTIONS = ("model", "data", "corruption", "train", "losses", "paths")


class ConfigFileError(ValueError):
    pass


@dataclass
class DataConfig:
    n_samples: int = 260
    n_strong: int = 20
    n_validation: int = 40
    size: int = 64
    seed: int = 0


@dataclass
class PathsConfig:
    data: str | None = None
    out: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        # the model seed is owned by train.seed
        d["model"].pop("seed", None)
        return json.loads(json.dumps(d))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self, exclude_paths: bool = True) -> str:
        """sha256 of the canonical JSON; paths are left out by default so moving a run keeps its digest."""
        d = self.to_dict()
        if exclude_paths:
            d.pop("paths")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def model_config(self) -> ModelConfig:
        return replace(self.model, input_size=self.data.size, seed=self.train.seed)


_SECTION_TYPES = {
    "model": ModelConfig,
    "data": DataConfig,
    "corruption": CorruptionConfig,
    "train": TrainConfig,
    "losses": LossWeights,
    "paths": PathsConfig,
}


def _build(section: str, values) -> object:
    cls = _SECTION_TYPES[section]
    if not isinstance(values, dict):
        raise ConfigFileError(f"section {section!r} must be a JSON object")
    allowed = {f.name for f in fields(cls)}
    if section == "model":
        allowed.discard("seed")
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigFileError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigFileError(f"invalid {section!r} section: {e}") from e


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigFileError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigFileError(f"unknown section(s): {', '.join(unknown)}")
    return RunConfig(**{name: _build(name, doc[name]) for name in SECTIONS if name in doc})


def load_config(path=None) -> RunConfig:
    """Read a config file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigFileError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(doc)
