"""Run configuration: one JSON file, every key optional, flags win over it.

Defaults reproduce the published training settings for the public-dataset
experiments: Adam at 5e-4, batches of 128, a 128x64 tower, 12/4-dimensional
global/specific embeddings, 4 attention heads.
"""

import json
from dataclasses import dataclass, fields as dataclass_fields, replace

from .errors import ConfigError, DataFormatError
from .model import make_variant


@dataclass
class RunConfig:
    variant: str = "full"
    data: str = None  # dataset file; may instead come from a --data flag
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 5e-4
    hidden: tuple = (128, 64)
    heads: int = 4
    global_dim: int = 12
    specific_dim: int = 4
    max_seq_len: int = 15
    mutual_layer: int = 1
    gate_bias_init: float = -2.0
    seed: int = 0
    scenario_filter: int = None  # train on one scenario's records only

    def __post_init__(self):
        make_variant(self.variant)
        self.hidden = tuple(int(w) for w in self.hidden)
        if not self.hidden or any(w < 1 for w in self.hidden):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0.0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.heads < 1 or self.global_dim < 1 or self.specific_dim < 1:
            raise ConfigError("heads and embedding dimensions must be >= 1")
        if self.max_seq_len < 1:
            raise ConfigError(f"max_seq_len must be >= 1, got {self.max_seq_len}")
        if not 1 <= self.mutual_layer <= len(self.hidden):
            raise ConfigError(
                f"mutual_layer {self.mutual_layer} outside [1, {len(self.hidden)}]")
        if self.scenario_filter is not None and self.scenario_filter < 0:
            raise ConfigError(f"scenario_filter must be >= 0, got {self.scenario_filter}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclass_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}: bad JSON: {e}") from None
        if not isinstance(obj, dict):
            raise DataFormatError(f"{path}: config must be a JSON object")
        return cls.from_dict(obj)

    def with_overrides(self, **overrides):
        """Apply non-None override values; this is the flag > file precedence."""
        live = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(live) - {f.name for f in dataclass_fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **live) if live else self

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclass_fields(self)}
        d["hidden"] = list(self.hidden)
        return d


def load_config(path=None, **overrides):
    base = RunConfig.from_file(path) if path else RunConfig()
    return base.with_overrides(**overrides)
