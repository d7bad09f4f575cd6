"""
Experiment configuration: one flat JSON document.

Every key is a field of ExperimentConfig below; unknown keys are rejected.
Command-line `--set key=value` overrides are parsed as JSON, falling back to a
bare string (so `--set variant=ratio_1.25` works without quotes).
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence

from errors import ConfigError
from layout import Variant
from model import ModelConfig
from training import TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    # corpus
    num_languages: int = 6                 # K
    concepts: int = 50                     # C, surface words per language
    min_length: int = 3                    # Lmin
    max_length: int = 12                   # Lmax
    train_per_edge: int = 4000             # instances per supervised direction
    language_sizes: Optional[List[int]] = None   # per-language sizes (resource tiers); overrides train_per_edge
    valid_per_edge: int = 50
    test_per_direction: int = 50
    pivot: int = 0
    groups: List[List[int]] = field(default_factory=list)
    bridges: List[int] = field(default_factory=list)
    data_seed: int = 0

    # model
    variant: str = "registering"           # vanilla | registering | registers_no_mask | ratio_<rho>
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 512
    dropout: float = 0.1
    attention_dropout: float = 0.1
    max_positions: int = 256
    init_seed: int = 0

    # training
    lr_peak: float = 5e-4
    warmup_steps: int = 400
    max_steps: int = 5000
    batch_tokens: int = 2048
    label_smoothing: float = 0.1
    sampling_temperature: float = 5.0
    seed: int = 1
    mode: str = "full"                     # full | lora
    grad_clip: float = 1.0
    accumulation: int = 1
    bucket_pool: int = 64
    log_interval: int = 50
    valid_interval: int = 500
    save_interval: int = 1000
    average_last: int = 5

    # LoRA fine-tuning
    lora_rank: int = 8
    lora_alpha: float = 16.0
    finetune_directions: int = 5           # directions picked by random.sample(seed 0)
    finetune_per_direction: int = 1000
    finetune_seed: int = 0

    # evaluation / analysis
    beam: int = 5
    analysis_samples: int = 100
    analysis_seed: int = 0

    def __post_init__(self):
        Variant.parse(self.variant)
        if self.min_length < 1 or self.max_length < self.min_length:
            raise ConfigError(f"invalid length range [{self.min_length}, {self.max_length}]")
        if self.beam < 1:
            raise ConfigError(f"beam must be >= 1, got {self.beam}")

    # --- loading ---
    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, assignments: Sequence[str]) -> "ExperimentConfig":
        """Apply `key=value` strings; values are JSON or bare strings."""
        data = self.to_dict()
        for item in assignments or ():
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, raw = item.split("=", 1)
            key = key.strip()
            if key not in data:
                raise ConfigError(f"unknown config key: {key}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            data[key] = value
            logger.debug("Override %s = %r", key, value)
        return self.from_dict(data)

    # --- derived views ---
    def variant_spec(self) -> Variant:
        return Variant.parse(self.variant)

    @property
    def length_range(self):
        return (self.min_length, self.max_length)

    @property
    def vocab_size(self) -> int:
        return 3 + self.num_languages + self.num_languages * self.concepts

    def model_config(self, vocab_size: Optional[int] = None) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size if vocab_size is not None else self.vocab_size,
            d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers, d_ff=self.d_ff,
            dropout=self.dropout, attention_dropout=self.attention_dropout,
            max_positions=self.max_positions, variant=self.variant,
        )

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.to_dict().items() if k in names})


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Config from a JSON file (defaults when path is None) plus overrides."""
    config = ExperimentConfig.from_json(path) if path else ExperimentConfig()
    return config.with_overrides(overrides)
