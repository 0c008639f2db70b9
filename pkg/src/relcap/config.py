"""Run configuration: namespaced dataclasses with JSON round trip.

Every key has a default.  Loading rejects unknown keys so that typos in a
config file fail loudly instead of silently falling back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 2000
    n_val: int = 400
    questions_per_image: int = 2
    num_objects: int = 8  # K, feature rows per image (zero-padded)
    feature_dim: int = 32  # D
    num_captions: int = 5  # C
    max_caption_len: int = 12  # T, words plus the end token
    min_objects: int = 3
    max_objects: int = 6
    noise: float = 1.0
    partial_count_score: float = 0.0
    projection_seed: int = 1234
    min_word_count: int = 5
    min_answer_count: int = 1
    max_question_len: int = 14


@dataclass
class ModelConfig:
    q_embed: int = 64
    q_hidden: int = 64
    v_hidden: int = 64
    word_embed: int = 64  # also the Word GRU hidden size
    cap_hidden: int = 64
    dec_embed: int = 64
    dec_hidden: int = 64
    att_hidden: int = 64
    lrelu_slope: float = 0.01
    gate: str = "vector"  # vector | scalar | off
    use_caa: bool = True
    ablate_captions: bool = False
    pred_target: str = "logit"  # logit | log_prob
    caption_stop_grad: bool = False


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    divergence_limit: float = 1e6
    limit: int = 0  # use only the first N training examples (0 = all)
    val_limit: int = 0


@dataclass
class SelectConfig:
    xi: float = 0.0


@dataclass
class Phase2Config:
    epochs: int = 10
    lr_scale: float = 0.25
    num_generated: int = 5
    max_len: int = 12
    temperature: float = 1.0
    vqa_only: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    select: SelectConfig = field(default_factory=SelectConfig)
    phase2: Phase2Config = field(default_factory=Phase2Config)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        cfg.update(raw)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def update(self, raw: dict[str, Any]) -> None:
        """Merge nested (``{"train": {"lr": ...}}``) or dotted (``"train.lr"``) keys."""
        for key, value in raw.items():
            if "." in key:
                section, _, name = key.partition(".")
                self._set(section, name, value)
            elif isinstance(value, dict):
                for name, v in value.items():
                    self._set(key, name, v)
            elif key == "seed":
                self.seed = int(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")

    def _set(self, section: str, name: str, value: Any) -> None:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        obj = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields:
            raise ConfigError(f"unknown config key {section}.{name}")
        default = getattr(type(obj)(), name)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{name} must be a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{section}.{name} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{name} must be a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{section}.{name} must be a string")
        setattr(obj, name, value)

    def validate(self) -> None:
        d, m = self.data, self.model
        if d.num_captions < 2:
            raise ConfigError("data.num_captions must be at least 2 (selection needs alternatives)")
        if d.max_objects > d.num_objects:
            raise ConfigError("data.num_objects must be >= data.max_objects")
        if not 1 <= d.min_objects <= d.max_objects:
            raise ConfigError("need 1 <= data.min_objects <= data.max_objects")
        if d.n_train % d.questions_per_image or d.n_val % d.questions_per_image:
            raise ConfigError("split sizes must be multiples of data.questions_per_image")
        if m.gate not in ("vector", "scalar", "off"):
            raise ConfigError(f"model.gate must be vector|scalar|off, got {m.gate!r}")
        if m.pred_target not in ("logit", "log_prob"):
            raise ConfigError(f"model.pred_target must be logit|log_prob, got {m.pred_target!r}")
        if self.train.batch_size < 1 or self.train.lr <= 0:
            raise ConfigError("train.batch_size and train.lr must be positive")
        if self.select.xi < 0:
            raise ConfigError("select.xi must be >= 0")
        if self.phase2.temperature <= 0:
            raise ConfigError("phase2.temperature must be positive")


_SECTIONS = ("data", "model", "train", "select", "phase2")
