"""Configuration models and presets.

Precedence when the CLI resolves an :class:`ExperimentConfig`: command-line
flags, then the ``E3VA_SEED`` environment variable (seed only), then the
JSON config file, then the defaults below.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Literal, get_args

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from highway_lab.errors import ConfigError

log = logging.getLogger(__name__)

SEED_ENV = "E3VA_SEED"

MethodName = Literal["e3va", "fixed", "full", "adapter", "lora", "adaptformer", "bitfit", "norm", "partial1"]
METHODS: tuple[str, ...] = get_args(MethodName)

# Methods that place trainable structure inside the backbone's residual stream.
INSERTING_METHODS = frozenset({"adapter", "lora", "adaptformer"})

# Published-scale widths; toy presets cap the middle dim at half the stage-1 width.
DEFAULT_ADAPTER_DIM = 64
DEFAULT_ALPHA = 8
METHOD_ALIASES: dict[str, dict[str, Any]] = {
    "e3va+": {"name": "e3va", "alpha": 16},
    "e3va++": {"name": "e3va", "alpha": 32},
}

DEFAULT_LR = 1e-4
DEFAULT_BATCH = 4
DEFAULT_WEIGHT_DECAY = 0.01


class BackboneConfig(BaseModel):
    """Hierarchical windowed-attention backbone shape."""

    model_config = ConfigDict(frozen=True)

    name: str = "custom"
    embed_dim: int = Field(gt=0)
    depths: tuple[int, int, int, int]
    heads: tuple[int, int, int, int]
    window: int = Field(gt=0)
    patch: int = Field(gt=0)
    img: int = Field(gt=0)
    in_chans: int = 3
    mlp_ratio: int = 4
    precision: Literal[32, 64] = 64
    materializable: bool = True

    @model_validator(mode="after")
    def _check_shape(self) -> "BackboneConfig":
        if self.img % self.patch:
            raise ValueError(f"img {self.img} is not divisible by patch {self.patch}")
        grid = self.img // self.patch
        if grid % 8:
            raise ValueError(f"patch grid {grid} must be divisible by 8 for three merges")
        if any(d <= 0 for d in self.depths):
            raise ValueError("every stage needs at least one block")
        for s, h in enumerate(self.heads):
            if h <= 0 or self.dim(s) % h:
                raise ValueError(f"stage {s} width {self.dim(s)} is not divisible by {h} heads")
        for s in range(self.n_stages):
            if self.grid(s) % self.window_for(s):
                raise ValueError(f"stage {s} grid {self.grid(s)} is not divisible by window {self.window_for(s)}")
        return self

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self.precision == 64 else np.float32)

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    def dim(self, stage: int) -> int:
        return self.embed_dim * 2 ** stage

    def grid(self, stage: int) -> int:
        return self.img // self.patch // 2 ** stage

    def window_for(self, stage: int) -> int:
        """Effective window: a window larger than the grid shrinks to the grid."""
        return min(self.window, self.grid(stage))

    def blocks(self) -> list[tuple[int, int]]:
        return [(s, b) for s, depth in enumerate(self.depths) for b in range(depth)]


PRESETS: dict[str, BackboneConfig] = {
    "toy-1": BackboneConfig(name="toy-1", embed_dim=16, depths=(1, 1, 2, 1), heads=(1, 2, 4, 8),
                            window=4, patch=4, img=64),
    "micro": BackboneConfig(name="micro", embed_dim=4, depths=(1, 1, 1, 1), heads=(1, 1, 1, 1),
                            window=2, patch=4, img=32),
    "swin-b": BackboneConfig(name="swin-b", embed_dim=128, depths=(2, 2, 18, 2), heads=(4, 8, 16, 32),
                             window=7, patch=4, img=224, materializable=False),
    "swin-l": BackboneConfig(name="swin-l", embed_dim=192, depths=(2, 2, 18, 2), heads=(6, 12, 24, 48),
                             window=7, patch=4, img=224, materializable=False),
}


def preset(name: str) -> BackboneConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}") from None


class MethodConfig(BaseModel):
    """Which tuning method to build and how."""

    model_config = ConfigDict(frozen=True)

    name: MethodName = "e3va"
    alpha: int = Field(default=DEFAULT_ALPHA, gt=0)
    adapter_dim: int | None = Field(default=None, gt=0)
    train_fpn_norm: bool | None = None
    trainable_reduction: bool = False
    fusion: Literal["additive", "highway_only"] = "additive"
    adaptformer_scale: float = 0.1

    @model_validator(mode="before")
    @classmethod
    def _expand_alias(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("name") in METHOD_ALIASES:
            return {**METHOD_ALIASES[data["name"]], **data, "name": "e3va"}
        return data

    @classmethod
    def parse(cls, name: str, **overrides: Any) -> "MethodConfig":
        """Build from a CLI-style name, expanding the ``e3va+``/``e3va++`` aliases."""
        fields = dict(METHOD_ALIASES.get(name, {"name": name}))
        fields.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**fields)
        except ValidationError as exc:
            raise ConfigError(f"invalid method {name!r}: {exc}") from exc

    @property
    def label(self) -> str:
        if self.name == "e3va" and self.alpha != DEFAULT_ALPHA:
            return f"e3va-a{self.alpha}"
        return self.name

    @property
    def fpn_norm_trainable(self) -> bool:
        """FPN norms train by default only under the highway method."""
        if self.train_fpn_norm is not None:
            return self.train_fpn_norm
        return self.name == "e3va"

    def middle_dim(self, cfg: BackboneConfig) -> int:
        if self.adapter_dim is not None:
            return self.adapter_dim
        return min(DEFAULT_ADAPTER_DIM, max(1, cfg.embed_dim // 2))

    def check_against(self, cfg: BackboneConfig) -> None:
        if self.name == "e3va" and cfg.embed_dim % 2:
            raise ConfigError(f"e3va halves the width; embed_dim {cfg.embed_dim} is odd")


class HeadConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_classes: int = Field(default=4, gt=1)
    width: int = Field(default=32, gt=0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    steps: int = Field(default=200, ge=0)
    batch: int = Field(default=DEFAULT_BATCH, gt=0)
    lr: float = Field(default=DEFAULT_LR, gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = Field(default=DEFAULT_WEIGHT_DECAY, ge=0)
    n_images: int = Field(default=64, gt=0)
    rule: Literal["sine", "linear"] = "sine"


class ReportConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    out_dir: Path = Path("reports")
    format: Literal["csv", "json"] = "csv"
    force: bool = False


class ExperimentConfig(BaseModel):
    """Everything a CLI command needs, loadable from a JSON file."""

    model: BackboneConfig = PRESETS["toy-1"]
    method: MethodConfig = MethodConfig()
    head: HeadConfig = HeadConfig()
    train: TrainConfig = TrainConfig()
    report: ReportConfig = ReportConfig()
    seed: int = 0

    @field_validator("model", mode="before")
    @classmethod
    def _resolve_preset(cls, value: Any) -> Any:
        if isinstance(value, str):
            return preset(value)
        if isinstance(value, dict) and "preset" in value:
            base = preset(value["preset"]).model_dump()
            base.update({k: v for k, v in value.items() if k != "preset"})
            return base
        return value

    @field_validator("method", mode="before")
    @classmethod
    def _resolve_method(cls, value: Any) -> Any:
        if isinstance(value, str):
            return MethodConfig.parse(value)
        return value

    @model_validator(mode="after")
    def _check_method(self) -> "ExperimentConfig":
        self.method.check_against(self.model)
        return self


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    """Read a JSON config file (or defaults when ``path`` is None)."""
    if path is None:
        return ExperimentConfig()
    try:
        raw = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        return ExperimentConfig.model_validate_json(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc


def seed_from_env(default: int) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
