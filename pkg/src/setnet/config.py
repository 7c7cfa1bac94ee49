"""Configuration models and loaders."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from setnet.errors import ConfigError

Family = Literal["deep_sets", "deep_sets_pp", "set_transformer", "set_transformer_pp"]
Aggregation = Literal["sum", "max", "pma", "positional"]
NormKind = Literal["none", "layer_norm", "set_norm", "feature_norm"]
ResidualKind = Literal["none", "erc", "arc_mean", "arc_max"]
PathKind = Literal["plain", "clean", "non_clean", "freq_add"]
TaskHead = Literal["regression", "classification"]

DS_FAMILIES = ("deep_sets", "deep_sets_pp")
ST_FAMILIES = ("set_transformer", "set_transformer_pp")

# family -> (aggregation, norm, residual, path)
_FAMILY_DEFAULTS: dict[str, tuple[str, str, str, str | None]] = {
    "deep_sets": ("sum", "none", "none", "plain"),
    "deep_sets_pp": ("sum", "set_norm", "erc", "clean"),
    "set_transformer": ("pma", "none", "none", None),
    "set_transformer_pp": ("pma", "set_norm", "erc", None),
}


def canonical_json(obj: Any) -> bytes:
    """Sorted keys, compact separators, UTF-8."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


class ModelConfig(BaseModel):
    """Declarative description of an encoder -> aggregation -> decoder network.

    Fields left as None take the family default; `resolve()` fills them in and
    enforces the cross-field invariants.
    """

    model_config = ConfigDict(extra="forbid")

    family: Family = "deep_sets_pp"
    input_dim: int = Field(1, ge=1)
    encoder_depth: int = Field(4, ge=1)
    hidden_dim: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    inducing_points: int = Field(16, ge=1)
    aggregation: Aggregation | None = None
    norm: NormKind | None = None
    residual: ResidualKind | None = None
    path: PathKind | None = None
    decoder_widths: list[int] | None = None
    output_dim: int = Field(1, ge=1)
    task_head: TaskHead = "regression"
    seed: int = 0
    wq_scale: float = Field(1.0, gt=0)  # multiplies the initial W_Q (ST) or query projections (ST++)

    @field_validator("decoder_widths")
    @classmethod
    def _positive_widths(cls, v: list[int] | None) -> list[int] | None:
        if v is not None and any(w < 1 for w in v):
            raise ValueError("decoder widths must be positive")
        return v

    @property
    def is_deep_sets(self) -> bool:
        return self.family in DS_FAMILIES

    def resolve(self) -> ModelConfig:
        """Fill family defaults and check invariants, raising ConfigError naming the field."""
        aggregation, norm, residual, path = _FAMILY_DEFAULTS[self.family]
        r = self.model_copy(update={
            "aggregation": self.aggregation or aggregation,
            "norm": self.norm or norm,
            "residual": self.residual or residual,
            "path": self.path or path,
            "decoder_widths": (
                self.decoder_widths
                if self.decoder_widths is not None
                else ([self.hidden_dim] * 3 if self.is_deep_sets else [])
            ),
        })

        if r.is_deep_sets:
            if r.aggregation not in ("sum", "max", "positional"):
                raise ConfigError("aggregation", f"{r.family} uses sum or max, got {r.aggregation}")
            if r.path == "plain" and r.residual != "none":
                raise ConfigError("residual", "plain Deep Sets layers carry no residual connection")
        else:
            if r.aggregation != "pma":
                raise ConfigError("aggregation", f"{r.family} aggregates with pma, got {r.aggregation}")
            if r.path is not None:
                raise ConfigError("path", f"path selects Deep Sets blocks, not valid for {r.family}")
            if r.hidden_dim % r.heads != 0:
                raise ConfigError("heads", f"{r.heads} heads do not divide hidden_dim {r.hidden_dim}")
            if r.family == "set_transformer":
                if r.residual != "none":
                    raise ConfigError("residual", "the original MAB skip path is fixed to x W_Q")
                if r.norm == "feature_norm":
                    raise ConfigError("norm", "the original MAB supports none, layer_norm or set_norm")
        if r.task_head == "classification" and r.output_dim < 2:
            raise ConfigError("output_dim", "classification needs at least 2 classes")
        return r


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(64, gt=0)
    epochs: int = Field(50, ge=0)
    learning_rate: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    seed: int = 0
    loss: Literal["mse", "cross_entropy"] = "mse"
    grad_log_every: int = Field(50, gt=0)
    divergence_threshold: float = Field(1e12, gt=0)
    record_wall_time: bool = False  # off keeps metrics CSVs byte-identical across runs


class GenSpec(BaseModel):
    """Parameters of a synthetic dataset; generation is a pure function of this."""

    model_config = ConfigDict(extra="forbid")

    task: Literal["normal_var", "toy_shapes"]
    n_sets: int = Field(..., gt=0)
    set_size: int = Field(..., gt=0)
    seed: int
    mean_range: tuple[float, float] = (-10.0, 10.0)
    variance_range: tuple[float, float] = (0.0, 10.0)
    n_classes: int = Field(4, ge=1)
    noise_scale: float = Field(0.05, ge=0)

    @field_validator("mean_range", "variance_range")
    @classmethod
    def _ordered(cls, v: tuple[float, float]) -> tuple[float, float]:
        if v[0] > v[1]:
            raise ValueError(f"range {v} is not ordered")
        return v


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train: Path | None = None
    test: Path | None = None


class RunConfig(BaseModel):
    """Top-level schema of a `setnet train` / `setnet check` config file."""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)


class RuntimeConfig(BaseModel):
    threads: int = Field(1, ge=1)
    log_level: str = "INFO"


class DiagnosticsConfig(BaseModel):
    gradcheck_h: float = 1e-5
    gradcheck_subsample: int = Field(200, ge=1, le=200)
    gradcheck_tolerance: float = 1e-5
    gradcheck_floor: float = Field(1e-8, gt=0)  # absolute floor of the relative-error denominator
    n_perms: int = Field(20, ge=1)
    perm_tolerance: float = 1e-9
    check_seed: int = 0
    profile_seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])


class Settings(BaseModel):
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)


def load_settings(config_path: Path | None = None) -> Settings:
    """Load project settings from YAML with environment variable overrides."""
    search_paths = [
        config_path,
        Path.cwd() / "config.yaml",
        Path.home() / ".config" / "setnet" / "config.yaml",
    ]

    raw: dict = {}
    for path in search_paths:
        if path and path.exists():
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
            break

    settings = Settings.model_validate(raw)

    if threads := os.environ.get("SETNET_THREADS"):
        try:
            settings.runtime.threads = max(1, int(threads))
        except ValueError as e:
            raise ConfigError("SETNET_THREADS", f"not an integer: {threads!r}") from e
    if level := os.environ.get("SETNET_LOG_LEVEL"):
        settings.runtime.log_level = level.upper()

    return settings


def load_run_config(path: Path) -> RunConfig:
    """Read a run config: canonical JSON for `.json`, YAML otherwise."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if Path(path).suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError("config", f"cannot parse {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config", f"{path} must hold a mapping at top level")
    return RunConfig.model_validate(raw)
