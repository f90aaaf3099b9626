"""Experiment configuration: one YAML file describes a full run.

Sections: ``model`` and ``train`` are required; ``precision``, ``bn``,
``memory``, ``comm``, ``data`` and ``output`` fall back to defaults. Unknown
keys are rejected. :func:`resolved_dump` echoes every value, defaults
included.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from deskdp.errors import ConfigError
from deskdp.precision import (DEFAULT_BACKOFF, DEFAULT_GROWTH, DEFAULT_GROWTH_INTERVAL, DEFAULT_INIT_SCALE,
                              DEFAULT_MAX_SCALE, DEFAULT_MIN_SCALE, LossScaleState)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Strict):
    """The reference CNN; only its sizes are configurable."""

    arch: Literal["reference"] = "reference"
    in_channels: int = Field(3, ge=1)
    image_size: int = Field(8, ge=3)
    classes: int = Field(4, ge=2)
    conv1: int = Field(8, ge=1)
    conv2: int = Field(16, ge=1)
    hidden: int = Field(64, ge=1)
    leaky_slope: float = Field(0.01, gt=0)
    pad_layers: int = Field(0, ge=0)
    init_seed: int | None = None


class LossScaleConfig(_Strict):
    mode: Literal["static", "dynamic"] = "dynamic"
    init: float = DEFAULT_INIT_SCALE
    growth_interval: int = DEFAULT_GROWTH_INTERVAL
    growth_factor: float = DEFAULT_GROWTH
    backoff_factor: float = DEFAULT_BACKOFF
    min: float = DEFAULT_MIN_SCALE
    max: float = DEFAULT_MAX_SCALE

    @model_validator(mode="after")
    def _valid(self):
        self.state()
        return self

    def state(self) -> LossScaleState:
        return LossScaleState(self.init, 0, self.mode, self.growth_interval, self.growth_factor,
                              self.backoff_factor, self.min, self.max)


class PrecisionConfig(_Strict):
    mode: Literal["fp32", "mixed"] = "fp32"
    loss_scale: LossScaleConfig = LossScaleConfig()


class BNConfig(_Strict):
    mode: Literal["plain", "sync", "iabn"] = "plain"
    eps: float = Field(1e-5, gt=0)


class MemoryConfig(_Strict):
    checkpointing: bool = False
    policy: Union[Literal["sqrt"], list[int]] = "sqrt"


class CommConfig(_Strict):
    backend: Literal["ring", "ps"] = "ring"
    K: int = Field(1, ge=1, le=64)
    transport: Literal["inproc", "socket"] = "inproc"
    timeout: float = Field(120.0, gt=0)
    bandwidth_gbps: float = Field(25.0, gt=0)
    latency: float = Field(0.0, ge=0)
    payload_mb: float = Field(100.0, gt=0)
    compute_time: float = Field(0.5, gt=0)
    overlap: float = Field(0.0, ge=0, le=1)


class TrainConfig(_Strict):
    steps: int = Field(ge=1)
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_per_worker: int = Field(8, ge=1)
    seed: int = 0
    checkpoint_every: int = Field(0, ge=0)


class DataConfig(_Strict):
    n: int = Field(512, ge=1)
    noise: float = Field(0.3, ge=0)
    seed: int | None = None


class OutputConfig(_Strict):
    dir: str = "runs/default"
    metrics: str = "metrics.csv"
    checkpoint: str = "checkpoint.ckpt"
    resolved: str = "resolved.yaml"

    @field_validator("metrics", "checkpoint", "resolved")
    @classmethod
    def _plain_name(cls, v: str) -> str:
        if not v or os.sep in v or v in (".", ".."):
            raise ValueError(f"must be a plain file name, got {v!r}")
        return v


class Config(_Strict):
    model: ModelConfig
    train: TrainConfig
    precision: PrecisionConfig = PrecisionConfig()
    bn: BNConfig = BNConfig()
    memory: MemoryConfig = MemoryConfig()
    comm: CommConfig = CommConfig()
    data: DataConfig = DataConfig()
    output: OutputConfig = OutputConfig()

    @property
    def global_batch(self) -> int:
        return self.comm.K * self.train.batch_per_worker

    @property
    def data_seed(self) -> int:
        return self.train.seed if self.data.seed is None else self.data.seed

    @property
    def output_dir(self) -> Path:
        return Path(self.output.dir)

    def replace(self, **sections) -> "Config":
        """Copy with some fields changed, e.g. ``cfg.replace(comm={"K": 2})``."""
        data = self.model_dump()
        for name, updates in sections.items():
            data[name] = {**data[name], **updates}
        return parse_config_dict(data)


def _path_of(loc) -> str:
    return ".".join(str(p) for p in loc)


def parse_config_dict(data) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("", "top level must be a mapping")
    try:
        return Config.model_validate(data)
    except ValidationError as exc:
        # a typo like "modle" shows up as both unknown and missing; name the typo
        errs = sorted(exc.errors(), key=lambda e: e["type"] != "extra_forbidden")
        err = errs[0]
        path = _path_of(err["loc"])
        if err["type"] == "extra_forbidden":
            raise ConfigError(path, "unknown key") from None
        if err["type"] == "missing":
            raise ConfigError(path, "required key missing") from None
        raise ConfigError(path, err["msg"]) from None


def parse_config(text: str) -> Config:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML: {exc}") from None
    return parse_config_dict(data if data is not None else {})


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    return parse_config(text)


def resolved_dump(cfg: Config) -> str:
    return yaml.safe_dump(cfg.model_dump(), sort_keys=False)


def config_digest(cfg: Config) -> str:
    """SHA-256 over everything that affects the numbers (``output`` is excluded)."""
    body = cfg.model_dump(exclude={"output"})
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def validate_paths(cfg: Config) -> Path:
    """Create the output directory and confirm it is writable, before any work starts."""
    out = cfg.output_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("output.dir", f"cannot create {out}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError("output.dir", f"{out} is not writable")
    return out
