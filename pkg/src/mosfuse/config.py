"""Declarative run configuration (YAML on disk, validated with pydantic)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .objective import LossConfig


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSpec(_Section):
    format: str
    path: str
    rules: Optional[str] = None  # None -> format defaults; "" -> no filtering
    check_audio: bool = True


class AudioConfig(_Section):
    sample_rate: int = 16_000
    n_frames: int = Field(2, ge=1)
    frame_length: int = Field(65_536, ge=1)
    n_mels: int = Field(128, ge=8)
    windows: List[int] = [512, 1024, 2048, 4096]

    @model_validator(mode="after")
    def _windows_fit(self):
        if not self.windows:
            raise ValueError("at least one STFT window size is required")
        if max(self.windows) > self.frame_length:
            raise ValueError(f"window {max(self.windows)} exceeds frame length {self.frame_length}")
        return self


class SpecEncoderConfig(_Section):
    type: str = "efficientnet_v2_s"
    checkpoints: Optional[List[str]] = None  # one state-dict per window
    channels: int = 8  # tiny encoder only
    out_hw: Tuple[int, int] = (4, 4)  # tiny encoder only


class SSLEncoderConfig(_Section):
    type: str = "wav2vec2"
    checkpoint: Optional[str] = None
    layers: int = 3  # tiny encoder only
    dim: int = 8
    hop: int = 160
    kernel: int = 400
    # "frames": feed the SSL branch the same random frames as the spectrogram branch.
    input: Literal["utterance", "frames"] = "utterance"


class ModelConfig(_Section):
    spec: SpecEncoderConfig = SpecEncoderConfig()
    ssl: SSLEncoderConfig = SSLEncoderConfig()
    domain_encoding: bool = True
    domain_dim: int = 1
    head_bias_init: Optional[float] = None  # None keeps the default Linear init


class LossSection(_Section):
    alpha: float = 0.2
    lambda_con: float = 0.2
    lambda_mse: float = 0.7
    mixup_alpha: float = 0.4
    ordered_pairs: bool = True

    def build(self) -> LossConfig:
        return LossConfig(**self.model_dump())


class StagePlanConfig(_Section):
    lr_start: float
    lr_end: float
    epochs: int = Field(ge=1)
    batch_size: int = Field(ge=1)
    max_steps: Optional[int] = None

    @model_validator(mode="after")
    def _lr_order(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        return self


DEFAULT_STAGES: Dict[str, dict] = {
    "spec-s1": dict(lr_start=1e-3, lr_end=1e-7, epochs=20, batch_size=10),
    "ssl-s1-frozen": dict(lr_start=1e-3, lr_end=1e-7, epochs=20, batch_size=32),
    "ssl-s1-finetune": dict(lr_start=3e-5, lr_end=1e-9, epochs=5, batch_size=32),
    "s2-fusion": dict(lr_start=1e-3, lr_end=1e-5, epochs=8, batch_size=16),
    "s3-finetune": dict(lr_start=5e-5, lr_end=1e-8, epochs=2, batch_size=8),
    # Fine-tuning plans for the stage ablations.
    "s3-no-stage2": dict(lr_start=1e-4, lr_end=1e-7, epochs=20, batch_size=8),
    "s3-only-stage3": dict(lr_start=1e-3, lr_end=1e-7, epochs=20, batch_size=8),
}


class InferenceSection(_Section):
    tta_reps: int = Field(5, ge=1)
    domain_mode: Literal["fixed", "average", "off"] = "fixed"
    domains: List[str] = ["BVCC"]


class EvaluationSection(_Section):
    zoom_rates: List[float] = [1.0]
    levels: List[Literal["utterance", "system"]] = ["utterance", "system"]
    ktau_variant: Literal["a", "b"] = "b"
    clamp: bool = False  # clip predictions to [1, 5] before scoring (presentation only)


class RunConfig(_Section):
    datasets: List[DatasetSpec] = []
    test_datasets: List[DatasetSpec] = []
    audio: AudioConfig = AudioConfig()
    model: ModelConfig = ModelConfig()
    loss: LossSection = LossSection()
    stages: Dict[str, StagePlanConfig] = Field(default_factory=dict, validate_default=True)
    folds: int = Field(5, ge=2)
    seed: int = 0
    weight_decay: float = 1e-4
    num_workers: int = 0
    inference: InferenceSection = InferenceSection()
    evaluation: EvaluationSection = EvaluationSection()
    run_root: str = "run"

    @field_validator("stages", mode="before")
    @classmethod
    def _merge_stage_defaults(cls, value):
        merged = {name: dict(plan) for name, plan in DEFAULT_STAGES.items()}
        for name, plan in (value or {}).items():
            if name not in DEFAULT_STAGES:
                raise ValueError(f"unknown stage {name!r}; known: {sorted(DEFAULT_STAGES)}")
            if isinstance(plan, BaseModel):
                plan = plan.model_dump()
            merged[name].update(plan)
        return merged

    def snapshot(self) -> dict:
        return json.loads(self.model_dump_json())


def _resolve(base: Path, p: str) -> str:
    path = Path(p).expanduser()
    return str(path if path.is_absolute() else (base / path).resolve())


def load_config(path: Union[str, Path, None] = None, data: Optional[dict] = None) -> RunConfig:
    """Load and validate a run config; relative paths resolve against its directory.

    Every referenced dataset path and checkpoint must exist.
    """
    if data is None:
        if path is None:
            raise ConfigError("need a config path or data")
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = path.parent.resolve()
    else:
        base = Path(path).parent.resolve() if path is not None else Path.cwd()
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    problems = []
    for section in (cfg.datasets, cfg.test_datasets):
        for ds in section:
            ds.path = _resolve(base, ds.path)
            if not Path(ds.path).exists():
                problems.append(f"dataset path not found: {ds.path}")
    if cfg.model.spec.checkpoints:
        cfg.model.spec.checkpoints = [_resolve(base, c) for c in cfg.model.spec.checkpoints]
        problems += [f"checkpoint not found: {c}" for c in cfg.model.spec.checkpoints if not Path(c).exists()]
        if len(cfg.model.spec.checkpoints) != len(cfg.audio.windows):
            problems.append("need one spectrogram encoder checkpoint per window size")
    if cfg.model.ssl.checkpoint:
        cfg.model.ssl.checkpoint = _resolve(base, cfg.model.ssl.checkpoint)
        if not Path(cfg.model.ssl.checkpoint).exists():
            problems.append(f"checkpoint not found: {cfg.model.ssl.checkpoint}")
    cfg.run_root = _resolve(base, cfg.run_root)
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def config_schema() -> dict:
    return RunConfig.model_json_schema()
