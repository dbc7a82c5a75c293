"""Experiment configuration: YAML files layered over named presets, validated with pydantic."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

MODEL_NAMES = ("projection", "concat", "mean", "transformer-only", "doctorai", "ligdoctor")
FUSION_OF = {"projection": "projection", "concat": "concat", "mean": "mean", "transformer-only": "none"}
REQUIRED_KEYS = ("preset", "seed", "paths", "models")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Paths(_Section):
    work_dir: str
    mapping_dir: str | None = None


class SynthSection(_Section):
    n_patients: int = Field(1000, ge=1)
    latent_signal_strength: float = Field(1.0, ge=0.0, le=1.0)
    n_latent_classes: int = Field(8, ge=1)
    bundle_size: int = Field(4, ge=1)
    history_repeat_prob: float = Field(0.35, ge=0.0, le=1.0)
    note_template_count: int = Field(16, ge=1)


class PreprocessSection(_Section):
    threshold: int = Field(5, ge=1)
    max_source_visits: int = Field(16, ge=1)
    pair_mode: Literal["prefix", "single"] = "prefix"


class EncoderSection(_Section):
    n_layers: int = Field(6, ge=1)
    n_heads: int = Field(4, ge=1)
    hidden_dim: int = Field(64, ge=1)
    ff_dim: int = Field(256, ge=1)
    max_pretrain_len: int = Field(64, ge=8)
    max_vocab: int = Field(4000, ge=16)
    pooling: Literal["mean", "cls"] = "mean"
    extract_layers: int = Field(6, ge=1)
    steps: int = Field(300, ge=0)
    batch_size: int = Field(32, ge=1)
    peak_lr: float = Field(5e-4, gt=0)

    @model_validator(mode="after")
    def _layers(self):
        if self.extract_layers > self.n_layers:
            raise ValueError("extract_layers cannot exceed n_layers")
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        return self


class NLISection(_Section):
    enabled: bool = False
    n_pairs: int = Field(600, ge=10)
    epochs: int = Field(40, ge=1)


class ModelSection(_Section):
    enc_layers: int = Field(2, ge=1)
    dec_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    hidden_dim: int = Field(64, ge=1)
    ff_dim: int = Field(128, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    max_decode_len: int = Field(64, ge=1)
    max_source_tokens: int = Field(64, ge=8)
    code_types: list[Literal["diagnosis", "procedure", "drug"]] = ["diagnosis", "procedure"]
    proj_dim: int | None = None
    note_positional: Literal["none", "sinusoidal", "learned"] = "none"
    label_smoothing: float = Field(0.1, ge=0.0, lt=1.0)
    beam_width: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _heads(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        return self


class TrainSection(_Section):
    steps: int = Field(400, ge=1)
    batch_size: int = Field(64, ge=1)
    peak_lr: float = Field(3e-3, gt=0)
    warmup_steps: int = Field(100, ge=0)


class BaselineSection(_Section):
    scale: Literal["desk", "paper"] = "desk"
    steps: int = Field(400, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1.0, gt=0)


class EvalSection(_Section):
    folds: int = 5
    ks: list[int] = [20, 40, 60]
    level: float = Field(0.95, gt=0.0, lt=1.0)

    @field_validator("folds")
    @classmethod
    def _folds(cls, v):
        if v < 2:
            raise ValueError("cross-validation needs at least 2 folds")
        return v

    @field_validator("ks")
    @classmethod
    def _ks(cls, v):
        if not v or min(v) < 1:
            raise ValueError("ks must be a non-empty list of positive integers")
        return sorted(set(v))


class ExperimentConfig(_Section):
    preset: Literal["tiny", "desk", "paper"]
    seed: int
    paths: Paths
    models: list[Literal[MODEL_NAMES]]
    synth: SynthSection = SynthSection()
    preprocess: PreprocessSection = PreprocessSection()
    encoder: EncoderSection = EncoderSection()
    nli: NLISection = NLISection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    baseline: BaselineSection = BaselineSection()
    eval: EvalSection = EvalSection()

    @field_validator("models")
    @classmethod
    def _models(cls, v):
        if not v:
            raise ValueError("select at least one model")
        if len(set(v)) != len(v):
            raise ValueError("models must not repeat")
        return v

    def uses_notes(self) -> bool:
        return any(FUSION_OF.get(m, "none") != "none" for m in self.models)


PRESETS: dict[str, dict] = {
    "tiny": {
        "synth": {"n_patients": 160},
        "encoder": {"n_layers": 6, "hidden_dim": 32, "ff_dim": 64, "n_heads": 2, "steps": 20, "max_pretrain_len": 32},
        "model": {"hidden_dim": 32, "ff_dim": 64, "enc_layers": 1, "dec_layers": 1, "max_decode_len": 32},
        "train": {"steps": 20, "warmup_steps": 5},
        "baseline": {"steps": 20},
        "eval": {"folds": 2},
    },
    "desk": {},
    "paper": {
        "synth": {"n_patients": 50000},
        "encoder": {
            "n_layers": 12, "n_heads": 12, "hidden_dim": 768, "ff_dim": 3072,
            "max_pretrain_len": 512, "steps": 80000, "batch_size": 224,
        },
        "nli": {"enabled": True},
        "model": {
            "enc_layers": 3, "dec_layers": 3, "n_heads": 8, "hidden_dim": 256, "ff_dim": 512,
            "max_source_tokens": 512, "code_types": ["diagnosis", "procedure", "drug"],
        },
        "train": {"steps": 20000, "peak_lr": 1e-3, "warmup_steps": 1000},
        "baseline": {"scale": "paper", "steps": 20000},
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for e in exc.errors():
        msg = f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}"
        if isinstance(e.get("input"), (str, int, float)) and e["type"] != "missing":
            msg += f" (got {e['input']!r})"
        out.append(msg)
    return out


def config_errors(raw) -> list[str]:
    """Every problem with ``raw`` at once; an empty list means it is valid."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        return ["<root>: config must be a mapping"]
    errors = [f"{k}: required key missing" for k in REQUIRED_KEYS if k not in raw]
    if isinstance(raw.get("paths"), dict) and "work_dir" not in raw["paths"]:
        errors.append("paths.work_dir: required key missing")
    preset = raw.get("preset")
    base = PRESETS.get(preset, {}) if isinstance(preset, str) else {}
    try:
        ExperimentConfig.model_validate(deep_merge(base, raw))
    except ValidationError as exc:
        for msg in _format_errors(exc):
            # missing-key messages are already listed above
            if msg.endswith("Field required"):
                continue
            errors.append(msg)
    return errors


def build_config(raw: dict) -> ExperimentConfig:
    errors = config_errors(raw)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return ExperimentConfig.model_validate(deep_merge(PRESETS[raw["preset"]], raw))


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """Read YAML at ``path`` (OSError if unreadable), apply ``overrides`` and validate."""
    text = Path(path).read_text(encoding="utf-8")
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    if overrides and isinstance(raw, dict):
        raw = deep_merge(raw, overrides)
    return build_config(raw)


def validate_config(path: str | Path) -> ExperimentConfig | list[str]:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    errors = config_errors(raw)
    return errors if errors else build_config(raw)


def preset_config(preset: str, work_dir: str | Path, seed: int = 0, models: list[str] | None = None, **sections) -> ExperimentConfig:
    raw = {"preset": preset, "seed": seed, "paths": {"work_dir": str(work_dir)}, "models": list(models or MODEL_NAMES)}
    return build_config(deep_merge(raw, sections))


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True)
