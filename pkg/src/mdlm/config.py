"""Model constants and the JSON run configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from mdlm.frontend import N_MELS


class ConfigError(ValueError):
    """Invalid or unknown configuration key."""


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 256
    max_window_frames: int = 1008
    time_patch: int = 4
    n_mels: int = N_MELS

    def __post_init__(self) -> None:
        if self.max_window_frames % self.time_patch:
            raise ConfigError("max_window_frames must be divisible by time_patch")

    @property
    def max_positions(self) -> int:
        return self.max_window_frames // self.time_patch


@dataclass
class ProjectorConfig:
    stack_factor: int = 5
    hidden_dim: int | None = None  # defaults to 2 * decoder d_model

    def __post_init__(self) -> None:
        if self.stack_factor < 1:
            raise ConfigError("stack_factor must be >= 1")


@dataclass
class DecoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 256
    vocab_size: int = 259
    max_positions: int = 512


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    @property
    def projector_hidden(self) -> int:
        return self.projector.hidden_dim or 2 * self.decoder.d_model

    # Fixed field order used when the config travels inside a checkpoint.
    _FLAT = (
        ("encoder", "d_model"), ("encoder", "n_layers"), ("encoder", "n_heads"), ("encoder", "ff_dim"),
        ("encoder", "max_window_frames"), ("encoder", "time_patch"), ("encoder", "n_mels"),
        ("projector", "stack_factor"), ("projector", "hidden_dim"),
        ("decoder", "d_model"), ("decoder", "n_layers"), ("decoder", "n_heads"), ("decoder", "ff_dim"),
        ("decoder", "vocab_size"), ("decoder", "max_positions"),
    )

    def to_vector(self) -> list[int]:
        out = []
        for section, name in self._FLAT:
            value = getattr(getattr(self, section), name)
            if section == "projector" and name == "hidden_dim":
                value = self.projector_hidden
            out.append(int(value))
        return out

    @classmethod
    def from_vector(cls, values) -> ModelConfig:
        values = [int(v) for v in values]
        if len(values) != len(cls._FLAT):
            raise ConfigError("model config vector has the wrong length")
        sections: dict[str, dict[str, int]] = {"encoder": {}, "projector": {}, "decoder": {}}
        for (section, name), value in zip(cls._FLAT, values):
            sections[section][name] = value
        return cls(EncoderConfig(**sections["encoder"]), ProjectorConfig(**sections["projector"]),
                   DecoderConfig(**sections["decoder"]))


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key: {where}.{key}")
    return cls(**data)


@dataclass
class StageOverrides:
    total_steps: int | None = None
    warmup_steps: int | None = None
    peak_lr: float | None = None
    weight_decay: float | None = None
    batch_size: int | None = None
    num_samples: int | None = None
    task: str | None = None


@dataclass
class BenchConfig:
    durations: list[float] = field(default_factory=lambda: [1.0, 5.0, 10.0, 30.0])
    batch_sizes: list[int] = field(default_factory=lambda: [1, 4, 8])
    reps: int = 5
    warmup: int = 2
    rounds: int = 3
    out_tokens: int = 100
    mem_cap_mb: float | None = None
    padding_samples: int = 1000
    padding_batch: int = 8


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stage: StageOverrides = field(default_factory=StageOverrides)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        for key in data:
            if key not in ("model", "stage", "bench"):
                raise ConfigError(f"unknown config key: {key}")
        model = data.get("model", {})
        if not isinstance(model, dict):
            raise ConfigError("model must be an object")
        for key in model:
            if key not in ("encoder", "projector", "decoder"):
                raise ConfigError(f"unknown config key: model.{key}")
        return cls(
            model=ModelConfig(
                _build(EncoderConfig, model.get("encoder", {}), "model.encoder"),
                _build(ProjectorConfig, model.get("projector", {}), "model.projector"),
                _build(DecoderConfig, model.get("decoder", {}), "model.decoder"),
            ),
            stage=_build(StageOverrides, data.get("stage", {}), "stage"),
            bench=_build(BenchConfig, data.get("bench", {}), "bench"),
        )

    @classmethod
    def load(cls, path: str | Path | None) -> RunConfig:
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)
