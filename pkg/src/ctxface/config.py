"""Run configuration with flat dotted keys (``stream.face.latent_dim: 512``)."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .classifier import LossWeights
from .data import RAVDESS_CLASSES
from .errors import ConfigurationError
from .stream import StreamConfig

ABLATION_MODES = ("face_context", "face_face", "audio_only", "face_only", "strict_audio")


@dataclass
class TrainConfig:
    batch_size: int = 16
    pretrain_epochs: int = 30
    context_pretrain_epochs: int | None = None  # None: same as pretrain_epochs
    pretrain_frames_per_clip: int = 2
    pretrain_holdout: float = 0.1
    lr_milestones: tuple = (150, 300)
    lr_factor: float = 0.1
    milestone_reference_epochs: int = 400
    head_epochs: int = 20
    downstream_epochs: int = 20
    downstream_lr: float = 3e-5
    head_lr: float | None = None  # None: downstream_lr
    downstream_batch_size: int = 16
    downstream_weight_decay: float = 0.01
    swap_probability: float = 0.5
    frames_per_clip: int = 16


@dataclass
class SynthConfig:
    n_identities: int = 24
    clips_per_identity: int = 14
    signal_strength: float = 1.0
    face_strength: float = 1.0
    marker_dropout: float = 0.12
    n_frames: int = 20


@dataclass
class PathConfig:
    manifest: str = "data/manifest.jsonl"
    out: str = "runs/default"
    face_checkpoint: str = ""  # empty: <out>/face_stream.pt
    context_checkpoint: str = ""  # empty: <out>/context_stream.pt
    model_checkpoint: str = ""  # empty: <out>/model.pt


@dataclass
class StreamsConfig:
    face: StreamConfig = field(default_factory=StreamConfig.face)
    context: StreamConfig = field(default_factory=StreamConfig.context)


@dataclass
class RunConfig:
    stream: StreamsConfig = field(default_factory=StreamsConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    gamma: float = 1.0
    k: int = 10
    seed: int = 0
    ablation_mode: str = "face_context"
    classes: tuple = RAVDESS_CLASSES

    def validate(self) -> "RunConfig":
        if not math.isfinite(self.gamma):
            raise ConfigurationError("gamma must be finite")
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigurationError(f"ablation_mode must be one of {ABLATION_MODES}")
        if self.stream.face.latent_dim != self.stream.context.latent_dim:
            raise ConfigurationError("face and context latent dimensions must match")
        if self.stream.face.input_channels != 3 or self.stream.context.input_channels != 1:
            raise ConfigurationError("face stream takes 3 channels, context stream 1")
        if self.stream.context.input_size != 128:
            raise ConfigurationError("context stream input_size must be 128 (the Mel patch size)")
        if len(self.classes) < 2:
            raise ConfigurationError("need at least two classes")
        return self

    @property
    def out_dir(self) -> Path:
        return Path(self.paths.out)

    def checkpoint(self, which: str) -> Path:
        explicit = getattr(self.paths, f"{which}_checkpoint")
        default = {"face": "face_stream.pt", "context": "context_stream.pt", "model": "model.pt"}[which]
        return Path(explicit) if explicit else self.out_dir / default


def to_flat(obj, prefix: str = "") -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(to_flat(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def _coerce(current, value, key):
    if value is None:
        return None
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, (tuple, list)):
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            items = list(value)
            if current and isinstance(current[0], (int, float)):
                items = [type(current[0])(v) for v in items]
            return tuple(items)
        if current is None:
            if isinstance(value, str):
                for cast in (int, float):
                    try:
                        return cast(value)
                    except ValueError:
                        pass
            return value
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"bad value {value!r} for {key}") from e


def _set(obj, dotted: str, value, full_key: str):
    head, _, rest = dotted.partition(".")
    names = {f.name for f in dataclasses.fields(obj)}
    if head not in names:
        raise ConfigurationError(f"unknown config key {full_key!r}")
    current = getattr(obj, head)
    if rest:
        if not dataclasses.is_dataclass(current):
            raise ConfigurationError(f"unknown config key {full_key!r}")
        _set(current, rest, value, full_key)
    else:
        if dataclasses.is_dataclass(current):
            raise ConfigurationError(f"{full_key!r} is a section, not a value")
        object.__setattr__(obj, head, _coerce(current, value, full_key))


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    for k, v in overrides.items():
        _set(cfg, k, v, k)
    try:
        # re-run the dataclass checks on the edited sections
        cfg.stream.face = StreamConfig(**dataclasses.asdict(cfg.stream.face))
        cfg.stream.context = StreamConfig(**dataclasses.asdict(cfg.stream.context))
        cfg.loss = LossWeights(cfg.loss.alpha)
    except (ValueError, TypeError) as e:
        raise ConfigurationError(str(e)) from e
    return cfg.validate()


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} not found")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{path}: expected a mapping of dotted keys")
        values.update(loaded)
    values.update(overrides or {})
    return apply_overrides(cfg, values)


def dump_config(cfg: RunConfig, path: str | Path):
    Path(path).write_text(yaml.safe_dump(to_flat(cfg), sort_keys=True))
