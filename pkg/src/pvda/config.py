"""Experiment configuration.

Configs are nested dataclasses.  On disk they are flat ``section.key = value``
text files (``#`` starts a comment); the same dotted keys are accepted as
``--override`` flags on the command line.  Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class Backbone(str, enum.Enum):
    FULL_RESIDUAL_50 = "FULL_RESIDUAL_50"
    TINY_CNN = "TINY_CNN"


class PoolMode(str, enum.Enum):
    STRIDED_CONV = "strided-conv"
    MAX_POOL = "max-pool"
    AVG_POOL = "avg-pool"


class Variant(str, enum.Enum):
    PVDA = "PVDA"
    CONSTANT_ALPHA = "CONSTANT_ALPHA"
    NO_RESTART = "NO_RESTART"


PARAM_GROUPS = ("backbone", "encoder_rest", "classifier", "discriminator")


@dataclass
class ToyConfig:
    num_locations: int = 20
    uav_per_location: int = 8
    image_size: int = 32
    view_shift_strength: float = 1.0
    seed: int = 0
    num_eval_locations: int = 10
    num_distractors: int = 20
    noise_std: float = 0.05
    pattern_contrast: float = 0.3
    uav_jitter: int = 6  # max UAV crop offset in pixels at view_shift_strength 1

    def validate(self) -> None:
        if self.num_locations < 2:
            raise ConfigError("toy.num_locations must be >= 2")
        if self.uav_per_location < 1:
            raise ConfigError("toy.uav_per_location must be >= 1")
        if self.view_shift_strength < 0:
            raise ConfigError("toy.view_shift_strength must be >= 0")
        if self.image_size < 8:
            raise ConfigError("toy.image_size must be >= 8")
        if not 0.0 < self.pattern_contrast <= 1.0:
            raise ConfigError("toy.pattern_contrast must be in (0, 1]")
        if self.uav_jitter < 0:
            raise ConfigError("toy.uav_jitter must be >= 0")
        if self.num_eval_locations < 1 or self.num_distractors < 0:
            raise ConfigError("toy.num_eval_locations must be >= 1, toy.num_distractors >= 0")


@dataclass
class DataConfig:
    source: str = "toy"  # toy | university1652
    root: str = ""
    image_size: int = 32
    flip: bool = True

    def validate(self) -> None:
        if self.source not in ("toy", "university1652"):
            raise ConfigError(f"data.source must be 'toy' or 'university1652', got {self.source!r}")
        if self.source == "university1652" and not self.root:
            raise ConfigError("data.root is required for data.source=university1652")


@dataclass
class EncoderConfig:
    backbone: Backbone = Backbone.TINY_CNN
    image_size: int = 32
    d_embed: int = 512
    num_rings: int = 4
    remove_final_downsample: bool = True
    tiny_channels: tuple[int, ...] = (16, 32, 64, 64)
    refine_depth: int = 1
    pretrained: bool = True

    def validate(self) -> None:
        if self.num_rings != 4:
            raise ConfigError("encoder.num_rings is fixed at 4")
        if self.refine_depth < 1:
            raise ConfigError("encoder.refine_depth must be >= 1")
        if self.backbone is Backbone.TINY_CNN and len(self.tiny_channels) != 4:
            raise ConfigError("encoder.tiny_channels needs 4 stage widths")
        hf = self.feature_size()
        if hf % (2 * self.num_rings):
            raise ConfigError(
                f"feature map side {hf} (image {self.image_size}) is not divisible by {2 * self.num_rings}"
            )

    @property
    def feature_channels(self) -> int:
        if self.backbone is Backbone.FULL_RESIDUAL_50:
            return 2048
        return self.tiny_channels[-1]

    def feature_size(self) -> int:
        if self.backbone is Backbone.FULL_RESIDUAL_50:
            stride = 16 if self.remove_final_downsample else 32
        else:
            stride = 2
        if self.image_size % stride:
            raise ConfigError(f"image size {self.image_size} is not divisible by backbone stride {stride}")
        return self.image_size // stride


@dataclass
class HeadConfig:
    dropout: float = 0.5
    disc_channels: tuple[int, ...] = ()  # empty: Cf/2, Cf/4, Cf/8
    disc_kernel: int = 3
    disc_pool: PoolMode = PoolMode.STRIDED_CONV
    disc_norm: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("heads.dropout must be in [0, 1)")
        if self.disc_channels and len(self.disc_channels) != 3:
            raise ConfigError("heads.disc_channels needs 3 widths")
        if self.disc_kernel % 2 == 0:
            raise ConfigError("heads.disc_kernel must be odd")


def _default_lrs() -> dict[str, float]:
    return {"backbone": 0.001, "encoder_rest": 0.01, "classifier": 0.01, "discriminator": 0.002}


@dataclass
class ScheduleConfig:
    alpha_init: float = 0.9
    alpha_step: float = 0.1
    alpha_period_epochs: int = 140
    max_alpha: float | None = None
    lr_decay_factor: float = 0.8
    lr_decay_epochs_within_cycle: tuple[int, ...] = (60, 120)
    base_lrs: dict[str, float] = field(default_factory=_default_lrs)
    variant: Variant = Variant.PVDA
    restart_discriminator_lr: bool = True

    def validate(self) -> None:
        if self.alpha_init < 0 or self.alpha_step < 0:
            raise ConfigError("schedule.alpha_init and schedule.alpha_step must be >= 0")
        if self.alpha_period_epochs <= 0:
            raise ConfigError("schedule.alpha_period_epochs must be positive")
        decays = self.lr_decay_epochs_within_cycle
        if decays and self.alpha_period_epochs <= max(decays):
            raise ConfigError("schedule.alpha_period_epochs must exceed every within-cycle decay epoch")
        if set(self.base_lrs) != set(PARAM_GROUPS):
            raise ConfigError(f"schedule.base_lrs must define exactly {PARAM_GROUPS}")
        if any(v <= 0 for v in self.base_lrs.values()):
            raise ConfigError("all learning rates must be positive")

    @classmethod
    def toy(cls, **kwargs: Any) -> "ScheduleConfig":
        """Full-scale schedule compressed by 10x (period 14, decays at 6 and 12)."""
        kwargs.setdefault("alpha_period_epochs", 14)
        kwargs.setdefault("lr_decay_epochs_within_cycle", (6, 12))
        return cls(**kwargs)


@dataclass
class TrainConfig:
    epochs: int = 42
    batch_size: int = 16
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    adam_betas: tuple[float, ...] = (0.9, 0.999)
    checkpoint_every: int = 0  # 0: final checkpoint only
    same_batch: bool = True
    use_discriminator: bool = True
    disc_steps: int = 1  # discriminator updates per iteration in step 1
    steps_per_epoch: int = 0  # 0: ceil(len(train) / batch_size)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if self.disc_steps < 1:
            raise ConfigError("train.disc_steps must be >= 1")
        if len(self.adam_betas) != 2:
            raise ConfigError("train.adam_betas needs two values")


@dataclass
class EvalConfig:
    protocols: tuple[str, ...] = ("uav_sat_single", "uav_sat_multi", "sat_uav")
    topk_dump: int = 5
    batch_size: int = 64


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            if hasattr(sub, "validate"):
                sub.validate()
        if self.encoder.image_size != self.data.image_size:
            raise ConfigError("encoder.image_size must equal data.image_size")

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(dataclasses.asdict(self))

    def flat(self) -> dict[str, Any]:
        return _flatten(self.to_dict())

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        cfg = cls()
        apply_overrides(cfg, {k: v for k, v in _flatten(d).items()}, parsed=True)
        return cfg


def toy_profile() -> ExperimentConfig:
    """Desk-scale profile: synthetic data, tiny CNN, compressed schedules."""
    cfg = ExperimentConfig()
    cfg.encoder = EncoderConfig(backbone=Backbone.TINY_CNN, image_size=32, d_embed=16)
    cfg.data = DataConfig(source="toy", image_size=32)
    cfg.schedule = ScheduleConfig.toy()
    # a tiny discriminator on 64 channels collapses without normalisation and
    # lags the encoder with a single update per iteration
    cfg.heads.disc_norm = True
    cfg.train.disc_steps = 5
    return cfg


def full_profile(image_size: int = 256) -> ExperimentConfig:
    """Settings reported for University-1652 training."""
    cfg = ExperimentConfig()
    cfg.encoder = EncoderConfig(backbone=Backbone.FULL_RESIDUAL_50, image_size=image_size, d_embed=512)
    cfg.data = DataConfig(source="university1652", image_size=image_size)
    cfg.schedule = ScheduleConfig()
    cfg.train = TrainConfig(epochs=480, batch_size=16)
    return cfg


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _flatten(d: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(raw: Any, tp: Any, key: str) -> Any:
    """Convert a raw value (string from a file/flag, or JSON value) to ``tp``."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        non_none = [a for a in args if a is not type(None)]
        if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("none", "null", "")):
            return None
        return _coerce(raw, non_none[0], key)
    try:
        if origin is tuple:
            if isinstance(raw, str):
                items = [s.strip() for s in raw.strip("()[] ").split(",") if s.strip()]
            else:
                items = list(raw)
            return tuple(_coerce(x, args[0], key) for x in items)
        if tp is bool:
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(tp, type) and issubclass(tp, enum.Enum):
            return tp(str(raw).strip())
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return str(raw).strip()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported config type for {key}: {tp}")


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any], parsed: bool = False) -> ExperimentConfig:
    """Set dotted keys (``schedule.variant``, ``schedule.base_lrs.backbone``) in place."""
    for key, raw in overrides.items():
        parts = key.strip().split(".")
        obj: Any = cfg
        for i, part in enumerate(parts):
            if isinstance(obj, dict):
                if part not in obj or i != len(parts) - 1:
                    raise ConfigError(f"unknown config key: {key}")
                obj[part] = _coerce(raw, float, key)
                break
            if not dataclasses.is_dataclass(obj):
                raise ConfigError(f"unknown config key: {key}")
            hints = typing.get_type_hints(type(obj))
            if part not in hints:
                raise ConfigError(f"unknown config key: {key}")
            if i == len(parts) - 1:
                tp = hints[part]
                if typing.get_origin(tp) is dict:
                    if not isinstance(raw, dict):
                        raise ConfigError(f"{key} is a section; set {key}.<name> instead")
                    setattr(obj, part, {k: float(v) for k, v in raw.items()})
                else:
                    setattr(obj, part, _coerce(raw, tp, key))
            else:
                obj = getattr(obj, part)
    return cfg


def parse_override_list(items: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_config_file(cfg: ExperimentConfig, path: str | Path) -> None:
    lines = []
    for k, v in cfg.flat().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {'none' if v is None else v}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None,
                base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base if base is not None else toy_profile()
    if path is not None:
        apply_overrides(cfg, read_config_file(path))
    if overrides:
        apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg
