"""Run configuration: one JSON document covering every pipeline phase."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .encoder import EncoderConfig, EncoderTrainConfig, LossConfig
from .errors import ConfigError, PanoganError
from .pgan import DEFAULT_BUDGETS, GanArchConfig, GanTrainConfig, ProgressiveSchedule
from .preprocess import ClaheParams


@dataclass
class PreprocessSection:
    input_dir: str | None = None
    resize: int | None = 1024
    clahe: ClaheParams = field(default_factory=ClaheParams)
    stride: int | None = None
    min_coverage: float = 0.5
    split: tuple = (0.7, 0.15, 0.15)


@dataclass
class SynthSection:
    n_train: int = 4000
    n_val_normal: int = 100
    n_val_abnormal: int = 100
    n_test_normal: int = 500
    n_test_abnormal: int = 500
    radius: float = 8
    contrast: float = 0.6


@dataclass
class DataSection:
    """Dataset paths, relative to the output directory unless absolute."""

    train: str = "data/train.pano"
    val: str = "data/val.pano"
    test: str = "data/test.pano"


@dataclass
class GanSection:
    arch: GanArchConfig = field(default_factory=GanArchConfig)
    train: GanTrainConfig = field(default_factory=GanTrainConfig)
    budgets: dict = field(default_factory=lambda: dict(DEFAULT_BUDGETS))
    scale_factor: float = 1.0
    fade_decrement: float = 1 / 600
    fade_step: int = 32
    checkpoint_every: int = 0

    def schedule(self) -> ProgressiveSchedule:
        base = ProgressiveSchedule({int(k): v for k, v in self.budgets.items()},
                                   self.fade_decrement, self.fade_step)
        return base.scaled(self.scale_factor) if self.scale_factor != 1 else base


@dataclass
class EncoderSection:
    variant: str = "resnet50"
    width_mult: float = 1.0
    loss: LossConfig = field(default_factory=LossConfig)
    train: EncoderTrainConfig = field(default_factory=EncoderTrainConfig)


@dataclass
class ScoreSection:
    variant: str = "iziz_f"
    batch_size: int = 64
    dump_reconstructions: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    patch_size: int = 64
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    synth: SynthSection = field(default_factory=SynthSection)
    data: DataSection = field(default_factory=DataSection)
    gan: GanSection = field(default_factory=GanSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    score: ScoreSection = field(default_factory=ScoreSection)

    def validate(self) -> "RunConfig":
        if self.patch_size != self.gan.arch.target_size:
            raise ConfigError(f"patch_size {self.patch_size} does not match the GAN target "
                              f"scale {self.gan.arch.target_size}")
        if self.score.variant != self.encoder.loss.variant:
            raise ConfigError(f"scoring variant {self.score.variant!r} does not match the "
                              f"encoder training variant {self.encoder.loss.variant!r}")
        if self.gan.scale_factor <= 0:
            raise ConfigError("gan.scale_factor must be positive")
        if self.score.batch_size < 1 or self.gan.checkpoint_every < 0:
            raise ConfigError("batch sizes and checkpoint intervals must be positive")
        split = self.preprocess.split
        if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1) > 1e-9:
            raise ConfigError("preprocess.split must be three non-negative fractions summing to 1")
        s = self.synth
        if min(s.n_train, s.n_test_normal, s.n_test_abnormal) < 1 or min(
                s.n_val_normal, s.n_val_abnormal) < 0:
            raise ConfigError("synth counts must be positive")
        try:
            self.gan.schedule().for_scales(self.gan.arch.scales)
            self.encoder_config()
        except PanoganError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.encoder.variant, self.gan.arch.latent_dim,
                             self.encoder.width_mult, derive_seed(self.seed, "encoder-init"))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def derive_seed(seed: int, tag: str) -> int:
    """Per-phase sub-seed: global seed plus a fixed hash of the phase tag."""
    digest = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "little")
    return (seed + digest) % 2 ** 31


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown config key {where + '.' if where else ''}{unknown[0]}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if value is None and "None" in str(names[name].type):
            pass
        elif dataclasses.is_dataclass(current):
            value = _build(type(current), value, path)
        elif isinstance(current, tuple):
            value = tuple(value)
        elif isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
        elif isinstance(current, (int, float)) and not isinstance(current, bool) and (
                isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        kwargs[name] = value
    try:
        return cls(**{**{k: getattr(defaults, k) for k in names}, **kwargs})
    except PanoganError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)
