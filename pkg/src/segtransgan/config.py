"""JSON run configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import PhantomConfig
from .models import ConfigError, DiscriminatorKind, GeneratorConfig
from .nn import AttentionConfig
from .training import LOOP_KINDS, TrainConfig


@dataclass
class DataSection:
    root: str = "data"
    count: int = 131
    train_fraction: float = 95 / 131
    seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)


@dataclass
class ModelSection:
    base_channels: int = 16
    downsample_stages: int = 2
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    discriminator: str = "pixel"
    patch_size: int = 70
    conditional: bool = True
    disc_channels: int = 32

    def generator(self) -> GeneratorConfig:
        att = AttentionConfig(self.d_model, self.n_heads, self.n_blocks)
        return GeneratorConfig(base_channels=self.base_channels, downsample_stages=self.downsample_stages,
                               attention=att)

    def discriminator_kind(self) -> DiscriminatorKind:
        return DiscriminatorKind(self.discriminator, self.patch_size, self.conditional, self.disc_channels)


@dataclass
class TrainSection:
    loop: str = "gan"
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_seg: float = 100.0
    lambda_cyc: float = 10.0
    epochs: int = 10
    batch_size: int = 8
    max_iterations: typing.Optional[int] = None
    seed: int = 0
    checkpoint_dir: str = "runs/checkpoints"
    checkpoint_interval: int = 100
    log_path: str = "runs/train_log.csv"
    deterministic: bool = True
    resume: typing.Optional[str] = None

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.beta1, self.beta2, self.eps, self.epochs, self.batch_size,
                           self.lambda_seg, self.lambda_cyc, self.seed, self.max_iterations)


@dataclass
class EvalSection:
    threshold: float = 0.5
    largest_component: bool = True
    fill_holes: bool = False
    connectivity: int = 4
    split: str = "test"
    output_dir: str = "runs/eval"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "RunConfig":
        """Build every derived config once so bad values fail early."""
        if self.train.loop not in LOOP_KINDS:
            raise ConfigError(f"train.loop must be one of {LOOP_KINDS}, got {self.train.loop!r}")
        if self.eval.split not in ("train", "test"):
            raise ConfigError(f"eval.split must be 'train' or 'test', got {self.eval.split!r}")
        if self.eval.connectivity not in (4, 8):
            raise ConfigError("eval.connectivity must be 4 or 8")
        if not 0 < self.eval.threshold < 1:
            raise ConfigError("eval.threshold must lie in (0, 1)")
        try:
            self.model.generator()
            self.model.discriminator_kind()
            self.train.train_config()
            if self.data.count < 2:
                raise ValueError("data.count must be at least 2")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.data.phantom.size % self.model.generator().divisor:
            raise ConfigError(f"phantom size {self.data.phantom.size} not divisible by "
                              f"{self.model.generator().divisor}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "").validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in d.items():
        path = f"{where}.{name}" if where else name
        kwargs[name] = _coerce(hints[name], value, path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(_coerce(a, v, path) for a, v in zip(typing.get_args(tp), value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value
