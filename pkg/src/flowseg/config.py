"""Experiment configuration: nested dataclasses loaded from and dumped to YAML."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .data import SyntheticShapeSpec, is_valid_size, split_sizes
from .flow import FlowConfig
from .nets import CodecConfig, ConvStackConfig, VelocityNetConfig
from .sampler import OdeConfig
from .training import OptimConfig


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | directory
    directory: str | None = None
    size: int = 32
    channels: int = 3
    count: int = 200
    shapes_per_image: tuple[int, int] = (1, 3)
    boundary_jitter: float = 0.6
    texture_noise: float = 0.05
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def synthetic_spec(self) -> SyntheticShapeSpec:
        return SyntheticShapeSpec(
            count=self.count,
            size=self.size,
            shapes_per_image=tuple(self.shapes_per_image),
            boundary_jitter=self.boundary_jitter,
            texture_noise=self.texture_noise,
            seed=self.seed,
            channels=self.channels,
        )


@dataclass
class StackSection:
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    blocks_per_stage: int = 1
    use_attention_at: tuple[int, ...] = (2,)

    def build(self) -> ConvStackConfig:
        return ConvStackConfig(
            base_channels=self.base_channels,
            channel_multipliers=tuple(self.channel_multipliers),
            blocks_per_stage=self.blocks_per_stage,
            use_attention_at=tuple(self.use_attention_at),
        )


@dataclass
class CodecSection:
    stack: StackSection = field(default_factory=StackSection)
    beta: float = 1e-4
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 8

    def optim(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, batch_size=self.batch_size)


@dataclass
class VaeSection:
    latent_channels: int = 3
    seed: int = 0
    image: CodecSection = field(default_factory=CodecSection)
    mask: CodecSection = field(default_factory=CodecSection)


@dataclass
class FlowSection:
    space: str = "latent"  # latent | pixel
    sigma: float = 0.0
    stack: StackSection = field(default_factory=StackSection)
    time_embedding_dim: int = 64
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0

    def optim(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, batch_size=self.batch_size)

    def flow_config(self) -> FlowConfig:
        return FlowConfig(sigma=self.sigma, space=self.space)


@dataclass
class SampleSection:
    method: str = "euler"
    steps: int = 50
    n: int = 5
    base_seed: int = 0

    def ode(self) -> OdeConfig:
        return OdeConfig(method=self.method, steps=self.steps)


@dataclass
class PathsSection:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "outputs"


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    vae: VaeSection = field(default_factory=VaeSection)
    flow: FlowSection = field(default_factory=FlowSection)
    sample: SampleSection = field(default_factory=SampleSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> "ExperimentConfig":
        d = self.data
        if d.source not in ("synthetic", "directory"):
            raise ConfigError(f"data.source must be synthetic or directory, got {d.source!r}")
        if d.source == "directory" and not d.directory:
            raise ConfigError("data.directory is required when data.source is directory")
        if not is_valid_size(d.size):
            raise ConfigError(f"data.size must be a power of two >= 16, got {d.size}")
        split_sizes(max(d.count, 1), d.fractions)
        if d.source == "synthetic":
            d.synthetic_spec().validate()
        for name, sec in (("vae.image", self.vae.image), ("vae.mask", self.vae.mask)):
            sec.stack.build()
            if sec.epochs < 0 or sec.batch_size < 1 or sec.lr <= 0:
                raise ConfigError(f"{name}: epochs >= 0, batch_size >= 1 and lr > 0 required")
            if d.size % sec.stack.build().downsample_factor:
                raise ConfigError(f"{name}: data.size not divisible by the downsample factor")
        self.flow.flow_config()
        self.flow_net_config()
        if self.flow.epochs < 0 or self.flow.batch_size < 1 or self.flow.lr <= 0:
            raise ConfigError("flow: epochs >= 0, batch_size >= 1 and lr > 0 required")
        self.sample.ode()
        if self.sample.n < 1:
            raise ConfigError("sample.n must be >= 1")
        return self

    def codec_config(self, which: str) -> CodecConfig:
        sec = self.vae.image if which == "image" else self.vae.mask
        in_ch = self.data.channels if which == "image" else 1
        return CodecConfig(
            in_channels=in_ch,
            latent_channels=self.vae.latent_channels,
            stack=sec.stack.build(),
            kind=which,
        )

    def flow_net_config(self, space: str | None = None) -> VelocityNetConfig:
        space = space or self.flow.space
        if space == "latent":
            state, cond = self.vae.latent_channels, self.vae.latent_channels
        else:
            state, cond = 1, self.data.channels
        return VelocityNetConfig(
            state_channels=state,
            cond_channels=cond,
            stack=self.flow.stack.build(),
            time_embedding_dim=self.flow.time_embedding_dim,
        )

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, values, where: str):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for key, value in values.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{where}.{key}" if where else key)
        elif typing.get_origin(hint) is tuple and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(values: dict | None) -> ExperimentConfig:
    try:
        return _build(ExperimentConfig, values or {}, "").validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        values = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(values)
