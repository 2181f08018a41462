"""Run configuration: dataclasses with strict JSON (de)serialization."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


def _from_dict(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls.__name__, name))
        kwargs[name] = _from_dict(sub, value, f"{where}.{name}") if sub else value
    obj = cls(**kwargs)
    obj.validate()
    return obj


@dataclass
class RenderConfig:
    height: int = 16
    width: int = 16
    channels: int = 1
    blob_radius: float = 1.5
    distractor: bool = False
    distractor_intensity: float = 0.5

    def validate(self) -> None:
        if self.height < 5 or self.width < 5:
            raise ConfigError("render: height and width must be >= 5")
        if self.channels < 1:
            raise ConfigError("render: channels must be >= 1")
        if not 0 < self.blob_radius < min(self.height, self.width) / 2:
            raise ConfigError("render: blob_radius must be in (0, min(H, W) / 2)")

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass
class ArchConfig:
    conv_channels: list[int] = field(default_factory=lambda: [8, 8, 8])
    conv_strides: list[int] = field(default_factory=lambda: [1, 1, 1])
    temperature: float = 0.1  # sharper keypoints keep the metric robust to clutter
    dyn_hidden: int = 128
    inf_hidden: int = 16
    dec_hidden: int = 16
    z_dim: int | None = None  # None: use the action dimension
    vae_latent: int = 8
    vae_channels: int = 8
    inverse_hidden: int = 128

    def validate(self) -> None:
        if not self.conv_channels or len(self.conv_channels) != len(self.conv_strides):
            raise ConfigError("arch: conv_channels and conv_strides need equal, non-zero length")
        if any(c < 1 for c in self.conv_channels) or any(s < 1 for s in self.conv_strides):
            raise ConfigError("arch: conv channels and strides must be positive")
        if self.temperature <= 0:
            raise ConfigError("arch: temperature must be positive")
        if self.z_dim is not None and self.z_dim < 1:
            raise ConfigError("arch: z_dim must be positive")


@dataclass
class TrainConfig:
    beta: float = 0.5
    horizon: int = 4  # segment length T; a segment holds T + 1 actions
    lr: float = 0.0005
    batch_size: int = 16
    iterations: int = 2000
    seed: int = 0
    n_p: int = 5
    delta_plan: float = 1.0
    alpha_init: float = 0.05
    forward_weight: float = 1.0
    arch: ArchConfig = field(default_factory=ArchConfig)

    def validate(self) -> None:
        if self.beta < 0:
            raise ConfigError("train: beta must be >= 0")
        if self.horizon < 0:
            raise ConfigError("train: horizon must be >= 0")
        if self.batch_size < 1 or self.iterations < 0 or self.n_p < 0:
            raise ConfigError("train: batch_size >= 1, iterations >= 0, n_p >= 0 required")
        if self.delta_plan <= 0 or self.lr <= 0:
            raise ConfigError("train: delta_plan and lr must be positive")
        self.arch.validate()


@dataclass
class MetricConfig:
    delta: float = 0.85
    kind: str = "dpn"

    def validate(self) -> None:
        if self.delta <= 0:
            raise ConfigError("metric: delta must be positive")
        if self.kind not in ("dpn", "inverse", "vae", "pixel", "upn"):
            raise ConfigError(f"metric: unknown kind {self.kind!r}")


@dataclass
class RlConfig:
    horizon: int = 20
    episodes: int = 300
    discount: float = 0.99
    replay_capacity: int = 100_000
    polyak: float = 0.995
    entropy_coef: float = 0.001
    hidden: int = 64
    batch_size: int = 64
    lr: float = 0.001
    reward_scale: float = 1.0
    warmup_steps: int = 200
    updates_per_step: int = 1
    critic_space: str = "symlog"  # or "linear"
    seed: int = 0

    def validate(self) -> None:
        if self.horizon < 1 or self.episodes < 0:
            raise ConfigError("rl: horizon >= 1 and episodes >= 0 required")
        if not 0 < self.discount < 1:
            raise ConfigError("rl: discount must lie in (0, 1)")
        if not 0 <= self.polyak <= 1:
            raise ConfigError("rl: polyak must lie in [0, 1]")
        if self.critic_space not in ("symlog", "linear"):
            raise ConfigError("rl: critic_space must be 'symlog' or 'linear'")


@dataclass
class RunConfig:
    scale: str = "desk"
    seed: int = 0
    env: str = "pointmass"
    train: TrainConfig = field(default_factory=TrainConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    rl: RlConfig = field(default_factory=RlConfig)

    def validate(self) -> None:
        if self.scale not in ("desk", "paper"):
            raise ConfigError(f"scale must be 'desk' or 'paper', got {self.scale!r}")
        if self.env not in ("pointmass", "reacher"):
            raise ConfigError(f"env must be 'pointmass' or 'reacher', got {self.env!r}")
        for part in (self.train, self.render, self.metric, self.rl):
            part.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Build from a (possibly partial) dict; ``scale`` selects the base preset.

        A top-level ``seed`` is copied into ``train.seed`` and ``rl.seed``
        unless those are given explicitly.
        """
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object")
        scale = data.get("scale", "desk")
        base = preset(scale).to_dict()
        merged = _merge(base, data)
        if "seed" in data:
            for part in ("train", "rl"):
                if not (isinstance(data.get(part), dict) and "seed" in data[part]):
                    merged[part]["seed"] = data["seed"]
        return _from_dict(cls, merged, "config")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from None
        return cls.from_dict(data)


_NESTED = {
    ("TrainConfig", "arch"): ArchConfig,
    ("RunConfig", "train"): TrainConfig,
    ("RunConfig", "render"): RenderConfig,
    ("RunConfig", "metric"): MetricConfig,
    ("RunConfig", "rl"): RlConfig,
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def preset(scale: str) -> RunConfig:
    if scale == "desk":
        return RunConfig()
    if scale == "paper":
        return RunConfig(
            scale="paper",
            train=TrainConfig(
                n_p=20,
                arch=ArchConfig(conv_channels=[64] * 4, conv_strides=[2, 1, 1, 1],
                                vae_channels=64),
            ),
            render=RenderConfig(height=100, width=100, channels=3, blob_radius=6.0),
        )
    raise ConfigError(f"unknown scale preset {scale!r}")
