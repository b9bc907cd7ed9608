"""Run configuration: one JSON-serializable snapshot that reproduces a run
bit-identically on the toy backend.  Every source of randomness draws from a
named seed here."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InputError
from .losses import LossWeights
from .optimize import SharingConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Seeds:
    mean_latent: int = 1
    noise: int = 2
    alpha: int = 3
    regularizer: int = 4


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "toy"
    checkpoint: str | None = None
    layer_count: int = 8
    resolution: int = 64
    channels: int = 32
    seed: int = 0
    dtype: str = "float32"
    active_dims: int = 32
    style_gain: float = 0.5

    def options(self) -> dict:
        return {
            "checkpoint": self.checkpoint,
            "layer_count": self.layer_count,
            "resolution": self.resolution,
            "channels": self.channels,
            "seed": self.seed,
            "dtype": self.dtype,
            "active_dims": self.active_dims,
            "style_gain": self.style_gain,
        }


@dataclass(frozen=True)
class ScheduleConfig:
    peak: float = 0.1
    ramp_up_frac: float = 0.05
    ramp_down_frac: float = 0.25


@dataclass(frozen=True)
class TuningConfig:
    """Stage-3 weight tuning knobs."""

    learning_rate: float = 3e-4
    alpha_reg: float = 30.0
    lambda_reg: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    face_image: str | None = None
    hair_image: str | None = None
    face_semantics: str | None = None
    hair_semantics: str | None = None
    face_keypoints: str | None = None
    hair_keypoints: str | None = None
    output_dir: str | None = None

    schema_version: int = SCHEMA_VERSION
    backend: BackendConfig = field(default_factory=BackendConfig)
    iterations: tuple[int, int, int] = (1000, 500, 500)
    weights_stage1: LossWeights = field(default_factory=LossWeights.stage1)
    weights_stage2: LossWeights = field(default_factory=LossWeights.stage2)
    sharing: SharingConfig = field(default_factory=SharingConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    tuning: TuningConfig = field(default_factory=TuningConfig)
    seeds: Seeds = field(default_factory=Seeds)
    mean_latent_samples: int = 10000
    paste_back: bool = False

    def input_paths(self) -> dict[str, str | None]:
        return {
            "face_image": self.face_image,
            "hair_image": self.hair_image,
            "face_semantics": self.face_semantics,
            "hair_semantics": self.hair_semantics,
            "face_keypoints": self.face_keypoints,
            "hair_keypoints": self.hair_keypoints,
        }


_NESTED = {
    "backend": BackendConfig,
    "weights_stage1": LossWeights,
    "weights_stage2": LossWeights,
    "sharing": SharingConfig,
    "schedule": ScheduleConfig,
    "tuning": TuningConfig,
    "seeds": Seeds,
}


def config_to_dict(config: RunConfig) -> dict:
    d = dataclasses.asdict(config)
    d["iterations"] = list(config.iterations)
    return d


def config_from_dict(data: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    if data.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise InputError(f"unsupported config schema_version {data['schema_version']}")
    kwargs = dict(data)
    for key, cls in _NESTED.items():
        if key in kwargs and isinstance(kwargs[key], dict):
            sub = kwargs[key]
            sub_known = {f.name for f in dataclasses.fields(cls)}
            sub_unknown = set(sub) - sub_known
            if sub_unknown:
                raise InputError(f"unknown keys in config.{key}: {sorted(sub_unknown)}")
            kwargs[key] = cls(**sub)
    if "iterations" in kwargs:
        it = kwargs["iterations"]
        if len(it) != 3:
            raise InputError("iterations must have exactly three entries")
        kwargs["iterations"] = tuple(int(x) for x in it)
    return RunConfig(**kwargs)


def serialize_config(config: RunConfig) -> str:
    return json.dumps(config_to_dict(config), indent=2, sort_keys=True)


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    return parse_config(path.read_text())


def save_config(config: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_config(config) + "\n")
