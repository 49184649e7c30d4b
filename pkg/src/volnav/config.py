"""Project configuration: TOML file, validated against a fixed schema.

Unknown sections or keys are rejected so typos fail loudly. Provider
endpoint settings can be overridden by environment variables
(VOLNAV_PROVIDER_URL, VOLNAV_PROVIDER_KIND, VOLNAV_PROVIDER_TIMEOUT).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib  # python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigurationError


@dataclass
class DatasetConfig:
    name: str = "toy"
    volume: str = "data/toy.raw"
    transfer_function: str = ""
    grid: tuple[int, int, int] = (4, 4, 4)


@dataclass
class SamplingConfig:
    level: int = 2
    depth_factor: float = 2.6  # x bounding radius, for the uniform shell
    block_count: int = 10
    dirs_per_block: int = 10
    seed: int = 7


@dataclass
class CameraConfig:
    fov_degrees: float = 45.0
    aspect: float = 1.0
    d_min_factor: float = 1.2
    d_max_factor: float = 4.0


@dataclass
class RenderConfig:
    width: int = 256
    height: int = 256
    background: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)
    step: float = 0.0  # 0 means half the minimum voxel spacing
    early_termination: float = 0.98


@dataclass
class ProviderConfig:
    kind: str = "reference"  # reference | external
    base_url: str = ""
    timeout_s: float = 10.0
    retries: int = 2


@dataclass
class CaptionConfig:
    descriptor: str = "generic"
    mode: str = "template"  # template | external


@dataclass
class AlignmentSection:
    batch_size: int = 128
    learning_rate: float = 5e-5
    epochs: int = 100
    weight_decay: float = 0.0
    holdout_fraction: float = 0.2
    seed: int = 1


@dataclass
class EncoderSection:
    lattice: int = 16
    steps: int = 3000
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 2


@dataclass
class RLSection:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    epochs_per_batch: int = 4
    minibatch: int = 64
    horizon: int = 32
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    learning_rate: float = 3e-4
    episodes: int = 500
    episodes_per_batch: int = 4
    success_threshold: float = 0.98
    seed: int = 3
    reward_mode: str = "block"  # block | image
    restarts: int = 4
    train_per_prompt: bool = False
    prompt_episodes: int = 30


@dataclass
class SweepConfig:
    grids: tuple[int, ...] = (2, 4, 8)
    steps: int = 300
    probe_level: int = 1


@dataclass
class ServiceConfig:
    listen: str = "127.0.0.1:8080"


@dataclass
class ProjectConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    captions: CaptionConfig = field(default_factory=CaptionConfig)
    alignment: AlignmentSection = field(default_factory=AlignmentSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    rl: RLSection = field(default_factory=RLSection)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)
    workspace: str = "runs/toy"
    base_dir: Path = field(default_factory=Path)

    @property
    def fov_radians(self) -> float:
        return math.radians(self.camera.fov_degrees)

    def resolve(self, path_str: str) -> Path:
        path = Path(path_str)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def workspace_dir(self) -> Path:
        return self.resolve(self.workspace)


_SECTIONS = {
    "dataset": DatasetConfig,
    "sampling": SamplingConfig,
    "camera": CameraConfig,
    "render": RenderConfig,
    "provider": ProviderConfig,
    "captions": CaptionConfig,
    "alignment": AlignmentSection,
    "encoder": EncoderSection,
    "rl": RLSection,
    "sweep": SweepConfig,
    "service": ServiceConfig,
}

_COERCIONS = {
    ("dataset", "grid"): lambda v: tuple(int(x) for x in v),
    ("render", "background"): lambda v: tuple(float(x) for x in v),
    ("sweep", "grids"): lambda v: tuple(int(x) for x in v),
}


def _build_section(name: str, cls, raw: dict):
    known = {f.name: f.type for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigurationError(
            f"config section [{name}] has unknown keys: {sorted(unknown)}"
        )
    values = {}
    for key, value in raw.items():
        coerce = _COERCIONS.get((name, key))
        if coerce is not None:
            try:
                value = coerce(value)
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"[{name}].{key}: {exc}") from exc
        default = getattr(cls(), key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigurationError(f"[{name}].{key}: expected a boolean")
        elif isinstance(default, int) and not isinstance(value, bool):
            if not isinstance(value, int):
                raise ConfigurationError(f"[{name}].{key}: expected an integer")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)):
                raise ConfigurationError(f"[{name}].{key}: expected a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigurationError(f"[{name}].{key}: expected a string")
        values[key] = value
    return cls(**values)


def _validate(config: ProjectConfig) -> None:
    if config.provider.kind not in ("reference", "external"):
        raise ConfigurationError(f"provider.kind must be reference|external, got {config.provider.kind!r}")
    if config.provider.kind == "external" and not config.provider.base_url:
        raise ConfigurationError("provider.kind=external requires provider.base_url")
    if config.rl.reward_mode not in ("block", "image"):
        raise ConfigurationError(f"rl.reward_mode must be block|image, got {config.rl.reward_mode!r}")
    if config.captions.mode not in ("template", "external"):
        raise ConfigurationError(f"captions.mode must be template|external, got {config.captions.mode!r}")
    if len(config.dataset.grid) != 3 or any(g <= 0 for g in config.dataset.grid):
        raise ConfigurationError(f"dataset.grid must be three positive integers, got {config.dataset.grid}")
    if not (0 < config.camera.d_min_factor < config.camera.d_max_factor):
        raise ConfigurationError("camera depth factors must satisfy 0 < d_min < d_max")


def _apply_env_overrides(config: ProjectConfig, env=os.environ) -> None:
    url = env.get("VOLNAV_PROVIDER_URL")
    if url:
        config.provider.base_url = url
        config.provider.kind = "external"
    kind = env.get("VOLNAV_PROVIDER_KIND")
    if kind:
        config.provider.kind = kind
    timeout = env.get("VOLNAV_PROVIDER_TIMEOUT")
    if timeout:
        config.provider.timeout_s = float(timeout)


def load_config(path: str | Path, env=os.environ) -> ProjectConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid TOML: {exc}") from exc
    sections = {}
    for key, value in raw.items():
        if key == "workspace":
            if not isinstance(value, dict) or set(value) - {"dir"}:
                raise ConfigurationError("[workspace] accepts only the key 'dir'")
            continue
        if key not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{key}]")
        if not isinstance(value, dict):
            raise ConfigurationError(f"[{key}] must be a table")
        sections[key] = _build_section(key, _SECTIONS[key], value)
    config = ProjectConfig(**sections)
    if "workspace" in raw:
        config.workspace = raw["workspace"]["dir"]
    config.base_dir = path.resolve().parent
    _apply_env_overrides(config, env)
    _validate(config)
    return config


def default_config(base_dir: str | Path = ".") -> ProjectConfig:
    config = ProjectConfig()
    config.base_dir = Path(base_dir)
    return config
