"""Run configuration (TOML) for the pipeline commands.

Unknown keys are rejected, and every command writes a resolved echo of the
configuration it actually ran with next to its outputs.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import toml

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_ROOT = "semcity_out"
HOME_ENV_VAR = "SEMCITY_HOME"


class ConfigError(ValueError):
    """Malformed run configuration (unknown key, bad value, bad TOML)."""


@dataclass
class DataConfig:
    dims: tuple[int, int, int] = (32, 32, 8)
    n_classes: int = 5
    count: int = 64
    val_count: int = 16
    dataset_path: str = ""  # optional SemanticKITTI voxel directory


@dataclass
class AutoencoderConfig:
    plane_channels: int = 8
    downsample: int = 2
    encoder_channels: tuple[int, ...] = (32, 64, 64, 64, 64)
    mlp_width: int = 128
    pe_octaves: int = 6
    lovasz_weight: float = 1.0
    epochs: int = 60
    batch_size: int = 8
    points_per_scene: int = 4096
    lr: float = 1e-3


@dataclass
class DiffusionConfig:
    timesteps: int = 100
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    p_norm: int = 2
    epochs: int = 300
    batch_size: int = 16
    lr: float = 2e-3
    lr_decay: str = "none"


@dataclass
class RepaintConfig:
    resamples: int = 5
    jump: int = 20


@dataclass
class RefinementConfig:
    severity: float = 0.3
    pairs_per_scene: int = 2
    epochs: int = 200
    batch_size: int = 16
    lr: float = 2e-3


@dataclass
class OutputConfig:
    root: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    repaint: RepaintConfig = field(default_factory=RepaintConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def resolved_root(self) -> Path:
        root = self.output.root or os.environ.get(HOME_ENV_VAR, "") or DEFAULT_ROOT
        return Path(root)


def _apply(obj, values: dict, path: str) -> None:
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in values.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown configuration key: {where}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a table")
            _apply(current, value, where)
        elif isinstance(current, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where} must be an array")
            setattr(obj, key, tuple(value))
        else:
            if isinstance(value, dict):
                raise ConfigError(f"{where} must be a value, not a table")
            setattr(obj, key, type(current)(value) if current is not None else value)


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"bad TOML in {path}: {err}") from err
        _apply(cfg, raw, "")
    return cfg


def _to_plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return list(value)
    return value


def write_echo(cfg: RunConfig, path) -> None:
    """Write the fully resolved configuration as TOML next to the outputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(toml.dumps(_to_plain(cfg)))
