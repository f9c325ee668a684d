"""Run configuration: typed fields, flat key=value files, stable hashing.

The config file format is one ``key = value`` pair per line; ``#``
starts a comment.  Types come from the dataclass declaration, booleans
accept true/false/1/0/yes/no, and integer tuples are comma-separated.
The hash covers every field in sorted order, so equal configs hash
equally regardless of file formatting.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .errors import InputError

__all__ = ["TrainConfig", "config_hash", "read_config", "write_config", "apply_overrides"]


@dataclass
class TrainConfig:
    # data
    seed: int = 0
    dataset_size: int = 2000
    eval_size: int = 200
    # model
    dim: int = 64
    heads: int = 4
    depth: int = 6
    enc_channels: tuple[int, ...] = (16, 32, 64, 64)
    d_joint: int = 128
    steps: int = 50
    theta: float = 0.5
    # mechanism flags
    filtering: bool = True
    ranking: bool = True
    cross_attention: bool = True
    strict_infonce: bool = False
    # loss switches and weights
    loss_caption: bool = True
    loss_mask: bool = True
    lambda1: float = 2.0
    lambda2: float = 1.0
    # optimization
    lr: float = 3e-4
    weight_decay: float = 0.05
    batch_size: int = 8
    epochs_stage1: int = 14
    epochs_stage2: int = 24
    plateau_patience: int = 5
    warmup_epochs: int = 10
    divergence_threshold: float = 1e4

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InputError("loss weights must be non-negative")
        if isinstance(self.enc_channels, list):
            self.enc_channels = tuple(self.enc_channels)
        if len(self.enc_channels) != 4:
            raise InputError("enc_channels needs exactly 4 stage widths")
        if self.batch_size < 1 or self.steps < 1:
            raise InputError("batch_size and steps must be positive")


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(name: str, text: str):
    field = _FIELDS[name]
    text = text.strip()
    base = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", "")
    try:
        if base.startswith("bool") or isinstance(field.default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if base.startswith("int") or isinstance(field.default, int):
            return int(text)
        if base.startswith("float") or isinstance(field.default, float):
            return float(text)
        if base.startswith("tuple") or isinstance(field.default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise InputError(f"bad value for {name!r}: {text!r}") from exc
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def read_config(path: str) -> TrainConfig:
    """Parse a flat key=value file into a TrainConfig."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key = value")
            key, _, text = line.partition("=")
            key = key.strip()
            if key not in _FIELDS:
                raise InputError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, text)
    return TrainConfig(**values)


def write_config(cfg: TrainConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in sorted(_FIELDS):
            fh.write(f"{name} = {_format_value(getattr(cfg, name))}\n")


def apply_overrides(cfg: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    """New config with string overrides parsed onto ``cfg``."""
    values = dataclasses.asdict(cfg)
    for key, text in overrides.items():
        if key not in _FIELDS:
            raise InputError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, text)
    return TrainConfig(**values)


def config_hash(cfg: TrainConfig) -> str:
    """12-hex-digit digest over all fields, stable across formatting."""
    canon = "\n".join(
        f"{name}={_format_value(getattr(cfg, name))}" for name in sorted(_FIELDS)
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]
