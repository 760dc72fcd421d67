"""Run configuration: an INI-style key/value file with units in the key comments."""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .quant import MODES
from .search import BIT_AXIS

ENV_OUTPUT_DIR = "SPIKEQUANT_OUTPUT_DIR"
ENV_WORKERS = "SPIKEQUANT_WORKERS"

DATA_SOURCES = ("digits", "synthetic", "idx")
GRANULARITIES = ("layer", "block", "coarse")
STRATEGIES = ("endpoints", "perturb")


@dataclass(frozen=True)
class RunConfig:
    # [model]
    checkpoint: str = ""
    channels: int = 8
    image_size: tuple = (32, 32)
    blocks_stage3: int = 2
    blocks_stage4: int = 1
    timesteps: int = 4
    mlp_ratio: int = 2
    conv_ratio: int = 2
    # [train]
    epochs: int = 10
    learning_rate: float = 2e-3
    batch_size: int = 64
    train_fraction: float = 0.8
    # [data]
    source: str = "digits"
    idx_images: str = ""
    idx_labels: str = ""
    synthetic_samples: int = 1200
    synthetic_classes: int = 10
    # [search]
    bits: tuple = BIT_AXIS
    delta: float = 5.0
    subset_size: int = 0
    granularity: str = "layer"
    strategy: str = "perturb"
    mode: str = "faithful"
    # [run]
    seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1
    base_dir: str = "."

    def validate(self) -> "RunConfig":
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data source must be one of {DATA_SOURCES}, got {self.source!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if self.subset_size < 0 or self.workers < 1 or self.epochs < 0:
            raise ConfigError("subset_size and epochs must be >= 0, workers >= 1")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        bad = [b for b in self.bits if b not in BIT_AXIS]
        if bad or not self.bits:
            raise ConfigError(f"bits must be a non-empty subset of {BIT_AXIS}")
        for name in ("checkpoint", "idx_images", "idx_labels"):
            value = getattr(self, name)
            if value and not self.path(value).exists():
                raise ConfigError(f"{name} points to a missing file: {self.path(value)}")
        if self.source == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("source = idx needs idx_images and idx_labels")
        if not self.checkpoint:
            self.model_config().validate()
        return self

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def model_config(self, num_classes: int = 10, in_channels: int = 1) -> ModelConfig:
        return ModelConfig(
            channels=self.channels,
            image_size=self.image_size,
            in_channels=in_channels,
            blocks_stage3=self.blocks_stage3,
            blocks_stage4=self.blocks_stage4,
            num_classes=num_classes,
            timesteps=self.timesteps,
            mlp_ratio=self.mlp_ratio,
            conv_ratio=self.conv_ratio,
        )

    def identity(self) -> dict:
        """Fields that influence results; paths are replaced by file content hashes."""
        d = asdict(self)
        for name in ("output_dir", "workers", "base_dir"):
            d.pop(name)
        for name in ("checkpoint", "idx_images", "idx_labels"):
            if d[name]:
                d[name] = "sha256:" + _sha256(self.path(d[name]))
        d["image_size"] = list(self.image_size)
        d["bits"] = list(self.bits)
        return d

    def digest(self, keys=None) -> str:
        ident = self.identity()
        if keys is not None:
            ident = {k: ident[k] for k in keys}
        return hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()

    def to_ini(self) -> str:
        out = []
        for section, names in SECTIONS.items():
            out.append(f"[{section}]")
            for name in names:
                value = getattr(self, name)
                if name == "image_size":
                    value = "x".join(str(v) for v in value)
                elif name == "bits":
                    value = ",".join(str(v) for v in value)
                unit = UNITS.get(name)
                out.append(f"{name} = {value}" + (f"  ; {unit}" if unit else ""))
            out.append("")
        return "\n".join(out)


SECTIONS = {
    "model": ("checkpoint", "channels", "image_size", "blocks_stage3", "blocks_stage4", "timesteps", "mlp_ratio", "conv_ratio"),
    "train": ("epochs", "learning_rate", "batch_size", "train_fraction"),
    "data": ("source", "idx_images", "idx_labels", "synthetic_samples", "synthetic_classes"),
    "search": ("bits", "delta", "subset_size", "granularity", "strategy", "mode"),
    "run": ("seed", "output_dir", "workers"),
}

UNITS = {
    "channels": "channels",
    "image_size": "pixels HxW",
    "timesteps": "steps",
    "epochs": "epochs",
    "batch_size": "samples",
    "train_fraction": "fraction of dataset",
    "synthetic_samples": "samples",
    "bits": "bits",
    "delta": "accuracy percentage points",
    "subset_size": "samples, 0 = whole validation split",
    "workers": "threads",
}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _convert(name: str, raw: str):
    default = RunConfig.__dataclass_fields__[name].default
    raw = raw.strip()
    try:
        if name == "image_size":
            parts = raw.lower().replace(",", "x").split("x")
            return tuple(int(p) for p in parts) if len(parts) == 2 else (int(parts[0]),) * 2
        if name == "bits":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def load_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Read a config file, then apply environment and explicit overrides (in that order)."""
    env = os.environ if env is None else env
    values = {}
    base_dir = "."
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        parser.read(path)
        known = {f.name for f in fields(RunConfig)}
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in known or key == "base_dir":
                    raise ConfigError(f"unknown config key {section}.{key}")
                values[key] = _convert(key, raw)
        base_dir = str(path.parent)
    if env.get(ENV_OUTPUT_DIR):
        values["output_dir"] = env[ENV_OUTPUT_DIR]
    if env.get(ENV_WORKERS):
        values["workers"] = _convert("workers", env[ENV_WORKERS])
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return replace(RunConfig(base_dir=base_dir), **values).validate()
