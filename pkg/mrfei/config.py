"""
Experiment configuration.

Provides:
- ExperimentConfig, a frozen description of one experiment (data, methods, training)
- The ``desk`` and ``full`` presets
- TOML / JSON loading with validation (unknown keys are errors)
- TOML writing via tomli_w

A configuration is resolved in layers: preset, then file, then CLI overrides.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from mrfei.acquisition import PATTERNS
from mrfei.sequence import DEFAULT_N_STATES
from mrfei.subspace import DEFAULT_RANK
from mrfei.surrogate import DEFAULT_EPOCHS, DEFAULT_LR, HIDDEN_UNITS
from mrfei.training import TrainConfig, TrainingError, TrainMode
from mrfei.utils import hash_arrays

logger = logging.getLogger(__name__)

METHODS = ("svd-mrf", "ei", "nlei", "supervised")
TARGET_COMPRESSION = 65

# Best alpha per (method, pattern) at full scale
DEFAULT_ALPHAS: dict[tuple[str, str], float] = {
    ("nlei", "spiral"): 1e-8,
    ("nlei", "epi"): 1e-4,
    ("ei", "spiral"): 1e-5,
    ("ei", "epi"): 1e-2,
}

SWEEP_DECADES = tuple([0.0] + [10.0**k for k in range(-12, 7)])

# Set per method by the experiment, not in the [train] table
PER_METHOD_KEYS = ("mode", "alpha", "seed")


class ConfigError(ValueError):
    """Exception raised for invalid or unreadable configuration."""

    def __init__(self, message: str, key: str | None = None, path: Path | None = None):
        self.message = message
        self.key = key
        self.path = path
        super().__init__(self.message)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: synthetic dataset, baseline and trained methods."""

    name: str = "desk"
    pattern: str = "spiral"
    size: int = 64
    n_train: int = 20
    n_test: int = 5
    m: int | None = None
    T: int = 200
    t: int = DEFAULT_RANK
    n_t1: int = 60
    n_t2: int = 50
    t2_below_t1: bool = False
    n_states: int = DEFAULT_N_STATES
    schedule_path: str | None = None
    smooth: bool = True
    methods: tuple[str, ...] = METHODS
    seed: int = 0
    alpha_nlei: float | None = None
    alpha_ei: float | None = None
    sweep_alphas: tuple[float, ...] = (0.0, 1e-12, 1e-8, 1e-4, 1.0)
    surrogate_epochs: int = DEFAULT_EPOCHS
    surrogate_hidden: int = HIDDEN_UNITS
    surrogate_lr: float = DEFAULT_LR
    workers: int = 1
    deterministic: bool = False
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=150, lr_drop_epoch=100))

    @property
    def n(self) -> int:
        return self.size * self.size

    @property
    def samples_per_frame(self) -> int:
        """m, defaulting to the n/m = 65 compression ratio."""
        return self.m if self.m is not None else max(1, round(self.n / TARGET_COMPRESSION))

    @property
    def compression_ratio(self) -> float:
        return self.n / self.samples_per_frame

    def alpha_for(self, method: str) -> float:
        explicit = {"nlei": self.alpha_nlei, "ei": self.alpha_ei}.get(method)
        if explicit is not None:
            return explicit
        return DEFAULT_ALPHAS.get((method, self.pattern), 0.0)

    def train_config(self, method: str, alpha: float | None = None) -> TrainConfig:
        """Training settings for one method, with its alpha filled in."""
        mode = TrainMode(method)
        return replace(self.train, mode=mode, alpha=self.alpha_for(method) if alpha is None else alpha, seed=self.seed)

    def validate(self) -> None:
        """
        Check ranges and cross-field constraints.

        Raises:
            ConfigError: First violated constraint, naming its key
        """
        if self.pattern not in PATTERNS:
            raise ConfigError(f"Unknown pattern '{self.pattern}' (expected one of {', '.join(PATTERNS)})", "pattern")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown or not self.methods:
            raise ConfigError(f"Unknown or empty methods: {unknown or '[]'}", "methods")
        factor = 2**self.train.depth
        if self.size < 16 or self.size % factor:
            raise ConfigError(f"size must be >= 16 and divisible by {factor}, got {self.size}", "size")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be positive", "n_train")
        if not 1 <= self.samples_per_frame <= self.n:
            raise ConfigError(f"m must be in 1..{self.n}, got {self.samples_per_frame}", "m")
        if not 3 < self.t < self.T:
            raise ConfigError(f"Need 3 < t < T, got t={self.t}, T={self.T}", "t")
        if self.n_t1 < 2 or self.n_t2 < 2:
            raise ConfigError("Grid needs at least 2 values per axis", "n_t1")
        if self.n_states < 2:
            raise ConfigError("n_states must be at least 2", "n_states")
        if any(a < 0 for a in self.sweep_alphas) or not self.sweep_alphas:
            raise ConfigError("sweep_alphas must be a non-empty list of values >= 0", "sweep_alphas")
        for key in ("alpha_nlei", "alpha_ei"):
            value = getattr(self, key)
            if value is not None and value < 0:
                raise ConfigError(f"{key} must be >= 0", key)
        if self.workers < 1:
            raise ConfigError("workers must be >= 1", "workers")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["methods"] = list(self.methods)
        data["sweep_alphas"] = list(self.sweep_alphas)
        data["train"] = {k: v for k, v in self.train.to_dict().items() if k not in PER_METHOD_KEYS}
        return data

    def digest(self) -> str:
        return hash_arrays(extra=json.dumps(self.to_dict(), sort_keys=True))


PRESETS: dict[str, dict[str, Any]] = {
    "desk": {
        "name": "desk",
        "size": 64,
        "n_train": 20,
        "n_test": 5,
        "m": 63,
        "T": 200,
        "t": 10,
        "n_t1": 60,
        "n_t2": 50,
        "sweep_alphas": [0.0, 1e-12, 1e-8, 1e-4, 1.0],
        "train": {"epochs": 150, "lr_drop_epoch": 100},
    },
    "full": {
        "name": "full",
        "size": 224,
        "n_train": 105,
        "n_test": 15,
        "m": 771,
        "T": 200,
        "t": 10,
        "n_t1": 60,
        "n_t2": 50,
        "smooth": False,
        "sweep_alphas": list(SWEEP_DECADES),
        "train": {
            "epochs": 1000,
            "batch_size": 2,
            "lr": 5e-4,
            "lr_drop_epoch": 300,
            "lr_drop_factor": 10.0,
            "weight_decay": 1e-8,
            "n_transforms_per_iter": 3,
        },
    },
}


def _merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _check_keys(data: dict[str, Any], allowed: set[str], section: str, path: Path | None) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        where = f"[{section}]" if section else "top level"
        raise ConfigError(f"Unknown key(s) at {where}: {', '.join(unknown)}", unknown[0], path)


def from_dict(data: dict[str, Any], path: Path | None = None) -> ExperimentConfig:
    """
    Build and validate a config from plain data.

    Raises:
        ConfigError: Unknown keys, wrong types or violated constraints
    """
    exp_keys = {f.name for f in fields(ExperimentConfig)}
    train_keys = {f.name for f in fields(TrainConfig)} - set(PER_METHOD_KEYS)
    _check_keys(data, exp_keys, "", path)
    train_data = dict(data.get("train", {}))
    _check_keys(train_data, train_keys, "train", path)

    kwargs = {k: v for k, v in data.items() if k != "train"}
    for key in ("methods", "sweep_alphas"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    if "debug_transforms" in train_data and train_data["debug_transforms"] is not None:
        train_data["debug_transforms"] = tuple(train_data["debug_transforms"])
    try:
        cfg = ExperimentConfig(**kwargs, train=TrainConfig(**train_data))
    except TrainingError as e:
        raise ConfigError(e.message, "train", path) from e
    except TypeError as e:
        raise ConfigError(f"Invalid configuration: {e}", path=path) from e
    cfg.validate()
    logger.info("Spatial compression ratio %.1f:1 (m=%d, n=%d)", cfg.compression_ratio, cfg.samples_per_frame, cfg.n)
    return cfg


def read_config_file(path: Path) -> dict[str, Any]:
    """Parse a TOML file, or JSON when the suffix is ``.json``."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
        else:
            with open(path, "rb") as f:
                data = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}", path=path) from e
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot parse {path}: {e}", path=path) from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a table/object at top level", path=path)
    return data


def load_config(
    path: Path | None = None,
    preset: str = "desk",
    overrides: dict[str, Any] | None = None,
) -> ExperimentConfig:
    """
    Resolve preset, config file and overrides into a validated config.

    Args:
        path: Optional TOML/JSON file
        preset: Name in :data:`PRESETS`; a file may pick another via ``preset = "..."``
        overrides: Highest-priority values, e.g. from CLI flags (None values ignored)
    """
    file_data = read_config_file(path) if path is not None else {}
    preset = file_data.pop("preset", preset)
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset '{preset}' (expected one of {', '.join(PRESETS)})", "preset", path)
    data = _merge(PRESETS[preset], file_data)
    clean = {k: v for k, v in (overrides or {}).items() if v is not None}
    data = _merge(data, clean)
    return from_dict(data, path)


def _drop_none(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _drop_none(v) for k, v in value.items() if v is not None}
    return value


def write_config(cfg: ExperimentConfig, path: Path) -> Path:
    """Write a config as TOML; unset optional values are omitted."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        tomli_w.dump(_drop_none(cfg.to_dict()), f)
    return path
