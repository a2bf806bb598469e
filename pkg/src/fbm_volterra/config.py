import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
from dotenv import dotenv_values

from .exceptions import ConfigError
from .utils import config_hash, validate_hurst, validate_int_at_least, validate_positive

logger = logging.getLogger(__name__)

EXPERIMENTS = (
    "kernels-check",
    "transform-roundtrip",
    "mimic-verify",
    "entropy-check",
    "chaos-rate",
    "fou-limit",
    "tree-local",
)
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
LIST_FIELDS = ("n_list", "k_list", "t_list")
TRUE_VALUES = ("1", "true", "yes", "on")
FALSE_VALUES = ("0", "false", "no", "off", "")


@dataclass
class ExperimentConfig:
    """Settings of one experiment run; None means the experiment's own default"""

    experiment: str = "kernels-check"
    hurst: Optional[float] = None
    horizon: float = 1.0
    steps: Optional[int] = None
    theta: float = 1.0
    fou_a: float = 1.0
    fou_b: float = 0.5
    coupling: float = 0.5
    kappa: int = 2
    depth: int = 4
    boundary: str = "frozen"
    n_list: Optional[Tuple[int, ...]] = None
    k_list: Optional[Tuple[int, ...]] = None
    t_list: Optional[Tuple[float, ...]] = None
    samples: Optional[int] = None
    replications: Optional[int] = None
    seed: int = 0
    out: str = "results"
    workers: Optional[int] = None
    sequential: bool = False
    log_level: str = "INFO"
    log_file: Optional[str] = None

    def validate(self) -> "ExperimentConfig":
        """Check every field before any computation; raises ConfigError naming the field"""
        if self.experiment not in EXPERIMENTS:
            raise ConfigError("experiment", f"must be one of {', '.join(EXPERIMENTS)}, got {self.experiment!r}")
        if self.hurst is not None:
            self.hurst = validate_hurst(self.hurst)
        self.horizon = validate_positive(self.horizon, "horizon")
        if self.steps is not None:
            self.steps = validate_int_at_least(self.steps, 16, "steps")
        for name in ("theta", "fou_a", "fou_b", "coupling"):
            value = getattr(self, name)
            if not np.isfinite(float(value)):
                raise ConfigError(name, f"must be finite, got {value}")
            setattr(self, name, float(value))
        if self.fou_a + self.fou_b == 0.0:
            raise ConfigError("fou_b", "fou_a + fou_b must be nonzero")
        self.kappa = validate_int_at_least(self.kappa, 2, "kappa")
        self.depth = validate_int_at_least(self.depth, 2, "depth")
        if self.boundary not in ("frozen", "free"):
            raise ConfigError("boundary", f"must be 'frozen' or 'free', got {self.boundary!r}")
        if self.n_list is not None:
            self.n_list = tuple(validate_int_at_least(n, 1, "n_list") for n in self.n_list)
        if self.k_list is not None:
            self.k_list = tuple(validate_int_at_least(k, 1, "k_list") for k in self.k_list)
        if self.t_list is not None:
            self.t_list = tuple(validate_positive(t, "t_list") for t in self.t_list)
        if self.samples is not None:
            self.samples = validate_int_at_least(self.samples, 2, "samples")
        if self.replications is not None:
            self.replications = validate_int_at_least(self.replications, 2, "replications")
        self.seed = validate_int_at_least(self.seed, 0, "seed")
        if self.workers is not None:
            self.workers = validate_int_at_least(self.workers, 1, "workers")
        if str(self.log_level).upper() not in LOG_LEVELS:
            raise ConfigError("log_level", f"must be one of {', '.join(LOG_LEVELS)}, got {self.log_level!r}")
        self.log_level = str(self.log_level).upper()
        return self

    @property
    def effective_workers(self) -> int:
        return 1 if self.sequential else (self.workers or os.cpu_count() or 1)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def hash(self) -> str:
        """Hash of the settings that determine the results"""
        settings = {k: v for k, v in self.to_dict().items()
                    if k not in ("out", "workers", "sequential", "log_level", "log_file")}
        return config_hash(settings)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Copy with the given non-None values replaced (command-line flags win over the file)"""
        values = self.to_dict()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig(**values)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "ExperimentConfig":
        """Typed config from string values; keys are case-insensitive"""
        types = {f.name: f.type for f in fields(cls)}
        values: Dict[str, Any] = {}
        for raw_key, raw in mapping.items():
            key = raw_key.strip().lower()
            if key not in types:
                raise ConfigError(key, "unknown configuration key")
            values[key] = _parse(key, raw)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise ConfigError("config", f"file not found: {path}")
        logger.debug(f"Reading configuration from {path}")
        return cls.from_mapping(dotenv_values(path))


INT_FIELDS = ("steps", "kappa", "depth", "samples", "replications", "seed", "workers")
FLOAT_FIELDS = ("hurst", "horizon", "theta", "fou_a", "fou_b", "coupling")


def _parse(key: str, raw: Any) -> Any:
    if raw is None:
        return None
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if key in LIST_FIELDS:
            items = [item.strip() for item in text.split(",") if item.strip()]
            return tuple(float(item) if key == "t_list" else int(item) for item in items)
        if key in INT_FIELDS:
            return int(text)
        if key in FLOAT_FIELDS:
            return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r}")
    if key == "sequential":
        if text.lower() in TRUE_VALUES:
            return True
        if text.lower() in FALSE_VALUES:
            return False
        raise ConfigError(key, f"expected a boolean, got {text!r}")
    if key == "log_file":
        return text or None
    return text
