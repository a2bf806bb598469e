import hashlib
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import pandas as pd
from concurrent_log_handler import ConcurrentRotatingFileHandler

from .exceptions import ConfigError

SeedLike = Union[None, int, np.random.SeedSequence]


def setup_logging(log_level: str = "INFO", log_file: str = None, stream: Optional[TextIO] = None):
    """Configure logging system"""

    logger = logging.getLogger('fbm_volterra')
    logger.setLevel(getattr(logging, log_level.upper()))

    # Avoid duplicate logs
    if logger.handlers:
        return logger

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    # stdout is reserved for machine-readable summaries
    console_handler = logging.StreamHandler(stream or sys.stderr)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)

        file_handler = ConcurrentRotatingFileHandler(
            log_file,
            maxBytes=10*1024*1024,  # 10MB
            backupCount=5
        )
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def validate_hurst(h: float, field: str = "hurst") -> float:
    """Validate a Hurst parameter"""
    try:
        value = float(h)
    except (TypeError, ValueError):
        raise ConfigError(field, f"must be a real number, got {h!r}")
    if not np.isfinite(value) or not 0.0 < value < 1.0:
        raise ConfigError(field, f"must lie in (0, 1), got {value}")
    return value


def validate_positive(value: float, field: str) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ConfigError(field, f"must be a real number, got {value!r}")
    if not np.isfinite(value) or value <= 0.0:
        raise ConfigError(field, f"must be positive, got {value}")
    return value


def validate_int_at_least(value: int, minimum: int, field: str) -> int:
    if isinstance(value, bool) or int(value) != value:
        raise ConfigError(field, f"must be an integer, got {value!r}")
    value = int(value)
    if value < minimum:
        raise ConfigError(field, f"must be at least {minimum}, got {value}")
    return value


def validate_probability_level(value: float, field: str = "level") -> float:
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ConfigError(field, f"must lie in (0, 1), got {value}")
    return value


def seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    """Normalize an int/None/SeedSequence into a SeedSequence"""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def spawn_seeds(seed: SeedLike, count: int) -> List[np.random.SeedSequence]:
    """Independent child streams, one per path/replication index.

    Children are keyed by their index only, so the stream of index i does not
    depend on how many siblings are requested.
    """
    parent = seed_sequence(seed)
    return [
        np.random.SeedSequence(parent.entropy, spawn_key=parent.spawn_key + (i,))
        for i in range(count)
    ]


def config_hash(config: Dict[str, Any]) -> str:
    canonical = json.dumps(config, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_csv_with_manifest(df: pd.DataFrame, path: str, manifest: Dict[str, Any]) -> str:
    """Write a CSV preceded by '#'-prefixed key=value manifest lines"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for key, value in manifest.items():
            fh.write(f"# {key}={value}\n")
        df.to_csv(fh, index=False)
    return path


def read_csv_with_manifest(path: str) -> Tuple[pd.DataFrame, Dict[str, str]]:
    manifest = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            manifest[key.strip()] = value.strip()
    df = pd.read_csv(path, comment="#")
    return df, manifest


def as_2d(values: Sequence[float]) -> np.ndarray:
    """Grid function as an (n_points, dim) array"""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"Expected a 1-d or 2-d grid function, got shape {arr.shape}")
    return arr
