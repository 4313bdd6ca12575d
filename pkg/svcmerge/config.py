import os
from dataclasses import dataclass, field

from .errors import ConfigError


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer", detail={"value": raw}) from None


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{name} must be a number", detail={"value": raw}) from None


def _default_workers() -> int:
    return min(4, os.cpu_count() or 1)


@dataclass
class Config:
    # Numerics
    svd_max_sweeps: int = field(default_factory=lambda: _env_int("SVCMERGE_SVD_MAX_SWEEPS", 100))
    response_eps: float = field(default_factory=lambda: _env_float("SVCMERGE_RESPONSE_EPS", 1e-9))
    noise_floor: float = field(default_factory=lambda: _env_float("SVCMERGE_NOISE_FLOOR", 1e-12))

    # Execution
    workers: int = field(default_factory=lambda: _env_int("SVCMERGE_WORKERS", _default_workers()))
    log_level: str = field(default_factory=lambda: os.getenv("SVCMERGE_LOG_LEVEL", "INFO").upper())

    def __post_init__(self):
        if self.svd_max_sweeps < 1:
            raise ConfigError("svd_max_sweeps must be >= 1", detail={"value": self.svd_max_sweeps})
        if not self.response_eps >= 0.0:
            raise ConfigError("response_eps must be >= 0", detail={"value": self.response_eps})
        if not self.noise_floor >= 0.0:
            raise ConfigError("noise_floor must be >= 0", detail={"value": self.noise_floor})
        if self.workers < 1:
            raise ConfigError("workers must be >= 1", detail={"value": self.workers})


def load_config() -> Config:
    return Config()
