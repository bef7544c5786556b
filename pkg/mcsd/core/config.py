"""
Application configuration management.
"""
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field, field_validator
from typing import Any


class Settings(BaseSettings):
    """Toolkit settings loaded from ``UQ_``-prefixed environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="UQ_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )

    # Parallelism (caps MC pass fan-out; results never depend on it)
    THREADS: int = Field(default=1, ge=1)

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = True

    # Experiment defaults
    DEFAULT_PASSES: int = Field(default=50, ge=1)
    DEFAULT_BINS: int = Field(default=10, ge=1)
    DEFAULT_FAR: float = Field(default=0.001, gt=0.0, lt=1.0)
    DEFAULT_SEED: int = Field(default=0, ge=0)

    # Artifacts
    FORMAT_VERSION: str = "1"

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def normalize_log_level(cls, v: Any) -> str:
        level = str(v).upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level {v!r}")
        return level


# Singleton with error handling
try:
    settings = Settings()
except Exception as e:
    import sys
    print(f"ERROR: Failed to load settings: {e}", file=sys.stderr)
    print("Please check the UQ_* environment variables and your .env file.", file=sys.stderr)
    raise
