# app/core/config.py
from typing import List

from pydantic import BaseModel, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigurationError


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="SCSR_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Worker pool
    workers: int = 1

    # Fitness
    rejection_sentinel: float = 1e7  # NMSE (%) assigned to rejected models
    dominance_epsilon: float = 1e-6
    local_opt_iterations: int = 10

    # Feasibility audit
    audit_samples: int = 100_000
    audit_tolerance: float = 1e-10

    # Persistence
    results_dir: str = "results"

    # HTTP API
    cors_origins: List[str] = []

    log_level: str = "INFO"


class ValidatedModel(BaseModel):
    """Run configuration model whose validation failures surface as ConfigurationError."""

    @classmethod
    def create(cls, **values):
        try:
            return cls(**values)
        except ValidationError as exc:
            raise ConfigurationError(str(exc)) from exc


settings = Settings()
