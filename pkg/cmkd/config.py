import logging
from functools import lru_cache
from typing import Optional

from pydantic import ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from cmkd.exceptions import ConfigError


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="CMKD_", env_file=".env")

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def normalize_log_level(cls, v: str) -> str:
        """Accept `debug`, `Debug`, ... as well as `DEBUG`"""
        v = str(v).upper()
        if v not in logging.getLevelNamesMapping():
            raise ValueError(f"unknown log level {v!r}")
        return v

    # Worker pool; None means one worker per fold
    WORKERS: Optional[int] = None

    # Console rendering only, JSON keeps full precision
    REPORT_DECIMALS: int = 3


@lru_cache()
def get_settings() -> Settings:
    try:
        return Settings()
    except ValidationError as exc:
        raise ConfigError(f"invalid CMKD_* environment: {exc}") from exc


def setup_logging(level: Optional[str] = None) -> None:
    settings = get_settings()
    logging.basicConfig(
        level=level or settings.LOG_LEVEL,
        format=settings.LOG_FORMAT,
        force=True,
    )
