"""Configuration settings."""

import configparser
import logging
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process settings loaded from environment."""

    # Worker pool size for block inference and dataset building
    threads: int = 1

    log_level: str = "INFO"

    # dtype of newly created parameter stores
    precision: Literal["float64", "float32"] = "float64"

    model_config = SettingsConfigDict(
        env_prefix="ORCHARD_SEG_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @field_validator("threads")
    @classmethod
    def _positive_threads(cls, value: int) -> int:
        if value < 1:
            raise ValueError("threads must be >= 1")
        return value

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)


settings = Settings()


def read_config_file(path: str | Path) -> dict[str, dict[str, str]]:
    """
    Read a flat key=value config file with sections.

    Keys outside any section are rejected. Returns section -> {key: raw value}.
    """
    parser = configparser.ConfigParser(
        delimiters=("=",),
        comment_prefixes=("#", ";"),
        inline_comment_prefixes=("#",),
        interpolation=None,
    )
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e

    sections = {name: dict(parser.items(name)) for name in parser.sections()}
    logger.debug(f"Read config {path}: sections {sorted(sections)}")
    return sections


def parse_list(raw: str, cast=float) -> list:
    """Parse a comma-separated config value."""
    try:
        return [cast(item.strip()) for item in raw.split(",") if item.strip()]
    except ValueError as e:
        raise ConfigError(f"bad list value {raw!r}: {e}") from e


def parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"bad boolean value {raw!r}")
