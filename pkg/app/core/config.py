import os
from enum import Enum
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Environment(str, Enum):
    DEVELOPMENT = "development"
    STAGING = "staging"
    PRODUCTION = "production"


class Settings(BaseSettings):
    """
    Process-level settings read from the environment and an optional .env file

    Run parameters (architecture, training, data) live in RunConfig instead;
    nothing here changes the numbers a run produces.
    """
    ENVIRONMENT: Environment = Environment.DEVELOPMENT
    DEBUG: bool = True

    PROJECT_NAME: str = "diffseg"
    VERSION: str = "1.0.0"
    DESCRIPTION: str = "Diffusion feature fusion segmentation with implicit posterior knowledge learning"

    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    LOG_FILE: str = "logs/diffseg.log"
    LOG_ROTATION: str = "daily"
    LOG_RETENTION: int = Field(default=7, description="Rotated log files kept")

    # unset disables the feature cache
    DIFFSEG_CACHE: Optional[str] = None

    TORCH_NUM_THREADS: Optional[int] = None

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    @property
    def is_production(self) -> bool:
        return self.ENVIRONMENT == Environment.PRODUCTION

    def validate_environment(self) -> bool:
        """Reject settings that are unsafe or meaningless for this environment"""
        if self.is_production and self.DEBUG:
            raise ValueError("DEBUG must be False in production")
        if self.is_production and self.LOG_LEVEL.upper() == "DEBUG":
            raise ValueError("LOG_LEVEL must not be DEBUG in production")
        if self.TORCH_NUM_THREADS is not None and self.TORCH_NUM_THREADS < 1:
            raise ValueError("TORCH_NUM_THREADS must be a positive integer")
        return True


settings = Settings()

# tests construct their own environments
if not os.getenv("TESTING"):
    settings.validate_environment()
