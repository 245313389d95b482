from pathlib import Path
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    PROJECT_NAME: str = "nested-reft"

    RUNS_ROOT: Path = Path("runs")
    DEFAULT_CONFIG_PATH: Path = Path("configs/default.yaml")

    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: Literal["text", "json"] = "text"

    # Parallelism used for rollout generation (threads over prompt chunks)
    NUM_WORKERS: int = 1
    SHOW_PROGRESS: bool = False
    FSYNC_METRICS: bool = True

    model_config = SettingsConfigDict(env_file=".env", env_prefix="NREFT_", extra="ignore")


settings = Settings()
