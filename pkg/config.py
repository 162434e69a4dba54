from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


class Settings(BaseSettings):
    # Forward-backward check tolerances
    ALPHA1: float = 0.01
    ALPHA2: float = 0.5

    # Loss configuration
    MU_WEIGHT: float = 0.1
    STRATEGY: str = "xor"

    # Recipe and evaluation
    INTERP: str = "bilinear"
    FRAME: str = "camera2"

    # Optimizer and gradient audit
    FD_STEP: float = 1e-4
    FIT_STEPS: int = 2000
    FIT_STEP_SIZE: float = 0.05

    # Batch processing
    JOBS: int = 1
    LOG_LEVEL: str = "INFO"

    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", env_prefix="SCENEFLOW_")

    @field_validator("ALPHA1", "ALPHA2", "FD_STEP", "FIT_STEP_SIZE")
    @classmethod
    def _positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be positive")
        return value

    @field_validator("MU_WEIGHT")
    @classmethod
    def _non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("must be non-negative")
        return value

    @field_validator("STRATEGY")
    @classmethod
    def _strategy(cls, value: str) -> str:
        if value not in ("align", "always", "never", "xor"):
            raise ValueError(f"unknown scale strategy: {value}")
        return value

    @field_validator("INTERP")
    @classmethod
    def _interp(cls, value: str) -> str:
        if value not in ("bilinear", "nearest"):
            raise ValueError(f"unknown interpolation mode: {value}")
        return value

    @field_validator("FRAME")
    @classmethod
    def _frame(cls, value: str) -> str:
        if value not in ("camera1", "camera2", "world"):
            raise ValueError(f"unknown reference frame: {value}")
        return value

    @field_validator("JOBS", "FIT_STEPS")
    @classmethod
    def _at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be at least 1")
        return value


settings = Settings()
