from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    api_prefix: str = "/api/v1"
    api_key: str = "change-me"
    cors_allow_origins: str = "http://localhost:5173,http://127.0.0.1:5173"
    output_dir: Path = Path("storage/results")
    log_level: str = "INFO"
    worker_threads: int = 1

    # Grid and quadrature policy.
    default_grid_n: int = 512
    diagnostics_grid_spacing: float = 0.05
    gradient_floor: float = 1e-12
    gradient_threshold_scale: float = 1e-3
    kappa_cap: float = 1e4
    refine_max_depth: int = 6
    band_refine_depth: int = 2

    # Monte Carlo and solver limits.
    bootstrap_resamples: int = 200
    max_transport_atoms: int = 512
    transport_max_pivots: int = 200000

    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8")


settings = Settings()
