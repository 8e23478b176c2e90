from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Numerical tolerances, budgets and run defaults"""

    APP_NAME: str = "fairshare"
    LOG_LEVEL: str = "INFO"

    # Feasibility and solver certification
    FEAS_TOL: float = 1e-9
    KKT_TOL: float = 1e-9
    BARRIER_FINAL: float = 1e-12
    SOLVER_MAX_ITER: int = 100_000

    # Routing
    SPECTRAL_MARGIN: float = 1e-9
    TRAFFIC_RESIDUAL: float = 1e-12

    # Lattice budgets
    TABLE_BUDGET: int = 2**26
    EXACT_STATE_BUDGET: int = 2**16
    DENSE_STATE_LIMIT: int = 2**12
    POWER_ITER_TOL: float = 1e-12
    RESIDUAL_FLOOR: float = 1e-300

    # Simulation
    RECORD_BOX: int = 30
    LEAKAGE_WARN: float = 0.01
    ALLOC_CACHE_SIZE: int = 200_000
    PATH_GRID_POINTS: int = 1000

    # Fluid integration
    FACE_EPS: float = 1e-9
    H_STEP: float = 1e-3
    MAX_STEP_HALVINGS: int = 20

    # Verification
    VERIFY_WORKERS: int = 4

    # Output
    SIG_DIGITS: int = 9

    # Overrides every scenario seed when set (FAIRSHARE_SEED)
    SEED: Optional[int] = None

    model_config = SettingsConfigDict(
        env_prefix="FAIRSHARE_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )


# Global settings instance
settings = Settings()
