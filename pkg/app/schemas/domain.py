from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, field_validator, model_validator

from app.core.config import settings
from app.services.spectral_service import SpectralMeasure, load_measure

ExperimentName = Literal[
    "sample",
    "measure",
    "identity",
    "kacrice",
    "condcurv",
    "couple",
    "scaling",
    "productgauss",
    "moments",
    "continuity",
]


class MeasureSpec(BaseModel):
    builtin: str | None = None
    params: dict[str, Any] = Field(default_factory=dict)
    dim: int | None = None
    atoms: list[list[float]] | None = None
    weights: list[float] | None = None

    @model_validator(mode="after")
    def _one_source(self) -> "MeasureSpec":
        if self.builtin is None and (self.atoms is None or self.weights is None):
            raise ValueError("measure needs either 'builtin' or both 'atoms' and 'weights'")
        return self

    def to_measure(self) -> SpectralMeasure:
        return load_measure(self.model_dump(exclude_none=True))


class ExperimentConfig(BaseModel):
    experiment: ExperimentName
    measure: MeasureSpec = Field(default_factory=lambda: MeasureSpec(builtin="rpw_circle", params={"M": 64}))
    second_measure: MeasureSpec | None = None
    R: float = Field(default=4.0, gt=0.0)
    R_values: list[float] | None = None
    grid_n: int = Field(default_factory=lambda: settings.default_grid_n, ge=16)
    coarse_grid_n: int = Field(default=128, ge=16)
    levels: list[float] = Field(default_factory=lambda: [0.0])
    bands: list[tuple[float, float]] = Field(default_factory=lambda: [(0.0, 0.5)])
    seed_start: int = Field(default=0, ge=0)
    seed_stop: int = Field(default=10, ge=1)
    n_mc: int = Field(default=100000, gt=1)
    points_per_seed: int = Field(default=100000, gt=0)
    bandwidth: float = Field(default=0.05, gt=0.0)
    epsilons: list[float] = Field(default_factory=lambda: [0.1, 0.05, 0.02, 0.01, 0.005])
    perturbation: Literal["dilation", "rotation"] = "dilation"
    rhos: list[float] = Field(default_factory=lambda: [-0.9, 0.0, 0.5, 0.9])
    deltas: list[float] = Field(default_factory=lambda: [2.0**-n for n in range(3, 9)])
    gradient_split: float = Field(default=0.1, gt=0.0)
    moment_exponent: float = Field(default=1.5, gt=0.0)
    moment_sizes: list[int] = Field(default_factory=lambda: [10**4, 10**5, 10**6])
    field_format: Literal["csv", "raw"] = "csv"
    output_dir: str | None = None
    threads: int = Field(default_factory=lambda: settings.worker_threads, ge=1)

    @field_validator("bands")
    @classmethod
    def _ordered_bands(cls, value: list[tuple[float, float]]) -> list[tuple[float, float]]:
        for a, b in value:
            if not a < b:
                raise ValueError(f"band [{a}, {b}] must satisfy a < b")
        return value

    @field_validator("rhos")
    @classmethod
    def _correlations(cls, value: list[float]) -> list[float]:
        if any(abs(rho) > 1.0 for rho in value):
            raise ValueError("correlations must lie in [-1, 1]")
        return value

    @field_validator("deltas", "moment_sizes")
    @classmethod
    def _positive_entries(cls, value: list) -> list:
        if not value or any(v <= 0 for v in value):
            raise ValueError("entries must be positive and the list nonempty")
        return value

    @field_validator("R_values")
    @classmethod
    def _radii(cls, value: list[float] | None) -> list[float] | None:
        if value is not None and (not value or any(r <= 0.0 for r in value)):
            raise ValueError("R_values must be a nonempty list of positive radii")
        return value

    @field_validator("epsilons")
    @classmethod
    def _ladder(cls, value: list[float]) -> list[float]:
        if not value or any(v < 0.0 for v in value):
            raise ValueError("epsilon ladder must be nonempty and non-negative")
        return value

    @model_validator(mode="after")
    def _seed_range(self) -> "ExperimentConfig":
        if self.seed_stop <= self.seed_start:
            raise ValueError(f"empty seed range {self.seed_start}..{self.seed_stop}")
        return self

    @property
    def seeds(self) -> range:
        return range(self.seed_start, self.seed_stop)

    @property
    def radii(self) -> list[float]:
        return list(self.R_values) if self.R_values else [self.R]

    def hash_payload(self) -> dict[str, Any]:
        # Output location and pool size do not change results.
        return self.model_dump(mode="json", exclude={"output_dir", "threads"})

    def resolved_output_dir(self, default: Path) -> Path:
        return Path(self.output_dir) if self.output_dir else default


class ProductGaussianRequest(BaseModel):
    rho: float = Field(ge=-1.0, le=1.0)
    z: list[float] = Field(default_factory=list)


class KacRiceRequest(BaseModel):
    measure: MeasureSpec
    R: float = Field(gt=0.0)
    level: float = 0.0
    n_mc: int = Field(default=100000, gt=1)


class TransportRequest(BaseModel):
    first: MeasureSpec
    second: MeasureSpec
    R: float | None = Field(default=None, gt=0.0)
