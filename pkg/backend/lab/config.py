"""
Run configuration: pydantic models for every parameter block, loading with
usage errors, seed precedence and the resolved-config echo.
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .error_handler import ConfigurationError

logger = logging.getLogger(__name__)

SEED_ENV = "HOMOG_LAB_SEED"


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PotentialRef(_Block):
    """Exactly one of a preset name, a potential file path or an inline potential."""
    preset: Optional[str] = None
    path: Optional[str] = None
    inline: Optional[Dict[str, Any]] = None

    @model_validator(mode="after")
    def check_one_source(self) -> "PotentialRef":
        given = [v for v in (self.preset, self.path, self.inline) if v is not None]
        if len(given) != 1:
            raise ValueError("give exactly one of preset, path or inline")
        return self


class GeometryConfig(_Block):
    n_box: int = Field(default=2, ge=0)
    periodic: bool = True


class VerifyConfig(_Block):
    sample_count: int = Field(default=32, ge=1)
    tolerance: float = Field(default=1e-12, gt=0)


class SamplerConfig(_Block):
    n_chains: int = Field(default=8, ge=1)
    n_samples: int = Field(default=250, ge=1)
    burn_in: int = Field(default=1000, ge=0)
    thinning: int = Field(default=5, ge=0)
    step_size: float = Field(default=0.2, gt=0)
    stall_window: int = Field(default=500, ge=1)


class MixingConfig(_Block):
    times: List[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0, 4.0, 8.0])
    dt: float = Field(default=0.01, gt=0)
    n_starts: int = Field(default=16, ge=1)
    paths_per_start: int = Field(default=200, ge=2)
    c: float = Field(default=1.0, gt=0)

    @field_validator("times")
    @classmethod
    def check_times(cls, value: List[float]) -> List[float]:
        if any(t < 0 for t in value) or sorted(value) != value or len(set(value)) != len(value):
            raise ValueError("mixing times must be non-negative and strictly increasing")
        return value


class CorrectorConfig(_Block):
    method: Literal["auto", "exact", "feynman_kac"] = "auto"
    n_points: int = Field(default=32, ge=2)
    paths: int = Field(default=256, ge=2)
    dt: float = Field(default=0.01, gt=0)
    horizon: Optional[float] = Field(default=None, gt=0)
    t_max: float = Field(default=20.0, gt=0)
    target_se: float = Field(default=0.05, gt=0)
    step: float = Field(default=0.01, gt=0)
    block_radius: float = Field(default=1.0, ge=0)
    check_points: int = Field(default=4, ge=1)
    resolvent_lambdas: List[float] = Field(default_factory=list)

    @field_validator("resolvent_lambdas")
    @classmethod
    def check_lambdas(cls, value: List[float]) -> List[float]:
        if value and (len(value) < 2 or any(lam <= 0 for lam in value)):
            raise ValueError("give at least two positive resolvent parameters, or none")
        return value


class EffectiveConfig(_Block):
    estimators: List[Literal["derivative", "martingale", "msd", "exact1d"]] = Field(
        default_factory=lambda: ["derivative"])
    n_max: int = Field(default=1, ge=1)
    max_cutoff: int = Field(default=8, ge=1)
    smoothing_radius: float = Field(default=0.0, ge=0)
    n_starts: int = Field(default=64, ge=2)
    window: float = Field(default=1.0, gt=0)
    n_windows: int = Field(default=8, ge=1)
    msd_times: List[float] = Field(default_factory=lambda: [1.0, 2.0, 4.0])
    dt: float = Field(default=0.01, gt=0)


class RandomEnvConfig(_Block):
    n_environments: int = Field(default=10, ge=1)
    paths_per_environment: int = Field(default=100, ge=2)


class HomogenizeConfig(_Block):
    eps: List[float] = Field(default_factory=lambda: [1.0, 0.5, 0.25, 0.125])
    times: List[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0])
    paths: int = Field(default=1000, ge=4)
    dt_quotient: float = Field(default=0.01, gt=0)
    start_mode: Literal["gibbs", "fixed"] = "gibbs"
    fixed_start: Optional[List[float]] = None
    sites_radius: float = Field(default=0.0, ge=0)
    coupling: Literal["shared", "independent"] = "shared"
    zeta_paths: int = Field(default=200, ge=4)
    rho_terms: int = Field(default=10, ge=1)
    tightness_n: float = Field(default=1.0, gt=0)
    gap_fraction: float = Field(default=0.05, gt=0)
    level: float = Field(default=0.01, gt=0, lt=1)
    random_env: RandomEnvConfig = Field(default_factory=RandomEnvConfig)

    @field_validator("eps")
    @classmethod
    def check_eps(cls, value: List[float]) -> List[float]:
        if not value or any(not 0.0 < e <= 1.0 for e in value):
            raise ValueError("every eps must lie in (0, 1]")
        return value

    @field_validator("times")
    @classmethod
    def check_times(cls, value: List[float]) -> List[float]:
        if not value or any(t <= 0 for t in value) or sorted(value) != value:
            raise ValueError("observation times must be positive and increasing")
        return value


class RunConfig(_Block):
    potential: PotentialRef
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    mixing: MixingConfig = Field(default_factory=MixingConfig)
    corrector: CorrectorConfig = Field(default_factory=CorrectorConfig)
    effective: EffectiveConfig = Field(default_factory=EffectiveConfig)
    homogenize: HomogenizeConfig = Field(default_factory=HomogenizeConfig)
    seed: int = Field(default=0, ge=0)
    out: str = "runs/default"
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def check_blocks(self) -> "RunConfig":
        if self.corrector.block_radius < self.effective.n_max:
            raise ValueError("corrector.block_radius must cover the largest truncation level effective.n_max")
        return self


def parse_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid run configuration: {e}") from e


def load_config(path: Union[str, Path]) -> RunConfig:
    """
    Read and validate a JSON run configuration.

    Args:
        path (Union[str, Path]): Config file

    Returns:
        RunConfig: Validated configuration with defaults filled in
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    config = parse_config(data)
    if config.potential.path is not None and not Path(config.potential.path).is_absolute():
        resolved = (Path(path).parent / config.potential.path).resolve()
        config = config.model_copy(update={"potential": PotentialRef(path=str(resolved))})
    logger.info(f"Loaded run config from {path}")
    return config


def resolve_seed(config: RunConfig, flag: Optional[int] = None) -> int:
    """Seed precedence: command-line flag, then HOMOG_LAB_SEED, then the config field."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError as e:
            raise ConfigurationError(f"{SEED_ENV}={env!r} is not an integer") from e
    return config.seed


def apply_overrides(config: RunConfig, seed: Optional[int] = None, workers: Optional[int] = None,
                    out: Optional[str] = None) -> RunConfig:
    update: Dict[str, Any] = {"seed": resolve_seed(config, seed)}
    if workers is not None:
        if workers < 1:
            raise ConfigurationError("--workers must be at least 1")
        update["workers"] = workers
    if out is not None:
        update["out"] = out
    return config.model_copy(update=update)


def resolved_dict(config: RunConfig) -> Dict[str, Any]:
    """All fields with defaults materialized."""
    return config.model_dump(mode="json")


def hash_input(config: RunConfig) -> Dict[str, Any]:
    """Resolved config without the fields that must not change results (workers, out)."""
    data = resolved_dict(config)
    data.pop("workers", None)
    data.pop("out", None)
    return data
