"""Declarative run configuration.

A run is described by one TOML (or JSON) file; every numerical parameter
lives there and command-line flags only choose the file and the output
directory.
"""

from __future__ import annotations
import hashlib
import json
import math
import tomllib
from pathlib import Path
from typing import ClassVar, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ._errors import InvalidInputError
from .field import CoefficientMap, CovarianceKind, CovarianceSpec, GridSpec
from .manufactured import ManufacturedSolution, ProfileKind, make_profile

Setting = Literal["fullspace-proxy", "bounded"]
LambdaMode = Literal["minimal", "explicit"]


class AcceptanceConfig(BaseModel):
    """Optional assertions; a threshold left unset is not checked."""

    model_config = ConfigDict(extra="forbid")

    min_slope: Optional[float] = None
    max_slope: Optional[float] = None
    monotone: bool = False
    norm_consistency: bool = False
    max_truncation_ratio: Optional[float] = None


class HomlabConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    EXPORT_EXCLUDE_FIELDS: ClassVar[set[str]] = set()

    d: int = 3
    n: int = Field(128, description="largest cells per side used by any run")
    L: float = 1.0
    lam: float = Field(4.0, alias="lambda")
    K: float = 0.5
    Lambda_mode: LambdaMode = "minimal"
    Lambda: Optional[float] = None
    cov: CovarianceKind = "squared-exponential"
    epsilons: List[float] = Field(default_factory=lambda: [0.25, 0.125, 0.0625])
    M: int = 8
    M_homog: int = 16
    seed: int = 0
    setting: Setting = "bounded"
    u0: ProfileKind = "bump"
    u0_radius: Optional[float] = None
    drift_direction: List[float] = Field(default_factory=lambda: [1.0])
    random_diffusion: bool = True
    tol: float = 1e-10
    T: float = math.inf
    workers: Optional[int] = Field(None, json_schema_extra={"export": False})
    iotas: Optional[List[float]] = None
    max_lag: int = 8
    sgap_samples: int = 1024
    sgap_rhs_samples: int = 32
    sgap_min_samples: int = 256
    sgap_stride: Optional[int] = None
    sgap_bridge: bool = True
    truncation_check: bool = True
    acceptance: AcceptanceConfig = Field(default_factory=AcceptanceConfig)

    @model_validator(mode="after")
    def _check(self) -> HomlabConfig:
        if self.d not in (1, 2, 3):
            raise ValueError(f"d must be 1, 2 or 3, got {self.d}")
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two, got {self.n}")
        if self.lam < 1:
            raise ValueError(f"lambda must be at least 1, got {self.lam}")
        if self.K < 0:
            raise ValueError(f"K must be non-negative, got {self.K}")
        if self.L <= 0:
            raise ValueError(f"L must be positive, got {self.L}")
        if not self.epsilons:
            raise ValueError("at least one epsilon is required")
        if any(not 0 < e <= 1 for e in self.epsilons):
            raise ValueError("every epsilon must lie in (0, 1]")
        if any(a <= b for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError("epsilons must be strictly decreasing")
        if self.M < 1 or self.M_homog < 1:
            raise ValueError("sample counts must be positive")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be positive")
        if self.Lambda_mode == "explicit":
            if self.Lambda is None:
                raise ValueError("Lambda_mode 'explicit' needs a Lambda value")
            if self.Lambda < self.K**2 + 1:
                raise ValueError(
                    f"Lambda={self.Lambda} violates Lambda >= K^2 + 1 = {self.K**2 + 1}"
                )
        return self

    @property
    def Lambda_value(self) -> float:
        if self.Lambda_mode == "minimal":
            return self.K**2 + 1
        return float(self.Lambda)

    @classmethod
    def export_exclude_fields(cls) -> set[str]:
        """Field names removed when exporting the resolved config."""
        excluded = set(getattr(cls, "EXPORT_EXCLUDE_FIELDS", set()))
        for name, field in cls.model_fields.items():
            extra = field.json_schema_extra
            if isinstance(extra, dict) and extra.get("export") is False:
                excluded.add(name)
        return excluded

    def exportable_dict(self) -> dict:
        data = self.model_dump(
            mode="json", by_alias=True, exclude=self.export_exclude_fields()
        )
        # json has no infinity
        if math.isinf(self.T):
            data["T"] = "inf"
        return data

    def covariance(self, epsilon: float) -> CovarianceSpec:
        return CovarianceSpec(self.cov, epsilon)

    def coefficient_map(self) -> CoefficientMap:
        return CoefficientMap(
            lam=self.lam,
            K=self.K,
            Lambda=self.Lambda_value,
            drift_direction=tuple(self.drift_direction),
            random_diffusion=self.random_diffusion,
        )

    def grid(self, n: Optional[int] = None) -> GridSpec:
        return GridSpec(self.d, n or self.n, self.L)

    def profile(self) -> ManufacturedSolution:
        return make_profile(self.u0, self.d, self.L, self.u0_radius)


ConfigSource = Union[str, Path]


def parse_config(raw: bytes, suffix: str = ".toml") -> HomlabConfig:
    try:
        if suffix == ".json":
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise InvalidInputError(f"malformed config: {exc}") from exc
    try:
        return HomlabConfig.model_validate(data)
    except ValidationError as exc:
        raise InvalidInputError(f"invalid config: {exc}") from exc


def load_config(path: ConfigSource) -> Tuple[HomlabConfig, bytes]:
    """Reads and validates a config file; returns it with its raw bytes."""
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"config file {path} does not exist")
    raw = path.read_bytes()
    return parse_config(raw, path.suffix.lower()), raw


def config_hash(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


__all__ = [
    "AcceptanceConfig",
    "HomlabConfig",
    "parse_config",
    "load_config",
    "config_hash",
]
