"""Stationary Gaussian parameter fields and admissible coefficient maps.

Fields live on a periodic grid of ``n**d`` cells. Cell values sit at the cell
centers ``(m + 1/2) h``; the face values of axis ``j`` sit at ``x_j = m h``
(the lower face of cell ``m``), other coordinates at cell centers.
"""

from __future__ import annotations
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import (
    Callable,
    List,
    Literal,
    Optional,
    Protocol,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from ._errors import (
    ClippedSpectrumWarning,
    HomlabWarning,
    InvalidInputError,
    WarningRecord,
    warning_record,
)
from ._logging import get_module_logger

logger = get_module_logger("field")

CovarianceKind = Literal["squared-exponential", "long-range"]
COVARIANCE_KINDS: Tuple[str, ...] = ("squared-exponential", "long-range")

CLIPPED_MASS_LIMIT = 1e-3
_UNIT_BELOW = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class GridSpec:
    d: int
    n: int
    length: float = 1.0

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise InvalidInputError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.n < 2 or self.n & (self.n - 1):
            raise InvalidInputError(f"n must be a power of two, got {self.n}")
        if not self.length > 0:
            raise InvalidInputError(f"length must be positive, got {self.length}")

    @property
    def h(self) -> float:
        return self.length / self.n

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @property
    def volume(self) -> float:
        return self.length**self.d

    def refined(self, factor: int = 2) -> GridSpec:
        return GridSpec(self.d, self.n * factor, self.length)

    def _axis_coords(self, axis: int, faces_on: Optional[int], boundary: bool):
        if axis == faces_on:
            m = np.arange(self.n + 1 if boundary else self.n)
            return m * self.h
        return (np.arange(self.n) + 0.5) * self.h

    def cell_centers(self) -> Tuple[np.ndarray, ...]:
        return tuple(
            np.meshgrid(
                *[self._axis_coords(j, None, False) for j in range(self.d)],
                indexing="ij",
            )
        )

    def face_centers(self, axis: int, boundary: bool = False) -> Tuple[np.ndarray, ...]:
        """Coordinates of the faces normal to ``axis``.

        With ``boundary=True`` the ``n + 1`` faces of the closed cube are
        returned, including the one at ``x_axis = L``.
        """
        return tuple(
            np.meshgrid(
                *[self._axis_coords(j, axis, boundary) for j in range(self.d)],
                indexing="ij",
            )
        )

    def periodic_distance(
        self, coords: Sequence[np.ndarray], center: Sequence[float]
    ) -> np.ndarray:
        r2 = np.zeros_like(coords[0], dtype=float)
        for c, x0 in zip(coords, center):
            delta = np.abs(c - x0) % self.length
            delta = np.minimum(delta, self.length - delta)
            r2 = r2 + delta**2
        return np.sqrt(r2)

    def ball_mask(
        self,
        center: Sequence[float],
        radius: float,
        staggered_axis: Optional[int] = None,
    ) -> np.ndarray:
        """Cells (or faces of ``staggered_axis``) within ``radius`` of ``center``."""
        coords = (
            self.cell_centers()
            if staggered_axis is None
            else self.face_centers(staggered_axis)
        )
        return self.periodic_distance(coords, center) <= radius

    def describe(self) -> dict:
        return {"d": self.d, "n": self.n, "L": self.length, "h": self.h}


@dataclass(frozen=True)
class CovarianceSpec:
    kind: CovarianceKind
    epsilon: float

    def __post_init__(self):
        if self.kind not in COVARIANCE_KINDS:
            raise InvalidInputError(f"unknown covariance kind {self.kind!r}")
        if not (0 < self.epsilon <= 1):
            raise InvalidInputError(
                f"correlation length must lie in (0, 1], got {self.epsilon}"
            )

    def kernel(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.kind == "squared-exponential":
            return np.exp(-(r**2) / (2 * self.epsilon**2))
        return (1.0 + r / self.epsilon) ** -0.5


def periodic_lag_distance(grid: GridSpec) -> np.ndarray:
    """Minimum-image length of every lag vector of the grid."""
    m = np.arange(grid.n)
    per_axis = np.minimum(m, grid.n - m) * grid.h
    r2 = np.zeros(grid.shape)
    for j in range(grid.d):
        shape = [1] * grid.d
        shape[j] = grid.n
        r2 = r2 + per_axis.reshape(shape) ** 2
    return np.sqrt(r2)


def wrapped_kernel(cov: CovarianceSpec, grid: GridSpec) -> np.ndarray:
    return cov.kernel(periodic_lag_distance(grid))


def periodization_correction(
    cov: CovarianceSpec, grid: GridSpec, images: int = 3
) -> float:
    """Relative weight of the periodic images at lag zero (direct lattice sum)."""
    z = np.arange(-images, images + 1)
    shifts = np.stack(np.meshgrid(*([z] * grid.d), indexing="ij"), axis=-1)
    r = np.linalg.norm(shifts.reshape(-1, grid.d), axis=1) * grid.length
    total = float(np.sum(cov.kernel(r)))
    return total / float(cov.kernel(0.0)) - 1.0


@dataclass(frozen=True)
class SpectralWeights:
    amplitude: np.ndarray
    clipped_mass: float


@lru_cache(maxsize=16)
def spectral_weights(cov: CovarianceSpec, grid: GridSpec) -> SpectralWeights:
    modal = np.fft.fftn(wrapped_kernel(cov, grid)).real
    negative = -modal[modal < 0].sum()
    total = np.abs(modal).sum()
    clipped = float(negative / total) if total > 0 else 0.0
    amplitude = np.sqrt(np.clip(modal, 0.0, None))
    amplitude.setflags(write=False)
    return SpectralWeights(amplitude=amplitude, clipped_mass=clipped)


def synthesized_covariance(cov: CovarianceSpec, grid: GridSpec) -> np.ndarray:
    """Exact covariance (per lag) of the synthesized cell field after clipping."""
    weights = spectral_weights(cov, grid)
    return np.fft.ifftn(weights.amplitude**2).real


@lru_cache(maxsize=16)
def _half_cell_phases(grid: GridSpec) -> Tuple[np.ndarray, ...]:
    k = np.fft.fftfreq(grid.n) * grid.n
    phases = []
    for j in range(grid.d):
        shape = [1] * grid.d
        shape[j] = grid.n
        phases.append(np.exp(-1j * np.pi * k / grid.n).reshape(shape))
    return tuple(phases)


def derive_seed(master: int, *keys: int) -> int:
    """Independent 64-bit sub-seed for a (stream, index, ...) key."""
    seq = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass
class RawField:
    grid: GridSpec
    cells: np.ndarray
    faces: np.ndarray
    seed: Optional[int]
    clipped_mass: float = 0.0
    cov: Optional[CovarianceSpec] = None
    warnings: List[WarningRecord] = field(default_factory=list)


def sample_gaussian_field(
    cov: CovarianceSpec,
    grid: GridSpec,
    seed: Optional[int] = None,
    noise: Optional[np.ndarray] = None,
    amplitude: Optional[np.ndarray] = None,
) -> RawField:
    """Spectral synthesis of a mean-zero stationary Gaussian field.

    The modal variances are the DFT of the periodically wrapped kernel; negative
    ones are clipped to zero and the clipped fraction is reported. Face samples
    reuse the same modal coefficients with an exact half-cell phase shift.

    ``noise`` replaces the seeded white noise and ``amplitude`` the kernel's
    modal amplitudes; both exist for translation and degenerate-spectrum checks.
    """
    if amplitude is None:
        weights = spectral_weights(cov, grid)
        amplitude, clipped = weights.amplitude, weights.clipped_mass
    else:
        amplitude, clipped = np.asarray(amplitude, dtype=float), 0.0
    if noise is None:
        if seed is None:
            raise InvalidInputError("either a seed or explicit noise is required")
        noise = np.random.default_rng(seed).standard_normal(grid.shape)
    elif noise.shape != grid.shape:
        raise InvalidInputError(f"noise shape {noise.shape} != grid {grid.shape}")

    modes = amplitude * np.fft.fftn(noise)
    cells = np.fft.ifftn(modes).real
    faces = np.stack(
        [np.fft.ifftn(modes * phase).real for phase in _half_cell_phases(grid)]
    )
    records: List[WarningRecord] = []
    if clipped > CLIPPED_MASS_LIMIT:
        records.append(
            warning_record(
                "field.sample_gaussian_field",
                f"clipped {clipped:.3g} of the modal mass for {cov.kind} eps={cov.epsilon}",
                clipped,
                ClippedSpectrumWarning,
            )
        )
    return RawField(
        grid=grid,
        cells=cells,
        faces=faces,
        seed=seed,
        clipped_mass=clipped,
        cov=cov,
        warnings=records,
    )


def squash_values(g):
    """tanh, kept strictly inside (-1, 1) after rounding."""
    return np.clip(np.tanh(g), -_UNIT_BELOW, _UNIT_BELOW)


@dataclass
class ParameterField:
    grid: GridSpec
    cells: np.ndarray
    faces: np.ndarray
    seed: Optional[int] = None
    clipped_mass: float = 0.0
    cov: Optional[CovarianceSpec] = None
    warnings: List[WarningRecord] = field(default_factory=list)

    def perturbed(
        self, delta_cells: np.ndarray, delta_faces: np.ndarray, t: float
    ) -> ParameterField:
        # clipped back into (-1, 1); only matters for |omega| within t of 1
        return replace(
            self,
            cells=np.clip(self.cells + t * delta_cells, -_UNIT_BELOW, _UNIT_BELOW),
            faces=np.clip(self.faces + t * delta_faces, -_UNIT_BELOW, _UNIT_BELOW),
            warnings=[],
        )

    @classmethod
    def constant(cls, grid: GridSpec, value: float) -> ParameterField:
        if not -1 < value < 1:
            raise InvalidInputError("parameter values must lie in (-1, 1)")
        return cls(
            grid=grid,
            cells=np.full(grid.shape, float(value)),
            faces=np.full((grid.d,) + grid.shape, float(value)),
        )


def squash(raw: RawField) -> ParameterField:
    return ParameterField(
        grid=raw.grid,
        cells=squash_values(raw.cells),
        faces=squash_values(raw.faces),
        seed=raw.seed,
        clipped_mass=raw.clipped_mass,
        cov=raw.cov,
        warnings=list(raw.warnings),
    )


def sample_parameter_field(
    cov: CovarianceSpec, grid: GridSpec, seed: int
) -> ParameterField:
    return squash(sample_gaussian_field(cov, grid, seed))


@dataclass
class CoefficientSet:
    """Face-sampled isotropic ``a`` (one array per axis), cell-sampled drift ``b``."""

    grid: GridSpec
    a: np.ndarray
    b: np.ndarray
    lam: float
    K: float
    Lambda: float
    seed: Optional[int] = None
    warnings: List[WarningRecord] = field(default_factory=list)

    @property
    def a_min(self) -> float:
        return float(self.a.min())

    @property
    def has_drift(self) -> bool:
        return bool(np.any(self.b != 0))

    def check_bounds(self, atol: float = 1e-12) -> None:
        if self.a.min() < 1 - atol or self.a.max() > self.lam + atol:
            raise InvalidInputError(
                f"a outside [1, {self.lam}]: [{self.a.min()}, {self.a.max()}]"
            )
        bnorm = np.sqrt(np.sum(self.b**2, axis=0))
        if bnorm.max(initial=0.0) > self.K + atol:
            raise InvalidInputError(f"|b| exceeds K={self.K}: {bnorm.max()}")
        if self.Lambda < self.K**2 + 1 - atol:
            raise InvalidInputError(
                f"Lambda={self.Lambda} < K^2 + 1 = {self.K**2 + 1}"
            )

    @classmethod
    def constant(
        cls,
        grid: GridSpec,
        a: float = 1.0,
        b: Optional[Sequence[float]] = None,
        Lambda: Optional[float] = None,
        lam: Optional[float] = None,
    ) -> CoefficientSet:
        bvec = np.zeros(grid.d) if b is None else np.asarray(b, dtype=float)
        K = float(np.linalg.norm(bvec))
        return cls(
            grid=grid,
            a=np.full((grid.d,) + grid.shape, float(a)),
            b=bvec.reshape((grid.d,) + (1,) * grid.d) * np.ones(grid.shape),
            lam=float(lam if lam is not None else max(a, 1.0)),
            K=K,
            Lambda=float(Lambda if Lambda is not None else K**2 + 1),
        )

    @classmethod
    def from_functions(
        cls,
        grid: GridSpec,
        a: Callable[..., np.ndarray],
        b: Optional[Callable[..., Sequence[np.ndarray]]] = None,
        Lambda: Optional[float] = None,
        lam: Optional[float] = None,
        K: Optional[float] = None,
    ) -> CoefficientSet:
        """Samples analytic ``a(*x)`` on faces and ``b(*x)`` on cells."""
        afaces = np.stack(
            [
                np.broadcast_to(a(*grid.face_centers(j)), grid.shape)
                for j in range(grid.d)
            ]
        ).astype(float)
        if b is None:
            bcells = np.zeros((grid.d,) + grid.shape)
        else:
            bcells = np.stack(
                [
                    np.broadcast_to(np.asarray(c, dtype=float), grid.shape)
                    for c in b(*grid.cell_centers())
                ]
            )
        Kval = (
            float(K)
            if K is not None
            else float(np.sqrt(np.sum(bcells**2, axis=0)).max())
        )
        return cls(
            grid=grid,
            a=afaces,
            b=bcells,
            lam=float(lam if lam is not None else max(afaces.max(), 1.0)),
            K=Kval,
            Lambda=float(Lambda if Lambda is not None else Kval**2 + 1),
        )


@dataclass(frozen=True)
class CoefficientMap:
    """Affine isotropic map from parameter values to admissible coefficients."""

    lam: float
    K: float
    Lambda: float
    drift_direction: Tuple[float, ...] = (1.0,)
    # False freezes a at the midpoint (1 + lam) / 2, leaving only the drift random
    random_diffusion: bool = True

    def __post_init__(self):
        if not self.lam > 1:
            raise InvalidInputError(f"lambda must exceed 1, got {self.lam}")
        if self.K < 0:
            raise InvalidInputError(f"K must be non-negative, got {self.K}")
        if self.Lambda < self.K**2 + 1:
            raise InvalidInputError(
                f"Lambda={self.Lambda} violates Lambda >= K^2 + 1 = {self.K**2 + 1}"
            )

    @property
    def da_domega(self) -> float:
        return (self.lam - 1) / 2

    @property
    def db_domega(self) -> float:
        return self.K

    def unit_direction(self, d: int) -> np.ndarray:
        v = np.zeros(d)
        given = np.asarray(self.drift_direction, dtype=float)[:d]
        v[: given.size] = given
        norm = np.linalg.norm(v)
        if norm == 0:
            raise InvalidInputError("drift direction must be non-zero")
        return v / norm

    def __call__(self, param: ParameterField) -> CoefficientSet:
        grid = param.grid
        v = self.unit_direction(grid.d)
        if self.random_diffusion:
            a = 1.0 + (self.lam - 1.0) * (param.faces + 1.0) / 2.0
        else:
            a = np.full(param.faces.shape, (1.0 + self.lam) / 2.0)
        b = self.K * param.cells[None, ...] * v.reshape((grid.d,) + (1,) * grid.d)
        records = list(param.warnings)
        if self.db_domega > self.lam:
            records.append(
                warning_record(
                    "field.coefficient_map",
                    f"drift derivative K={self.K} exceeds lambda={self.lam}",
                    self.K,
                    HomlabWarning,
                )
            )
        return CoefficientSet(
            grid=grid,
            a=a,
            b=b,
            lam=self.lam,
            K=self.K,
            Lambda=self.Lambda,
            seed=param.seed,
            warnings=records,
        )


def coefficient_map(
    param: ParameterField,
    lam: float,
    K: float,
    Lambda: float,
    drift_direction: Sequence[float] = (1.0,),
) -> CoefficientSet:
    return CoefficientMap(lam, K, Lambda, tuple(drift_direction))(param)


def lipschitz_estimate(coef: CoefficientSet) -> float:
    """Largest finite-difference slope of ``a`` over all face families and axes."""
    h = coef.grid.h
    slope = 0.0
    for j in range(coef.grid.d):
        for k in range(coef.grid.d):
            diff = np.abs(np.roll(coef.a[j], -1, axis=k) - coef.a[j]) / h
            slope = max(slope, float(diff.max()))
    return slope


class CoefficientSource(Protocol):
    grid: GridSpec

    def __call__(self, index: int) -> CoefficientSet: ...


@dataclass(frozen=True)
class FieldSampler:
    cov: CovarianceSpec
    grid: GridSpec
    master_seed: int
    stream: int = 0

    def seed(self, index: int) -> int:
        return derive_seed(self.master_seed, self.stream, index)

    def __call__(self, index: int) -> ParameterField:
        return sample_parameter_field(self.cov, self.grid, self.seed(index))


@dataclass(frozen=True)
class CoefficientSampler:
    fields: FieldSampler
    coef_map: CoefficientMap

    @property
    def grid(self) -> GridSpec:
        return self.fields.grid

    def __call__(self, index: int) -> CoefficientSet:
        return self.coef_map(self.fields(index))


@dataclass(frozen=True)
class FixedCoefficients:
    """Deterministic coefficients returned for every sample index."""

    coef: CoefficientSet

    @property
    def grid(self) -> GridSpec:
        return self.coef.grid

    def __call__(self, index: int) -> CoefficientSet:
        return self.coef


@dataclass
class CovarianceEstimate:
    lags: np.ndarray
    values: np.ndarray
    std_err: np.ndarray
    n_samples: int


FieldLike = Union[ParameterField, RawField]


def empirical_covariance(
    samples: Sequence[FieldLike], max_lag: int, axis: int = 0
) -> CovarianceEstimate:
    """Unbiased lag covariance of cell values along ``axis``.

    The per-cell ensemble mean is removed (factor ``M/(M-1)``); each sample
    then contributes one spatial average per lag and the standard error is the
    spread of those per-sample averages.
    """
    if len(samples) < 2:
        raise InvalidInputError("at least two samples are required")
    grid = samples[0].grid
    if any(s.grid != grid for s in samples):
        raise InvalidInputError("samples live on different grids")
    if not 0 <= max_lag < grid.n:
        raise InvalidInputError(f"max_lag must lie in [0, {grid.n})")
    M = len(samples)
    stack = np.stack([np.asarray(s.cells, dtype=float) for s in samples])
    centered = stack - stack.mean(axis=0, keepdims=True)
    lags = np.arange(max_lag + 1)
    per_sample = np.empty((M, lags.size))
    for i, lag in enumerate(lags):
        shifted = np.roll(centered, -int(lag), axis=axis + 1)
        per_sample[:, i] = (centered * shifted).reshape(M, -1).mean(axis=1)
    per_sample *= M / (M - 1)
    return CovarianceEstimate(
        lags=lags,
        values=per_sample.mean(axis=0),
        std_err=per_sample.std(axis=0, ddof=1) / np.sqrt(M),
        n_samples=M,
    )


def squashed_covariance(
    cov_values, variance: float = 1.0, order: int = 48
) -> np.ndarray:
    """Covariance of ``tanh(X), tanh(Y)`` for a centered Gaussian pair.

    ``cov_values`` are Cov(X, Y); Var(X) = Var(Y) = ``variance``. Evaluated by
    a tensor Gauss-Hermite rule over the distinct correlation values.
    """
    cov_values = np.asarray(cov_values, dtype=float)
    if variance <= 0:
        return np.zeros_like(cov_values)
    rho = np.clip(cov_values / variance, -1.0, 1.0)
    unique, inverse = np.unique(rho, return_inverse=True)
    z, w = hermegauss(order)
    w = w / np.sqrt(2 * np.pi)
    s = np.sqrt(variance)
    tx = np.tanh(s * z)[:, None]
    out = np.empty(unique.size)
    for i, r in enumerate(unique):
        y = s * (r * z[:, None] + np.sqrt(max(1.0 - r * r, 0.0)) * z[None, :])
        out[i] = np.einsum("i,j,ij->", w, w, tx * np.tanh(y))
    return out[inverse].reshape(cov_values.shape)


__all__ = [
    "GridSpec",
    "CovarianceSpec",
    "RawField",
    "ParameterField",
    "CoefficientSet",
    "CoefficientMap",
    "CoefficientSource",
    "FieldSampler",
    "CoefficientSampler",
    "FixedCoefficients",
    "CovarianceEstimate",
    "sample_gaussian_field",
    "sample_parameter_field",
    "squash",
    "squash_values",
    "coefficient_map",
    "empirical_covariance",
    "squashed_covariance",
    "synthesized_covariance",
    "spectral_weights",
    "wrapped_kernel",
    "periodic_lag_distance",
    "periodization_correction",
    "lipschitz_estimate",
    "derive_seed",
]
