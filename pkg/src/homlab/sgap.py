"""Monte Carlo checks of the spectral gap inequality.

The sensitivity ``sup |dF(omega)[delta]|`` over perturbations with
``|delta| <= 1`` supported in ``B_eps(x)`` is bounded from below by a fixed
dictionary (ball indicator, per-axis dipoles and half balls), so the computed
right-hand side never exceeds the true one.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from ._errors import HomlabError, InvalidInputError
from ._logging import get_module_logger
from .calculus import DEFAULT_TOL
from .corrector import CorrectorSet, solve_correctors
from .field import (
    CoefficientMap,
    CovarianceSpec,
    FieldSampler,
    GridSpec,
    ParameterField,
    squashed_covariance,
    synthesized_covariance,
)
from .homog import GammaField, gamma_field
from .jobs import JobManager, raise_first
from .localize import CubePartition, LocalizedVarianceReport, localized_variance_check
from .manufactured import ManufacturedSolution

logger = get_module_logger("sgap")

DEFAULT_STEP = 1e-4


class FunctionalEvaluationError(HomlabError):
    pass


class Functional(Protocol):
    name: str

    def __call__(self, param: ParameterField) -> float: ...


@dataclass(frozen=True)
class Perturbation:
    name: str
    cells: np.ndarray
    faces: np.ndarray


def perturbation_dictionary(
    grid: GridSpec, center: Sequence[float], radius: float
) -> List[Perturbation]:
    """``2d + 1`` unit perturbations supported in the ball: the indicator, and
    per axis a dipole and an upper half ball."""
    cell_coords = grid.cell_centers()
    face_coords = [grid.face_centers(j) for j in range(grid.d)]
    cell_in = grid.ball_mask(center, radius)
    face_in = np.stack(
        [grid.ball_mask(center, radius, staggered_axis=j) for j in range(grid.d)]
    )

    def _signed(coords, axis):
        delta = coords[axis] - center[axis]
        delta = (delta + grid.length / 2) % grid.length - grid.length / 2
        return np.sign(delta)

    out = [Perturbation("bump", cell_in.astype(float), face_in.astype(float))]
    for k in range(grid.d):
        cell_sign = _signed(cell_coords, k)
        face_sign = np.stack([_signed(face_coords[j], k) for j in range(grid.d)])
        out.append(
            Perturbation(f"dipole-{k}", cell_in * cell_sign, face_in * face_sign)
        )
        out.append(
            Perturbation(
                f"half-{k}",
                (cell_in & (cell_sign > 0)).astype(float),
                (face_in & (face_sign > 0)).astype(float),
            )
        )
    return out


def _evaluate(F: Functional, param: ParameterField, label: str) -> float:
    value = float(F(param))
    if not np.isfinite(value):
        raise FunctionalEvaluationError(
            f"functional {getattr(F, 'name', F)!r} is not finite under {label}"
        )
    return value


def frechet_norm(
    F: Functional,
    param: ParameterField,
    x: Sequence[float],
    epsilon: float,
    t: float = DEFAULT_STEP,
    dictionary: Optional[Sequence[Perturbation]] = None,
) -> float:
    """Largest central difference quotient of ``F`` over the dictionary at ``x``."""
    if dictionary is None:
        dictionary = perturbation_dictionary(param.grid, x, epsilon)
    best = 0.0
    for p in dictionary:
        if not p.cells.any() and not p.faces.any():
            continue
        up = _evaluate(F, param.perturbed(p.cells, p.faces, t), f"+{p.name}")
        down = _evaluate(F, param.perturbed(p.cells, p.faces, -t), f"-{p.name}")
        best = max(best, abs(up - down) / (2 * t))
    return best


@dataclass
class CubeAverageFunctional:
    """Average of the cell parameter values over an index box."""

    grid: GridSpec
    lower: Tuple[int, ...]
    size: int
    name: str = ""

    def __post_init__(self):
        if not self.name:
            self.name = f"cube{self.size}@{','.join(map(str, self.lower))}"

    @property
    def support(self) -> np.ndarray:
        mask = np.zeros(self.grid.shape, dtype=bool)
        idx = tuple(
            np.arange(lo, lo + self.size) % self.grid.n for lo in self.lower
        )
        mask[np.ix_(*idx)] = True
        return mask

    @property
    def weights(self) -> np.ndarray:
        return self.support / float(self.size**self.grid.d)

    def __call__(self, param: ParameterField) -> float:
        return float(np.sum(self.weights * param.cells))


def default_functional_dictionary(grid: GridSpec) -> List[CubeAverageFunctional]:
    """Five cube averages: the whole domain and four sub-cubes."""
    n = grid.n
    origin = (0,) * grid.d
    return [
        CubeAverageFunctional(grid, origin, n, "domain"),
        CubeAverageFunctional(grid, origin, n // 2, "half"),
        CubeAverageFunctional(grid, origin, n // 4, "quarter"),
        CubeAverageFunctional(grid, (n // 2,) * grid.d, n // 4, "quarter-center"),
        CubeAverageFunctional(grid, (n // 4,) * grid.d, max(n // 8, 1), "eighth"),
    ]


@dataclass
class GammaCubeFunctional:
    """``avg_cube Gamma_i d_i u0`` as a functional of the parameter field."""

    coef_map: CoefficientMap
    u0: ManufacturedSolution
    part: CubePartition
    cube_id: int
    b_bar: np.ndarray
    tol: float = DEFAULT_TOL
    name: str = "gamma-cube"

    @property
    def support(self) -> Optional[np.ndarray]:
        # without random diffusion the corrector vanishes and Gamma is local
        if self.coef_map.random_diffusion:
            return None
        return self.part.cube_index() == self.cube_id

    def gamma(self, param: ParameterField) -> GammaField:
        coef = self.coef_map(param)
        if self.coef_map.random_diffusion:
            cs = solve_correctors(coef, tol=self.tol, with_sigma=False)
        else:
            cs = CorrectorSet.zeros(coef)
        return gamma_field(coef, cs, self.b_bar)

    def __call__(self, param: ParameterField) -> float:
        gamma = self.gamma(param)
        values = gamma.contracted(self.u0.sample_gradient(param.grid))
        mask = self.part.cube_index() == self.cube_id
        return float(values[mask].mean())


def _lattice(grid: GridSpec, stride: int) -> List[Tuple[int, ...]]:
    axes = [np.arange(0, grid.n, stride)] * grid.d
    return [tuple(int(i) for i in idx) for idx in np.stack(
        np.meshgrid(*axes, indexing="ij"), axis=-1
    ).reshape(-1, grid.d)]


def _near_support(
    grid: GridSpec, support: np.ndarray, index: Tuple[int, ...], radius: float
) -> bool:
    center = [(i + 0.5) * grid.h for i in index]
    return bool(np.any(support & grid.ball_mask(center, radius + grid.h)))


def sensitivity_integral(
    F: Functional,
    param: ParameterField,
    epsilon: float,
    stride: Optional[int] = None,
    t: float = DEFAULT_STEP,
) -> float:
    """``int (sup_delta |dF[delta]|)^2 dx`` on a coarse lattice of centers."""
    grid = param.grid
    if stride is None:
        stride = max(1, int(epsilon / (2 * grid.h)))
    support = getattr(F, "support", None)
    total = 0.0
    for index in _lattice(grid, stride):
        if support is not None and not _near_support(grid, support, index, epsilon):
            continue
        center = [(i + 0.5) * grid.h for i in index]
        total += frechet_norm(F, param, center, epsilon, t) ** 2
    return total * (stride * grid.h) ** grid.d


@dataclass
class SpectralGapEstimate:
    functional: str
    kind: str
    epsilon: float
    variance: float
    variance_se: float
    rhs: float
    rhs_se: float
    n_samples: int
    rhs_samples: int
    dictionary_size: int
    t: float
    d: int = 1
    values: List[float] = field(default_factory=list, repr=False)

    @property
    def rho_bound(self) -> Optional[float]:
        """Implied bound ``rho <= sqrt(eps^d rhs / Var F)``; None when Var F is not resolved."""
        if self.variance <= 3 * self.variance_se or self.variance <= 0:
            return None
        return float(np.sqrt(self.epsilon**self.d * self.rhs / self.variance))

    def to_row(self) -> dict:
        return {
            "functional": self.functional,
            "kind": self.kind,
            "epsilon": self.epsilon,
            "variance": self.variance,
            "rhs": self.rhs,
            "rho_bound": self.rho_bound,
        }


def _variance_with_se(values: np.ndarray) -> Tuple[float, float]:
    M = values.size
    var = float(values.var(ddof=1))
    centered = (values - values.mean()) ** 2
    se = float(centered.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    return var, se


def spectral_gap_test(
    F: Functional,
    cov: CovarianceSpec,
    grid: GridSpec,
    M: int,
    master_seed: int = 0,
    rhs_samples: Optional[int] = None,
    stride: Optional[int] = None,
    t: float = DEFAULT_STEP,
    workers: Optional[int] = None,
    min_samples: int = 256,
    stream: int = 7,
) -> SpectralGapEstimate:
    """Var F over ``M`` samples against the sensitivity integral on the first
    ``rhs_samples`` of them (all by default)."""
    if M < min_samples:
        raise InvalidInputError(f"at least {min_samples} samples are required, got {M}")
    sampler = FieldSampler(cov, grid, master_seed, stream)
    manager = JobManager(workers)
    values = np.array(
        raise_first(
            manager.run(
                lambda k: _evaluate(F, sampler(k), "sample"),
                list(range(M)),
                label="sgap-variance",
            )
        )
    )
    n_rhs = M if rhs_samples is None else min(rhs_samples, M)
    rhs_values = np.array(
        raise_first(
            manager.run(
                lambda k: sensitivity_integral(F, sampler(k), cov.epsilon, stride, t),
                list(range(n_rhs)),
                label="sgap-rhs",
            )
        )
    )
    var, var_se = _variance_with_se(values)
    estimate = SpectralGapEstimate(
        functional=getattr(F, "name", type(F).__name__),
        kind=cov.kind,
        epsilon=cov.epsilon,
        variance=var,
        variance_se=var_se,
        rhs=float(rhs_values.mean()),
        rhs_se=float(rhs_values.std(ddof=1) / np.sqrt(n_rhs)) if n_rhs > 1 else 0.0,
        n_samples=M,
        rhs_samples=n_rhs,
        dictionary_size=2 * grid.d + 1,
        t=t,
        values=values.tolist(),
        d=grid.d,
    )
    logger.info(
        "%s (%s, eps=%g): Var=%.4g +- %.2g, rhs=%.4g, rho<=%s",
        estimate.functional,
        cov.kind,
        cov.epsilon,
        var,
        var_se,
        estimate.rhs,
        estimate.rho_bound,
    )
    return estimate


def common_rho(estimates: Sequence[SpectralGapEstimate]) -> Optional[float]:
    """Largest ``rho`` compatible with every estimate (min of the implied bounds)."""
    bounds = [e.rho_bound for e in estimates if e.rho_bound is not None]
    return float(min(bounds)) if bounds else None


def linear_functional_variance(
    cov: CovarianceSpec, grid: GridSpec, weights: np.ndarray
) -> float:
    """Exact ``Var[sum_x w(x) tanh(G(x))]`` for the synthesized Gaussian ``G``."""
    c = synthesized_covariance(cov, grid)
    c_sq = squashed_covariance(c, variance=float(c.flat[0]))
    conv = np.fft.ifftn(np.fft.fftn(c_sq) * np.fft.fftn(weights)).real
    return float(np.sum(weights * conv))


@dataclass
class BridgeReport:
    variance: float
    variance_se: float
    bound: float
    ratio: float
    cube_id: Optional[int] = None
    rho: Optional[float] = None

    @property
    def holds(self) -> bool:
        return self.variance <= self.bound + 3 * self.variance_se

    def to_record(self) -> dict:
        return {
            "cube_id": self.cube_id,
            "rho": self.rho,
            "variance": self.variance,
            "variance_se": self.variance_se,
            "bound": self.bound,
            "ratio": self.ratio,
            "holds": self.holds,
        }


def gamma_variance_bridge(
    local: LocalizedVarianceReport,
    cube_id: int,
    estimate: SpectralGapEstimate,
    rho: float,
) -> BridgeReport:
    """Measured cube variance against ``eps^d rhs / rho^2`` for the same functional."""
    if rho <= 0:
        raise InvalidInputError("rho must be positive")
    stats = local.cubes[cube_id]
    bound = estimate.epsilon**estimate.d * estimate.rhs / rho**2
    if bound > 0:
        ratio = stats.variance / bound
    else:
        ratio = 0.0 if stats.variance == 0 else float("inf")
    return BridgeReport(
        variance=stats.variance,
        variance_se=stats.variance_se,
        bound=bound,
        ratio=ratio,
        cube_id=cube_id,
        rho=float(rho),
    )


def gamma_bridge_run(
    coef_map: CoefficientMap,
    cov: CovarianceSpec,
    u0: ManufacturedSolution,
    part: CubePartition,
    M: int,
    master_seed: int = 0,
    b_bar: Optional[np.ndarray] = None,
    cube_id: Optional[int] = None,
    reference: Sequence[SpectralGapEstimate] = (),
    rhs_samples: Optional[int] = None,
    stride: Optional[int] = None,
    t: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    workers: Optional[int] = None,
    min_samples: int = 256,
    stream: int = 7,
) -> Tuple[BridgeReport, SpectralGapEstimate]:
    """Localized Gamma variance of one cube against the spectral-gap bound of
    the same cube functional.

    Both sides are evaluated on the same parameter samples. ``rho`` is the
    smallest bound implied by the Gamma functional itself and the
    ``reference`` estimates. The cube defaults to the one carrying the most
    ``|grad u0|^2``.
    """
    grid = part.grid
    if b_bar is None:
        b_bar = np.zeros(grid.d)
    sampler = FieldSampler(cov, grid, master_seed, stream)
    F = GammaCubeFunctional(coef_map, u0, part, cube_id or 0, np.asarray(b_bar), tol)
    gammas = raise_first(
        JobManager(workers).run(
            lambda k: F.gamma(sampler(k)), list(range(M)), label="bridge-gamma"
        )
    )
    local = localized_variance_check(gammas, u0, part, cov.epsilon)
    if cube_id is None:
        cube_id = max(local.cubes, key=lambda c: c.grad_norm_sq).cube_id
        F.cube_id = cube_id
    estimate = spectral_gap_test(
        F,
        cov,
        grid,
        M,
        master_seed,
        rhs_samples=rhs_samples,
        stride=stride,
        t=t,
        workers=workers,
        min_samples=min_samples,
        stream=stream,
    )
    rho = common_rho([*reference, estimate])
    if rho is None and estimate.variance == 0 and estimate.rhs == 0:
        stats = local.cubes[cube_id]
        return (
            BridgeReport(stats.variance, stats.variance_se, 0.0, 0.0, cube_id=cube_id),
            estimate,
        )
    if rho is None:
        raise FunctionalEvaluationError(
            f"no functional resolved its variance on cube {cube_id}; rho unavailable"
        )
    report = gamma_variance_bridge(local, cube_id, estimate, rho)
    logger.info(
        "bridge cube %d: Var=%.4g, bound=%.4g, ratio=%.3f, rho=%.4g",
        cube_id,
        report.variance,
        report.bound,
        report.ratio,
        rho,
    )
    return report, estimate


__all__ = [
    "Functional",
    "Perturbation",
    "FunctionalEvaluationError",
    "CubeAverageFunctional",
    "GammaCubeFunctional",
    "SpectralGapEstimate",
    "BridgeReport",
    "perturbation_dictionary",
    "frechet_norm",
    "sensitivity_integral",
    "spectral_gap_test",
    "default_functional_dictionary",
    "common_rho",
    "linear_functional_variance",
    "gamma_variance_bridge",
    "gamma_bridge_run",
]
