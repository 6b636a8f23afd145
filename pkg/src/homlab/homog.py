from __future__ import annotations
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._errors import HomlabError, InvalidInputError, RunRejectedError
from ._logging import get_module_logger
from .calculus import DEFAULT_TOL, ScalarField, cell_average
from .corrector import INFINITE_T, CorrectorSet, solve_correctors
from .field import CoefficientSet, CoefficientSource, GridSpec
from .jobs import JobManager
from .manufactured import ManufacturedSolution

logger = get_module_logger("homog")

MAX_EXCLUDED_FRACTION = 0.1


def voigt_reuss_bounds(coef: CoefficientSet) -> Tuple[np.ndarray, np.ndarray]:
    """Per-axis harmonic and arithmetic means of ``a`` over the faces."""
    d = coef.grid.d
    harmonic = np.array([1.0 / np.mean(1.0 / coef.a[j]) for j in range(d)])
    arithmetic = np.array([np.mean(coef.a[j]) for j in range(d)])
    return harmonic, arithmetic


def drift_average(coef: CoefficientSet, cs: CorrectorSet) -> np.ndarray:
    """Spatial mean of ``b . (e_i + grad phi_i)`` per direction ``i``."""
    return np.array(
        [float(np.mean(_drift_flux(coef, cs, i))) for i in range(coef.grid.d)]
    )


def _drift_flux(coef: CoefficientSet, cs: CorrectorSet, i: int) -> np.ndarray:
    avg = cell_average(cs.grad_phi[i])
    return sum(coef.b[j] * ((i == j) + avg[j]) for j in range(coef.grid.d))


@dataclass
class SampleEstimate:
    index: int
    seed: Optional[int]
    a_bar: np.ndarray
    b_bar: np.ndarray
    harmonic: np.ndarray
    arithmetic: np.ndarray
    iterations: Tuple[int, ...]
    residuals: Tuple[float, ...]
    correctors: Optional[CorrectorSet] = None

    def to_row(self) -> dict:
        d = self.b_bar.size
        row = {"sample": self.index, "seed": self.seed}
        for j in range(d):
            for i in range(d):
                row[f"a_{j + 1}{i + 1}"] = float(self.a_bar[j, i])
        for i in range(d):
            row[f"b_{i + 1}"] = float(self.b_bar[i])
        row["iterations"] = int(sum(self.iterations))
        return row


@dataclass
class HomogenizedCoefficients:
    a_bar: np.ndarray
    b_bar: np.ndarray
    n_samples: int
    a_std_err: np.ndarray
    b_std_err: np.ndarray
    excluded: int = 0
    samples: List[SampleEstimate] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.b_bar.size

    @property
    def asymmetry(self) -> float:
        return float(np.abs(self.a_bar - self.a_bar.T).max())

    def symmetric_spectrum(self) -> np.ndarray:
        return np.linalg.eigvalsh(0.5 * (self.a_bar + self.a_bar.T))

    def to_record(self) -> dict:
        return {
            "a_bar": self.a_bar.tolist(),
            "b_bar": self.b_bar.tolist(),
            "a_std_err": self.a_std_err.tolist(),
            "b_std_err": self.b_std_err.tolist(),
            "M": self.n_samples,
            "excluded": self.excluded,
            "asymmetry": self.asymmetry,
        }

    @classmethod
    def exact(cls, a_bar, b_bar) -> HomogenizedCoefficients:
        a_bar = np.atleast_2d(np.asarray(a_bar, dtype=float))
        b_bar = np.asarray(b_bar, dtype=float)
        return cls(a_bar, b_bar, 0, np.zeros_like(a_bar), np.zeros_like(b_bar))


def _estimate_sample(
    coef: CoefficientSet, index: int, T: float, tol: float, keep: bool
) -> SampleEstimate:
    cs = solve_correctors(coef, T, tol, with_sigma=False)
    harmonic, arithmetic = voigt_reuss_bounds(coef)
    return SampleEstimate(
        index=index,
        seed=coef.seed,
        a_bar=cs.a_bar_sample,
        b_bar=drift_average(coef, cs),
        harmonic=harmonic,
        arithmetic=arithmetic,
        iterations=cs.iterations,
        residuals=cs.residuals,
        correctors=cs if keep else None,
    )


def estimate_homogenized(
    source: CoefficientSource,
    M: int,
    T: float = INFINITE_T,
    tol: float = DEFAULT_TOL,
    workers: Optional[int] = None,
    keep_correctors: bool = False,
) -> HomogenizedCoefficients:
    """Space-then-ensemble average of ``a (e_i + grad phi_i)`` and ``b . (e_i + grad phi_i)``.

    Samples whose corrector solve fails are excluded and counted; the run is
    rejected when more than a tenth of them fail.
    """
    if M < 1:
        raise InvalidInputError("at least one sample is required")

    def _job(index: int) -> SampleEstimate:
        return _estimate_sample(source(index), index, T, tol, keep_correctors)

    outcomes = JobManager(workers).run(_job, list(range(M)), label="homogenize")
    samples: List[SampleEstimate] = []
    for index, outcome in enumerate(outcomes):
        if isinstance(outcome, HomlabError):
            logger.warning("sample %d excluded: %s", index, outcome)
        elif isinstance(outcome, BaseException):
            raise outcome
        else:
            samples.append(outcome)
    excluded = M - len(samples)
    if excluded > MAX_EXCLUDED_FRACTION * M or not samples:
        raise RunRejectedError(f"{excluded} of {M} samples failed, run rejected")

    a = np.stack([s.a_bar for s in samples])
    b = np.stack([s.b_bar for s in samples])
    n = len(samples)
    if n > 1:
        a_se = a.std(axis=0, ddof=1) / np.sqrt(n)
        b_se = b.std(axis=0, ddof=1) / np.sqrt(n)
    else:
        a_se, b_se = np.zeros_like(a[0]), np.zeros_like(b[0])
    result = HomogenizedCoefficients(
        a_bar=a.mean(axis=0),
        b_bar=b.mean(axis=0),
        n_samples=n,
        a_std_err=a_se,
        b_std_err=b_se,
        excluded=excluded,
        samples=samples,
    )
    logger.info(
        "homogenized over %d samples (%d excluded): a_bar diag=%s b_bar=%s",
        n,
        excluded,
        np.diag(result.a_bar).round(6).tolist(),
        result.b_bar.round(6).tolist(),
    )
    return result


@dataclass
class GammaField:
    grid: GridSpec
    gamma: np.ndarray
    seed: Optional[int]
    drift_bound: float
    grad_phi_max: float

    def component(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.gamma[i])

    def spatial_means(self) -> np.ndarray:
        return self.gamma.reshape(self.grid.d, -1).mean(axis=1)

    def contracted(self, grad_u0: np.ndarray) -> np.ndarray:
        """``sum_i Gamma_i d_i u0`` on cells."""
        return np.sum(self.gamma * grad_u0, axis=0)


def gamma_field(
    coef: CoefficientSet, cs: CorrectorSet, b_bar: np.ndarray
) -> GammaField:
    """``Gamma_i = b . (e_i + grad phi_i) - b_bar_i`` on cells."""
    b_bar = np.asarray(b_bar, dtype=float)
    d = coef.grid.d
    gamma = np.stack([_drift_flux(coef, cs, i) - b_bar[i] for i in range(d)])
    grad_max = max(
        float(np.abs(c).max()) for g in cs.grad_phi for c in g.components
    )
    return GammaField(
        grid=coef.grid,
        gamma=gamma,
        seed=cs.seed,
        drift_bound=coef.K,
        grad_phi_max=grad_max,
    )


@dataclass
class GammaBoundReport:
    ratios: List[float]
    mean_ratio: float
    bound: float
    mean_gamma_means: np.ndarray

    @property
    def holds(self) -> bool:
        return self.mean_ratio <= self.bound

    def to_record(self) -> dict:
        return {
            "ratios": self.ratios,
            "mean_ratio": self.mean_ratio,
            "bound": self.bound,
            "holds": self.holds,
            "mean_gamma_means": self.mean_gamma_means.tolist(),
        }


def gamma_l2_bound_check(
    gammas: Sequence[GammaField],
    u0: ManufacturedSolution,
    min_samples: int = 8,
) -> GammaBoundReport:
    """``|Gamma_i d_i u0|_{L2} / |grad u0|_{L2}`` per sample against ``2K (1 + max |grad phi|)``."""
    if len(gammas) < min_samples:
        raise InvalidInputError(f"at least {min_samples} samples are required")
    grid = gammas[0].grid
    grad_u0 = u0.sample_gradient(grid)
    denom = float(np.sqrt(np.sum(grad_u0**2)))
    ratios = []
    for g in gammas:
        num = float(np.sqrt(np.sum(g.contracted(grad_u0) ** 2)))
        ratios.append(num / denom if denom > 0 else 0.0)
    K = max(g.drift_bound for g in gammas)
    grad_max = max(g.grad_phi_max for g in gammas)
    return GammaBoundReport(
        ratios=ratios,
        mean_ratio=float(np.mean(ratios)),
        bound=2 * K * (1 + grad_max),
        mean_gamma_means=np.mean([g.spatial_means() for g in gammas], axis=0),
    )


__all__ = [
    "HomogenizedCoefficients",
    "SampleEstimate",
    "GammaField",
    "GammaBoundReport",
    "estimate_homogenized",
    "voigt_reuss_bounds",
    "drift_average",
    "gamma_field",
    "gamma_l2_bound_check",
]
