"""End-to-end rate studies: sample, solve the heterogeneous problem, compare
with the manufactured homogenized solution and fit the decay in epsilon."""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np

from ._errors import (
    AcceptanceError,
    InvalidInputError,
    ResolutionWarning,
    RunRejectedError,
    WarningRecord,
    warning_record,
)
from ._logging import get_module_logger
from .calculus import (
    DEFAULT_TOL,
    PERIODIC,
    ScalarField,
    apply_homogenized,
    norm,
    solve,
    sobolev_exponent,
)
from .config import AcceptanceConfig, HomlabConfig
from .field import (
    CoefficientSampler,
    CoefficientSet,
    FieldSampler,
    GridSpec,
    derive_seed,
)
from .fitting import SlopeFit, fit_slope
from .homog import HomogenizedCoefficients, estimate_homogenized
from .jobs import JobManager, raise_first
from .manufactured import Bump, ManufacturedSolution

logger = get_module_logger("experiments")

RateSetting = Literal["fullspace-proxy", "bounded"]

HOMOG_STREAM = 1
RATE_STREAM = 2
CELLS_PER_EPSILON = 8
TRUNCATION_LIMIT = 0.1


def resolution(
    epsilon: float, length: float, n_max: int
) -> Tuple[int, List[WarningRecord]]:
    """Smallest power of two with ``h <= eps / 8``, capped at ``n_max``."""
    target = CELLS_PER_EPSILON * length / epsilon
    n = 8
    while n < target * (1 - 1e-12):
        n *= 2
    records: List[WarningRecord] = []
    if n > n_max:
        records.append(
            warning_record(
                "experiments.resolution",
                f"eps={epsilon:g} needs n={n}, capped at n={n_max}",
                n_max,
                ResolutionWarning,
            )
        )
        n = n_max
    return n, records


def theoretical_exponent(setting: RateSetting, d: int) -> float:
    if setting == "fullspace-proxy":
        return d / (d + 2)
    return 0.5


@dataclass
class SampleError:
    error: float
    l2_error: float
    norm: str
    iterations: int


def sample_error(
    coef: CoefficientSet,
    u0: ManufacturedSolution,
    a_bar: np.ndarray,
    b_bar: np.ndarray,
    setting: RateSetting,
    tol: float = DEFAULT_TOL,
) -> SampleError:
    """Error of ``u_eps`` against ``u0`` for one realization.

    The right-hand side is the homogenized operator applied to ``u0``; the
    torus carries periodic conditions, the bounded cube Dirichlet data ``u0``.
    """
    grid = coef.grid
    u0_cells = u0.sample(grid)
    bc = PERIODIC if setting == "fullspace-proxy" else u0.dirichlet(grid)
    f = apply_homogenized(a_bar, b_bar, coef.Lambda, u0_cells, bc)
    result = solve(coef, f, bc, tol)
    diff = ScalarField(grid, result.u.values - u0_cells.values)
    if setting == "fullspace-proxy":
        err, label = norm(diff, "sobolev"), f"L{sobolev_exponent(grid.d):g}"
    else:
        err, label = norm(diff, 2), "L2"
    return SampleError(
        error=err, l2_error=norm(diff, 2), norm=label, iterations=result.iterations
    )


def tile_coefficients(coef: CoefficientSet, reps: int = 2) -> CoefficientSet:
    """The same realization repeated ``reps`` times per axis on a larger torus."""
    grid = coef.grid
    big = GridSpec(grid.d, grid.n * reps, grid.length * reps)
    tiling = (1,) + (reps,) * grid.d
    return CoefficientSet(
        grid=big,
        a=np.tile(coef.a, tiling),
        b=np.tile(coef.b, tiling),
        lam=coef.lam,
        K=coef.K,
        Lambda=coef.Lambda,
        seed=coef.seed,
    )


@dataclass
class TruncationReport:
    epsilon: float
    error: float
    doubled_error: float

    @property
    def ratio(self) -> float:
        if self.error == 0:
            return 0.0
        return abs(self.doubled_error - self.error) / self.error

    @property
    def holds(self) -> bool:
        return self.ratio < TRUNCATION_LIMIT

    def to_record(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "error": self.error,
            "doubled_error": self.doubled_error,
            "ratio": self.ratio,
        }


def truncation_sensitivity(
    coef: CoefficientSet,
    u0: ManufacturedSolution,
    a_bar: np.ndarray,
    b_bar: np.ndarray,
    epsilon: float,
    tol: float = DEFAULT_TOL,
) -> TruncationReport:
    """Torus error against the error on the doubled torus tiled with the same
    realization; the bump keeps its position."""
    base = sample_error(coef, u0, a_bar, b_bar, "fullspace-proxy", tol)
    doubled = sample_error(
        tile_coefficients(coef), u0, a_bar, b_bar, "fullspace-proxy", tol
    )
    report = TruncationReport(epsilon, base.error, doubled.error)
    logger.info("truncation at eps=%g: relative change %.3g", epsilon, report.ratio)
    return report


@dataclass
class RateRow:
    epsilon: float
    n: int
    mean_error: float
    std_err: float
    norm: str
    errors: List[float]
    l2_errors: List[float]
    iterations: List[int]
    a_bar: List[List[float]]
    b_bar: List[float]

    def to_record(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "n": self.n,
            "mean_error": self.mean_error,
            "std_err": self.std_err,
            "norm": self.norm,
            "a_bar": self.a_bar,
            "b_bar": self.b_bar,
        }


@dataclass
class RateReport:
    setting: RateSetting
    d: int
    length: float
    epsilons: List[float]
    rows: List[RateRow]
    slope: Optional[SlopeFit]
    theoretical_exponent: float
    theorem_regime: bool
    truncation: Optional[TruncationReport] = None
    warnings: List[WarningRecord] = field(default_factory=list)

    @property
    def means(self) -> List[float]:
        return [r.mean_error for r in self.rows]

    @property
    def monotone(self) -> bool:
        m = self.means
        return all(a > b for a, b in zip(m, m[1:]))

    @property
    def norm_consistent(self) -> bool:
        """Hoelder on the domain: ``|e|_2 <= |Omega|^{1/2 - 1/p} |e|_p`` per sample."""
        if self.setting != "fullspace-proxy":
            return True
        p = sobolev_exponent(self.d)
        factor = (self.length**self.d) ** (0.5 - 1.0 / p)
        return all(
            l2 <= factor * e * (1 + 1e-9)
            for row in self.rows
            for l2, e in zip(row.l2_errors, row.errors)
        )

    def csv_rows(self) -> List[dict]:
        return [
            {
                "epsilon": row.epsilon,
                "sample": k,
                "error": err,
                "norm": row.norm,
                "iterations": it,
            }
            for row in self.rows
            for k, (err, it) in enumerate(zip(row.errors, row.iterations))
        ]

    def to_record(self) -> dict:
        return {
            "setting": self.setting,
            "d": self.d,
            "epsilons": self.epsilons,
            "rows": [r.to_record() for r in self.rows],
            "slope": self.slope.to_record() if self.slope else None,
            "theoretical_exponent": self.theoretical_exponent,
            "theorem_regime": self.theorem_regime,
            "monotone": self.monotone,
            "norm_consistent": self.norm_consistent,
            "truncation": self.truncation.to_record() if self.truncation else None,
            "warnings": list(self.warnings),
        }


def homogenized_for(
    config: HomlabConfig, epsilon: float, eps_index: int, grid: GridSpec
) -> HomogenizedCoefficients:
    """One estimate of ``a_bar, b_bar`` per epsilon, shared by all rate samples."""
    master = derive_seed(config.seed, eps_index)
    source = CoefficientSampler(
        FieldSampler(config.covariance(epsilon), grid, master, HOMOG_STREAM),
        config.coefficient_map(),
    )
    return estimate_homogenized(
        source, config.M_homog, config.T, config.tol, config.workers
    )


def _check_setting(config: HomlabConfig, setting: RateSetting, u0: ManufacturedSolution):
    if setting == "fullspace-proxy":
        if config.d != 3:
            raise InvalidInputError("the full-space proxy runs in d = 3 only")
        if not isinstance(u0, Bump):
            raise InvalidInputError("the full-space proxy needs a compactly supported bump")
        if u0.support_diameter > config.L / 2 + 1e-12:
            raise InvalidInputError(
                f"bump support diameter {u0.support_diameter:g} exceeds L/2 = {config.L / 2:g}"
            )


def _run_rate(config: HomlabConfig, setting: RateSetting) -> RateReport:
    u0 = config.profile()
    _check_setting(config, setting, u0)
    records: List[WarningRecord] = []
    theorem_regime = config.d == 3
    if not theorem_regime:
        records.append(
            warning_record(
                "experiments.rate",
                f"d={config.d} lies outside the theorem regime d >= 3",
                config.d,
                emit=False,
            )
        )
        logger.warning("d=%d rate run is flagged as non-theorem", config.d)

    coef_map = config.coefficient_map()
    manager = JobManager(config.workers)
    rows: List[RateRow] = []
    truncation: Optional[TruncationReport] = None
    for eps_index, epsilon in enumerate(config.epsilons):
        n, res_records = resolution(epsilon, config.L, config.n)
        records.extend(res_records)
        grid = config.grid(n)
        homog = homogenized_for(config, epsilon, eps_index, grid)
        sampler = CoefficientSampler(
            FieldSampler(
                config.covariance(epsilon),
                grid,
                derive_seed(config.seed, eps_index),
                RATE_STREAM,
            ),
            coef_map,
        )

        def _job(k: int, sampler=sampler, homog=homog) -> SampleError:
            return sample_error(
                sampler(k), u0, homog.a_bar, homog.b_bar, setting, config.tol
            )

        samples: List[SampleError] = raise_first(
            manager.run(_job, list(range(config.M)), label=f"rate-eps{eps_index}")
        )
        errors = [s.error for s in samples]
        rows.append(
            RateRow(
                epsilon=float(epsilon),
                n=n,
                mean_error=float(np.mean(errors)),
                std_err=float(np.std(errors, ddof=1) / np.sqrt(len(errors)))
                if len(errors) > 1
                else 0.0,
                norm=samples[0].norm,
                errors=errors,
                l2_errors=[s.l2_error for s in samples],
                iterations=[s.iterations for s in samples],
                a_bar=homog.a_bar.tolist(),
                b_bar=homog.b_bar.tolist(),
            )
        )
        logger.info(
            "%s eps=%g n=%d: mean error %.4g +- %.2g",
            setting,
            epsilon,
            n,
            rows[-1].mean_error,
            rows[-1].std_err,
        )
        if setting == "fullspace-proxy" and eps_index == 0 and config.truncation_check:
            truncation = truncation_sensitivity(
                sampler(0), u0, homog.a_bar, homog.b_bar, epsilon, config.tol
            )

    slope: Optional[SlopeFit] = None
    points = [(r.epsilon, r.mean_error) for r in rows]
    if len(points) >= 3 and all(e > 0 for _, e in points):
        try:
            slope = fit_slope(points)
        except RunRejectedError as exc:
            records.append(warning_record("experiments.fit_slope", str(exc), emit=False))
    else:
        records.append(
            warning_record(
                "experiments.fit_slope",
                "slope unavailable: fewer than three positive errors",
                len(points),
                emit=False,
            )
        )
    return RateReport(
        setting=setting,
        d=config.d,
        length=config.L,
        epsilons=[float(e) for e in config.epsilons],
        rows=rows,
        slope=slope,
        theoretical_exponent=theoretical_exponent(setting, config.d),
        theorem_regime=theorem_regime,
        truncation=truncation,
        warnings=records,
    )


def run_fullspace_proxy(config: HomlabConfig) -> RateReport:
    return _run_rate(config, "fullspace-proxy")


def run_bounded(config: HomlabConfig) -> RateReport:
    return _run_rate(config, "bounded")


def run_rate(config: HomlabConfig) -> RateReport:
    if config.setting == "fullspace-proxy":
        return run_fullspace_proxy(config)
    return run_bounded(config)


def evaluate_acceptance(
    report: RateReport, acceptance: AcceptanceConfig
) -> List[AcceptanceError]:
    """Failed criteria of ``acceptance``; thresholds left unset are skipped."""
    failures: List[AcceptanceError] = []
    slope = report.slope.slope if report.slope else None
    if acceptance.min_slope is not None:
        if slope is None:
            failures.append(AcceptanceError("min_slope", "slope unavailable"))
        elif slope < acceptance.min_slope:
            failures.append(
                AcceptanceError(
                    "min_slope", f"slope {slope:.3f} < {acceptance.min_slope}"
                )
            )
    if acceptance.max_slope is not None:
        if slope is None:
            failures.append(AcceptanceError("max_slope", "slope unavailable"))
        elif slope > acceptance.max_slope:
            failures.append(
                AcceptanceError(
                    "max_slope", f"slope {slope:.3f} > {acceptance.max_slope}"
                )
            )
    if acceptance.monotone and not report.monotone:
        failures.append(
            AcceptanceError("monotone", f"mean errors {report.means} not decreasing")
        )
    if acceptance.norm_consistency and not report.norm_consistent:
        failures.append(
            AcceptanceError("norm_consistency", "L2 error exceeds the Hoelder bound")
        )
    if acceptance.max_truncation_ratio is not None:
        if report.truncation is None:
            failures.append(
                AcceptanceError("max_truncation_ratio", "no truncation check was run")
            )
        elif report.truncation.ratio > acceptance.max_truncation_ratio:
            failures.append(
                AcceptanceError(
                    "max_truncation_ratio",
                    f"relative change {report.truncation.ratio:.3g} > "
                    f"{acceptance.max_truncation_ratio}",
                )
            )
    for failure in failures:
        logger.warning("acceptance failed: %s", failure)
    return failures


def check_acceptance(report: RateReport, acceptance: AcceptanceConfig) -> None:
    failures = evaluate_acceptance(report, acceptance)
    if failures:
        raise failures[0]


__all__ = [
    "RateRow",
    "RateReport",
    "SampleError",
    "TruncationReport",
    "resolution",
    "theoretical_exponent",
    "sample_error",
    "tile_coefficients",
    "truncation_sensitivity",
    "homogenized_for",
    "run_fullspace_proxy",
    "run_bounded",
    "run_rate",
    "fit_slope",
    "evaluate_acceptance",
    "check_acceptance",
]
