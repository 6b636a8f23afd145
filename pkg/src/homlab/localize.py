"""Cube localization: partitions, Poincare constants and per-cube variances."""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._errors import InvalidInputError
from ._logging import get_module_logger
from .calculus import PERIODIC, ScalarField, _grad
from .field import (
    CovarianceSpec,
    GridSpec,
    squashed_covariance,
    synthesized_covariance,
)
from .homog import GammaField
from .manufactured import ManufacturedSolution

logger = get_module_logger("localize")


class IotaRejectedError(InvalidInputError):
    def __init__(self, message: str, minimal_n: int):
        super().__init__(message)
        self.minimal_n = minimal_n


@dataclass(frozen=True)
class CubePartition:
    grid: GridSpec
    iota: float

    def __post_init__(self):
        ratio = self.iota / self.grid.h
        m = int(round(ratio))
        if m < 1 or abs(ratio - m) > 1e-9 or self.grid.n % m:
            raise InvalidInputError(
                f"cube side {self.iota} is not a dyadic multiple of h={self.grid.h}"
            )

    @property
    def cells_per_side(self) -> int:
        return int(round(self.iota / self.grid.h))

    @property
    def cubes_per_side(self) -> int:
        return self.grid.n // self.cells_per_side

    @property
    def n_cubes(self) -> int:
        return self.cubes_per_side**self.grid.d

    def _blocked(self, values: np.ndarray) -> np.ndarray:
        nc, m = self.cubes_per_side, self.cells_per_side
        shape = []
        for _ in range(self.grid.d):
            shape += [nc, m]
        return values.reshape(shape)

    def block_sum(self, values: np.ndarray) -> np.ndarray:
        """Per-cube sums; the result has shape ``(cubes_per_side,) * d``."""
        return self._blocked(values).sum(axis=tuple(range(1, 2 * self.grid.d, 2)))

    def cube_index(self) -> np.ndarray:
        """Flat cube id of every cell."""
        ids = np.arange(self.n_cubes).reshape((self.cubes_per_side,) * self.grid.d)
        for axis in range(self.grid.d):
            ids = np.repeat(ids, self.cells_per_side, axis=axis)
        return ids

    def interior_face_mask(self, axis: int) -> np.ndarray:
        """Faces of ``axis`` strictly inside a cube."""
        m = np.arange(self.grid.n)
        inside = (m % self.cells_per_side) != 0
        shape = [1] * self.grid.d
        shape[axis] = self.grid.n
        return np.broadcast_to(inside.reshape(shape), self.grid.shape)


@dataclass(frozen=True)
class IotaChoice:
    ideal: float
    used: float
    epsilon: float

    def partition(self, grid: GridSpec) -> CubePartition:
        return CubePartition(grid, self.used)


def choose_iota(epsilon: float, d: int, grid: GridSpec) -> IotaChoice:
    """Rounds ``eps^{d/(d+2)}`` to the nearest ``L/2^k`` that is at least ``eps``.

    Raises :class:`IotaRejectedError` (carrying the smallest admissible ``n``)
    when the rounded side is below two cells. The grid is never allowed to
    pick the side: a coarser dyadic side that would fit is not substituted,
    so every run at a given epsilon localizes on the same cubes.
    """
    if not 0 < epsilon <= 1:
        raise InvalidInputError(f"epsilon must lie in (0, 1], got {epsilon}")
    L = grid.length
    ideal = epsilon ** (d / (d + 2))
    k = max(0, int(round(np.log2(L / ideal))))
    while k > 0 and L / 2**k < epsilon:
        k -= 1
    used = L / 2**k
    if used < 2 * grid.h:
        minimal = 2 ** int(np.ceil(np.log2(2 * L / used)))
        raise IotaRejectedError(
            f"cube side {used:g} is below 2h={2 * grid.h:g}; n >= {minimal} required",
            minimal,
        )
    return IotaChoice(ideal=ideal, used=used, epsilon=epsilon)


def cube_average(v: ScalarField, part: CubePartition) -> np.ndarray:
    if v.grid != part.grid:
        raise InvalidInputError("field and partition live on different grids")
    return part.block_sum(v.values) / part.cells_per_side**part.grid.d


POINCARE_SLACK = 10.0


def poincare_constant(d: int) -> float:
    """Payne-Weinberger constant ``diam / pi`` of the unit cube."""
    return np.sqrt(d) / np.pi


@dataclass
class PoincareReport:
    max_ratio: float
    bound: float
    skipped: int
    checked: int

    @property
    def holds(self) -> bool:
        return self.max_ratio <= self.bound


def poincare_check(v: ScalarField, part: CubePartition) -> PoincareReport:
    """Max over cubes of ``|v - (v)_cube| / (iota |grad v|)`` on the cube.

    Only faces interior to a cube enter the gradient. Cubes with a vanishing
    gradient are skipped and counted.
    """
    grid = part.grid
    means = cube_average(v, part)
    spread = v.values - np.take(means.ravel(), part.cube_index())
    num = part.block_sum(spread**2).ravel()
    den = np.zeros(part.n_cubes)
    for j, g in enumerate(_grad(v.values, grid.h, PERIODIC)):
        den += part.block_sum(np.where(part.interior_face_mask(j), g**2, 0.0)).ravel()
    scale = max(float(np.abs(v.values).max()), 1.0)
    active = den > (1e-24 * scale**2 / grid.h**2)
    ratios = np.sqrt(num[active] / den[active]) / part.iota if active.any() else []
    return PoincareReport(
        max_ratio=float(np.max(ratios)) if len(ratios) else 0.0,
        bound=poincare_constant(grid.d) * (1 + POINCARE_SLACK * grid.h / part.iota),
        skipped=int((~active).sum()),
        checked=int(active.sum()),
    )


@dataclass
class CubeStatistics:
    cube_id: int
    mean: float
    variance: float
    variance_se: float
    grad_norm_sq: float


@dataclass
class LocalizedVarianceReport:
    epsilon: float
    iota: float
    n_samples: int
    cubes: List[CubeStatistics]
    normalized_variance: float
    neighbor_correlation: Optional[float]

    def scaled(self, d: int) -> float:
        """Normalized variance divided by the predicted ``eps^d iota^{-2d}``."""
        return self.normalized_variance / (self.epsilon**d * self.iota ** (-2 * d))

    def to_rows(self, iota_ideal: Optional[float] = None) -> List[dict]:
        return [
            {
                "epsilon": self.epsilon,
                "iota_ideal": iota_ideal if iota_ideal is not None else self.iota,
                "iota_used": self.iota,
                "cube_id": c.cube_id,
                "mean": c.mean,
                "variance": c.variance,
            }
            for c in self.cubes
        ]


def _neighbor_correlation(averages: np.ndarray, part: CubePartition) -> Optional[float]:
    if part.cubes_per_side < 2:
        return None
    M = averages.shape[0]
    grid_avg = averages.reshape((M,) + (part.cubes_per_side,) * part.grid.d)
    shifted = np.roll(grid_avg, -1, axis=1)
    a = grid_avg.reshape(M, -1)
    b = shifted.reshape(M, -1)
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    denom = np.sqrt((a**2).sum(axis=0) * (b**2).sum(axis=0))
    valid = denom > 0
    if not valid.any():
        return None
    return float(np.mean((a * b).sum(axis=0)[valid] / denom[valid]))


def localized_variance_check(
    gammas: Sequence[GammaField],
    u0: ManufacturedSolution,
    part: CubePartition,
    epsilon: float,
    min_samples: int = 32,
) -> LocalizedVarianceReport:
    """Ensemble variance of ``avg_cube Gamma_i d_i u0`` for every cube."""
    if len(gammas) < min_samples:
        raise InvalidInputError(f"at least {min_samples} samples are required")
    if part.iota < epsilon * (1 - 1e-12):
        raise InvalidInputError(f"cube side {part.iota} below epsilon {epsilon}")
    grid = part.grid
    grad_u0 = u0.sample_gradient(grid)
    cells = part.cells_per_side**grid.d
    averages = np.stack(
        [part.block_sum(g.contracted(grad_u0)).ravel() / cells for g in gammas]
    )
    M = averages.shape[0]
    var = averages.var(axis=0, ddof=1)
    grad_sq = part.block_sum(np.sum(grad_u0**2, axis=0)).ravel() * grid.cell_volume
    cubes = [
        CubeStatistics(
            cube_id=c,
            mean=float(averages[:, c].mean()),
            variance=float(var[c]),
            variance_se=float(var[c] * np.sqrt(2.0 / (M - 1))),
            grad_norm_sq=float(grad_sq[c]),
        )
        for c in range(part.n_cubes)
    ]
    active = grad_sq > 1e-14 * max(grad_sq.max(), 1e-300)
    normalized = float(np.mean(var[active] / grad_sq[active])) if active.any() else 0.0
    return LocalizedVarianceReport(
        epsilon=float(epsilon),
        iota=part.iota,
        n_samples=M,
        cubes=cubes,
        normalized_variance=normalized,
        neighbor_correlation=_neighbor_correlation(averages, part),
    )


@dataclass
class LocalizedExponents:
    eps_exponent: Optional[float]
    iota_exponent: Optional[float]
    intercept: Optional[float]
    n_points: int


def fit_localized_exponents(
    points: Sequence[Tuple[float, float, float]],
) -> LocalizedExponents:
    """Least squares of ``log V`` on ``log eps`` and ``log iota``.

    An exponent is unavailable when its axis has fewer than two distinct values.
    """
    pts = [(e, i, v) for e, i, v in points if v > 0]
    if not pts:
        return LocalizedExponents(None, None, None, 0)
    eps = np.log([p[0] for p in pts])
    iota = np.log([p[1] for p in pts])
    y = np.log([p[2] for p in pts])
    use_eps = np.unique(eps).size >= 2
    use_iota = np.unique(iota).size >= 2
    columns = [np.ones_like(y)]
    if use_eps:
        columns.append(eps)
    if use_iota:
        columns.append(iota)
    if len(columns) == 1:
        return LocalizedExponents(None, None, float(y.mean()), len(pts))
    coeffs, *_ = np.linalg.lstsq(np.stack(columns, axis=1), y, rcond=None)
    idx = 1
    eps_exp = iota_exp = None
    if use_eps:
        eps_exp = float(coeffs[idx])
        idx += 1
    if use_iota:
        iota_exp = float(coeffs[idx])
    return LocalizedExponents(eps_exp, iota_exp, float(coeffs[0]), len(pts))


def cube_variance_oracle(
    cov: CovarianceSpec,
    K: float,
    drift_direction: Sequence[float],
    u0: ManufacturedSolution,
    part: CubePartition,
) -> np.ndarray:
    """Exact per-cube variance of ``avg_cube b . grad u0`` for ``b = K tanh(G) v``.

    Constant ``a`` makes the corrector vanish, so ``Gamma . grad u0`` reduces
    to this linear functional of the squashed field. The covariance of
    ``tanh(G)`` comes from Gauss-Hermite quadrature over the synthesized
    Gaussian covariance.
    """
    grid = part.grid
    v = np.zeros(grid.d)
    given = np.asarray(drift_direction, dtype=float)[: grid.d]
    v[: given.size] = given
    v = v / np.linalg.norm(v)
    c = synthesized_covariance(cov, grid)
    c_sq = squashed_covariance(c, variance=float(c.flat[0]))
    c_hat = np.fft.fftn(c_sq)
    weights = K * np.tensordot(v, u0.sample_gradient(grid), axes=1)
    cells = part.cells_per_side**grid.d
    ids = part.cube_index()
    out = np.empty(part.n_cubes)
    for cube in range(part.n_cubes):
        w = np.where(ids == cube, weights, 0.0)
        conv = np.fft.ifftn(c_hat * np.fft.fftn(w)).real
        out[cube] = float(np.sum(w * conv)) / cells**2
    return out


@dataclass
class BudgetReport:
    epsilon: float
    d: int
    costs: Dict[float, float] = field(default_factory=dict)
    best_dyadic: float = 0.0
    continuous_minimizer: float = 0.0
    balancing_scale: float = 0.0


def localization_budget(
    epsilon: float, d: int, iotas: Optional[Sequence[float]] = None, length: float = 1.0
) -> BudgetReport:
    """Error budget ``eps + iota + (eps / iota)^{d/2}`` over candidate cube sides."""
    if iotas is None:
        iotas = [length / 2**k for k in range(0, 12) if length / 2**k >= epsilon]
    costs = {
        float(i): epsilon + i + (epsilon / i) ** (d / 2) for i in iotas if i >= epsilon
    }
    if not costs:
        raise InvalidInputError("no candidate cube side is at least epsilon")
    return BudgetReport(
        epsilon=epsilon,
        d=d,
        costs=costs,
        best_dyadic=min(costs, key=costs.get),
        continuous_minimizer=(d / 2) ** (2 / (d + 2)) * epsilon ** (d / (d + 2)),
        balancing_scale=epsilon ** (d / (d + 2)),
    )


__all__ = [
    "CubePartition",
    "IotaChoice",
    "IotaRejectedError",
    "PoincareReport",
    "CubeStatistics",
    "LocalizedVarianceReport",
    "LocalizedExponents",
    "BudgetReport",
    "choose_iota",
    "cube_average",
    "poincare_constant",
    "poincare_check",
    "localized_variance_check",
    "fit_localized_exponents",
    "cube_variance_oracle",
    "localization_budget",
]
