"""Two-scale expansion ``w = u0 + phi_i d_i u0`` and its residual splitting.

Discretely, ``A w - A_bar u0 - div R - r1 - r2`` is assembled with the same
operators used for solving. ``R`` lives on faces: ``phi`` is averaged onto
the face and ``sigma_jk`` is averaged along ``k`` back onto face ``j``.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from ._errors import InvalidInputError
from ._logging import get_module_logger
from .calculus import (
    DEFAULT_TOL,
    PERIODIC,
    ScalarField,
    VectorField,
    _apply,
    _div,
    apply_homogenized,
    face_norm,
    norm,
)
from .corrector import INFINITE_T, CorrectorSet, solve_correctors
from .field import CoefficientSet, CoefficientSource
from .fitting import SlopeFit, fit_slope
from .homog import GammaField, drift_average, gamma_field
from .jobs import JobManager, raise_first
from .manufactured import ManufacturedSolution

logger = get_module_logger("twoscale")


def two_scale_expansion(u0: ManufacturedSolution, cs: CorrectorSet) -> ScalarField:
    grid = cs.grid
    values = u0.sample(grid).values.copy()
    grad = u0.sample_gradient(grid)
    for i, phi in enumerate(cs.phi):
        values += phi.values * grad[i]
    return ScalarField(grid, values)


@dataclass
class ResidualSet:
    R: VectorField
    r1: ScalarField
    r2: ScalarField
    identity_residual: float
    norms: Dict[str, float] = field(default_factory=dict)

    @property
    def triangle_bounds_hold(self) -> bool:
        n = self.norms
        slack = 1e-12
        ok_R = n["R"] <= n["sigma_hess"] + n["lam"] * n["phi_hess_face"] + slack
        ok_r1 = n["r1"] <= n["K"] * n["phi_hess"] + n["Lambda"] * n["phi_grad"] + slack
        return bool(ok_R and ok_r1)

    def to_row(self) -> dict:
        return {
            "R": self.norms["R"],
            "r1": self.norms["r1"],
            "r2": self.norms["r2"],
            "identity_residual": self.identity_residual,
        }


def residuals(
    coef: CoefficientSet,
    cs: CorrectorSet,
    gamma: GammaField,
    u0: ManufacturedSolution,
    a_bar: np.ndarray,
    b_bar: np.ndarray,
) -> ResidualSet:
    grid = coef.grid
    d, h = grid.d, grid.h
    a_bar = np.asarray(a_bar, dtype=float)
    b_bar = np.asarray(b_bar, dtype=float)
    grad_cells = u0.sample_gradient(grid)
    hess_cells = u0.sample_hessian(grid)

    R_parts, sigma_parts, phi_face_parts = [], [], []
    for j in range(d):
        hess_face = u0.hessian(*grid.face_centers(j))
        sigma_term = np.zeros(grid.shape)
        phi_term = np.zeros(grid.shape)
        for i in range(d):
            phi_face = 0.5 * (cs.phi[i].values + np.roll(cs.phi[i].values, 1, axis=j))
            phi_term += phi_face * hess_face[j, i]
            for k in range(d):
                if k == j:
                    continue
                s = cs.sigma[i].component(j, k)
                sigma_term += 0.5 * (s + np.roll(s, -1, axis=k)) * hess_face[k, i]
        sigma_parts.append(sigma_term)
        phi_face_parts.append(phi_term)
        R_parts.append(sigma_term - coef.a[j] * phi_term)
    R = VectorField(grid, tuple(R_parts))

    phi_hess = np.stack(
        [
            sum(cs.phi[i].values * hess_cells[j, i] for i in range(d))
            for j in range(d)
        ]
    )
    phi_grad = sum(cs.phi[i].values * grad_cells[i] for i in range(d))
    r1 = np.sum(coef.b * phi_hess, axis=0) + coef.Lambda * phi_grad
    r2 = gamma.contracted(grad_cells)

    w = two_scale_expansion(u0, cs)
    u0_cells = u0.sample(grid)
    lhs = _apply(coef, w.values, PERIODIC)
    rhs = (
        apply_homogenized(a_bar, b_bar, coef.Lambda, u0_cells).values
        + _div(R_parts, h, True)
        + r1
        + r2
    )
    identity = norm(ScalarField(grid, lhs - rhs))

    vol = grid.cell_volume
    norms = {
        "R": face_norm(R),
        "r1": norm(ScalarField(grid, r1)),
        "r2": norm(ScalarField(grid, r2)),
        "sigma_hess": face_norm(VectorField(grid, tuple(sigma_parts))),
        "phi_hess_face": face_norm(VectorField(grid, tuple(phi_face_parts))),
        "phi_hess": float(np.sqrt(np.sum(phi_hess**2) * vol)),
        "phi_grad": norm(ScalarField(grid, phi_grad)),
        "lam": coef.lam,
        "K": coef.K,
        "Lambda": coef.Lambda,
    }
    return ResidualSet(
        R=R,
        r1=ScalarField(grid, r1),
        r2=ScalarField(grid, r2),
        identity_residual=identity,
        norms=norms,
    )


@dataclass
class CorrectorProductNorms:
    phi_hess: float
    phi_grad: float
    sigma_hess: float
    h1_norm: float

    def ratios(self, epsilon: float) -> Dict[str, float]:
        """Each norm squared over ``eps^2 |grad u0|_{H1}^2``."""
        scale = epsilon**2 * self.h1_norm**2
        return {
            "phi_hess": self.phi_hess**2 / scale,
            "phi_grad": self.phi_grad**2 / scale,
            "sigma_hess": self.sigma_hess**2 / scale,
        }


def corrector_product_norms(
    res: ResidualSet, u0: ManufacturedSolution
) -> CorrectorProductNorms:
    return CorrectorProductNorms(
        phi_hess=res.norms["phi_hess"],
        phi_grad=res.norms["phi_grad"],
        sigma_hess=res.norms["sigma_hess"],
        h1_norm=u0.gradient_h1_norm(res.r1.grid),
    )


def sample_residuals(
    coef: CoefficientSet,
    u0: ManufacturedSolution,
    T: float = INFINITE_T,
    tol: float = DEFAULT_TOL,
) -> ResidualSet:
    """Residuals of one realization against its own coefficient averages."""
    cs = solve_correctors(coef, T, tol)
    b_bar = drift_average(coef, cs)
    gamma = gamma_field(coef, cs, b_bar)
    return residuals(coef, cs, gamma, u0, cs.a_bar_used, b_bar)


@dataclass
class ScalingRow:
    epsilon: float
    sample: int
    R: float
    r1: float
    r2: float
    identity_residual: float


@dataclass
class ScalingReport:
    rows: List[ScalingRow]
    means: Dict[float, Dict[str, float]]
    slope_R_r1: Optional[SlopeFit]
    slope_r2: Optional[SlopeFit]
    exact_zero: bool = False

    def to_record(self) -> dict:
        return {
            "means": {str(k): v for k, v in self.means.items()},
            "slope_R_r1": self.slope_R_r1.to_record() if self.slope_R_r1 else None,
            "slope_r2": self.slope_r2.to_record() if self.slope_r2 else None,
            "exact_zero": self.exact_zero,
        }


def residual_scaling(
    sources: Mapping[float, CoefficientSource],
    u0: ManufacturedSolution,
    M: int,
    T: float = INFINITE_T,
    tol: float = DEFAULT_TOL,
    workers: Optional[int] = None,
    min_points: int = 3,
) -> ScalingReport:
    """ε-sweep of ``|R| + |r1|`` (expected slope 1) and ``|r2|`` (expected flat)."""
    if len(sources) < 2:
        raise InvalidInputError("a residual scaling needs at least two scales")
    jobs = [(eps, k) for eps in sorted(sources, reverse=True) for k in range(M)]

    def _job(job):
        eps, k = job
        res = sample_residuals(sources[eps](k), u0, T, tol)
        return ScalingRow(
            epsilon=float(eps),
            sample=k,
            R=res.norms["R"],
            r1=res.norms["r1"],
            r2=res.norms["r2"],
            identity_residual=res.identity_residual,
        )

    rows: List[ScalingRow] = raise_first(
        JobManager(workers).run(_job, jobs, label="residuals")
    )
    means: Dict[float, Dict[str, float]] = {}
    for eps in sorted(sources, reverse=True):
        sel = [r for r in rows if r.epsilon == float(eps)]
        means[float(eps)] = {
            "R_r1": float(np.mean([r.R + r.r1 for r in sel])),
            "r2": float(np.mean([r.r2 for r in sel])),
            "identity_residual": float(np.mean([r.identity_residual for r in sel])),
        }
    scale = max(abs(m["R_r1"]) + abs(m["r2"]) for m in means.values())
    if scale <= 1e-12:
        return ScalingReport(rows, means, None, None, exact_zero=True)
    slope_main = fit_slope(
        [(e, m["R_r1"]) for e, m in means.items()], min_points=min_points
    )
    slope_r2 = (
        fit_slope([(e, m["r2"]) for e, m in means.items()], min_points=min_points)
        if all(m["r2"] > 0 for m in means.values())
        else None
    )
    return ScalingReport(rows, means, slope_main, slope_r2)


__all__ = [
    "ResidualSet",
    "ScalingRow",
    "ScalingReport",
    "CorrectorProductNorms",
    "two_scale_expansion",
    "residuals",
    "sample_residuals",
    "corrector_product_norms",
    "residual_scaling",
]
