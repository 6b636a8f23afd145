"""Correctors, fluxes and flux correctors on the periodic grid.

Staggering: ``phi_i`` on cells, ``grad phi_i`` and the flux ``q_i`` on faces,
``sigma_i[j, k]`` on the edges shifted by half a cell along ``j`` and ``k``.
With this layout ``sum_k D_k^+ sigma_ijk = q_ij - <q_ij>`` holds exactly
whenever ``div q_i = 0``.
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse.linalg import LinearOperator

from ._errors import InvalidInputError, WarningRecord
from ._logging import get_module_logger
from .calculus import (
    DEFAULT_TOL,
    PERIODIC,
    ScalarField,
    SkewTensorField,
    VectorField,
    _apply,
    _div,
    _grad,
    _krylov,
    spectral_inverse,
)
from .field import CoefficientMap, CoefficientSet, GridSpec, ParameterField
from .fitting import SlopeFit, fit_slope
from .jobs import map_jobs

logger = get_module_logger("corrector")

INFINITE_T = float("inf")


def _backward(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (f - np.roll(f, 1, axis=axis)) / h


def _forward(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (np.roll(f, -1, axis=axis) - f) / h


@dataclass
class CorrectorSolve:
    phi: ScalarField
    grad_phi: VectorField
    iterations: int
    residual: float


def _require_periodic_t(T: float):
    if not T > 0:
        raise InvalidInputError(f"T must lie in (0, inf], got {T}")


def solve_corrector(
    coef: CoefficientSet,
    i: int,
    T: float = INFINITE_T,
    tol: float = DEFAULT_TOL,
) -> CorrectorSolve:
    """Solves ``-div(a (e_i + grad phi)) + phi / T = 0`` by preconditioned CG.

    For ``T = inf`` the iteration runs on mean-zero fields; the constant-
    coefficient Laplacian (spectral) preconditioner keeps iterates mean-zero.
    """
    _require_periodic_t(T)
    grid = coef.grid
    if not 0 <= i < grid.d:
        raise InvalidInputError(f"direction {i} outside 0..{grid.d - 1}")
    h = grid.h
    rhs = _forward(coef.a[i], i, h)
    mass = 0.0 if np.isinf(T) else 1.0 / T
    # the drift and zero-order terms of the full operator do not enter
    diffusion = CoefficientSet(grid, coef.a, np.zeros_like(coef.b), coef.lam, 0.0, mass)
    size = grid.size
    a_mean = float(coef.a.mean())

    def _matvec(x):
        y = _apply(diffusion, x.reshape(grid.shape), PERIODIC)
        if mass == 0:
            y = y - y.mean()
        return y.ravel()

    def _precond(x):
        return spectral_inverse(x.reshape(grid.shape), grid, mass, a_mean).ravel()

    op = LinearOperator((size, size), matvec=_matvec, dtype=float)
    pre = LinearOperator((size, size), matvec=_precond, dtype=float)
    x, iterations, history = _krylov(
        op,
        (rhs - rhs.mean() if mass == 0 else rhs).ravel(),
        method="cg",
        tol=tol,
        maxiter=50 * grid.n,
        precond=pre,
        label=f"corrector[{i}]",
    )
    phi = x.reshape(grid.shape)
    if mass == 0:
        phi = phi - phi.mean()
    return CorrectorSolve(
        phi=ScalarField(grid, phi),
        grad_phi=VectorField(grid, _grad(phi, h, PERIODIC)),
        iterations=iterations,
        residual=history[-1] if history else 0.0,
    )


def flux_average(coef: CoefficientSet, grad_phi: VectorField, i: int) -> np.ndarray:
    """Spatial mean of ``a (e_i + grad phi_i)``, component-wise."""
    return np.array(
        [
            float(np.mean(coef.a[j] * ((i == j) + grad_phi.components[j])))
            for j in range(coef.grid.d)
        ]
    )


def flux(
    coef: CoefficientSet,
    grad_phis: Sequence[VectorField],
    a_bar: np.ndarray,
) -> Tuple[VectorField, ...]:
    """``q_i = a (e_i + grad phi_i) - a_bar e_i`` on faces."""
    a_bar = np.asarray(a_bar, dtype=float)
    out = []
    for i, g in enumerate(grad_phis):
        out.append(
            VectorField(
                coef.grid,
                tuple(
                    coef.a[j] * ((i == j) + g.components[j]) - a_bar[j, i]
                    for j in range(coef.grid.d)
                ),
            )
        )
    return tuple(out)


@dataclass
class FluxCorrector:
    sigma: SkewTensorField
    removed_mean: np.ndarray


def solve_flux_corrector(q: VectorField, T: float = INFINITE_T) -> FluxCorrector:
    """Solves ``-Delta sigma_jk + sigma_jk / T = D_j q_k - D_k q_j`` spectrally.

    ``q`` is centered first; the removed mean is returned alongside.
    """
    _require_periodic_t(T)
    grid = q.grid
    h = grid.h
    means = q.axis_means()
    centered = [c - m for c, m in zip(q.components, means)]
    mass = 0.0 if np.isinf(T) else 1.0 / T
    pairs: Dict[Tuple[int, int], np.ndarray] = {}
    for j in range(grid.d):
        for k in range(j + 1, grid.d):
            rhs = _backward(centered[k], j, h) - _backward(centered[j], k, h)
            pairs[(j, k)] = spectral_inverse(rhs, grid, mass)
    return FluxCorrector(SkewTensorField(grid, pairs), means)


def sigma_divergence(sigma: SkewTensorField) -> Tuple[np.ndarray, ...]:
    grid = sigma.grid
    return tuple(
        sum(
            (_forward(sigma.component(j, k), k, grid.h) for k in range(grid.d) if k != j),
            np.zeros(grid.shape),
        )
        for j in range(grid.d)
    )


def divergence_identity_check(sigma: SkewTensorField, q: VectorField) -> float:
    """Max over faces of ``|sum_k D_k sigma_jk - (q_j - <q_j>)|``."""
    div_sigma = sigma_divergence(sigma)
    worst = 0.0
    for j, qj in enumerate(q.components):
        worst = max(worst, float(np.abs(div_sigma[j] - (qj - qj.mean())).max()))
    return worst


@dataclass(frozen=True)
class CorrectorSet:
    grid: GridSpec
    T: float
    phi: Tuple[ScalarField, ...]
    grad_phi: Tuple[VectorField, ...]
    q: Tuple[VectorField, ...]
    sigma: Tuple[SkewTensorField, ...]
    a_bar_sample: np.ndarray
    a_bar_used: np.ndarray
    flux_means: np.ndarray
    residuals: Tuple[float, ...]
    iterations: Tuple[int, ...]
    seed: Optional[int] = None
    warnings: Tuple[WarningRecord, ...] = ()

    @property
    def d(self) -> int:
        return self.grid.d

    def to_manifest(self) -> dict:
        return {
            "grid": self.grid.describe(),
            "T": None if np.isinf(self.T) else self.T,
            "seed": self.seed,
            "residuals": list(self.residuals),
            "iterations": list(self.iterations),
            "a_bar_sample": self.a_bar_sample.tolist(),
            "flux_means": self.flux_means.tolist(),
        }

    @classmethod
    def zeros(cls, coef: CoefficientSet, T: float = INFINITE_T) -> CorrectorSet:
        grid = coef.grid
        d = grid.d
        a_bar = np.diag([float(coef.a[j].mean()) for j in range(d)])
        return cls(
            grid=grid,
            T=T,
            phi=tuple(ScalarField(grid, np.zeros(grid.shape)) for _ in range(d)),
            grad_phi=tuple(
                VectorField(grid, tuple(np.zeros(grid.shape) for _ in range(d)))
                for _ in range(d)
            ),
            q=flux(
                coef,
                [
                    VectorField(grid, tuple(np.zeros(grid.shape) for _ in range(d)))
                    for _ in range(d)
                ],
                a_bar,
            ),
            sigma=tuple(SkewTensorField.zeros(grid) for _ in range(d)),
            a_bar_sample=a_bar,
            a_bar_used=a_bar,
            flux_means=np.zeros((d, d)),
            residuals=(0.0,) * d,
            iterations=(0,) * d,
            seed=coef.seed,
        )


def solve_correctors(
    coef: CoefficientSet,
    T: float = INFINITE_T,
    tol: float = DEFAULT_TOL,
    a_bar: Optional[np.ndarray] = None,
    with_sigma: bool = True,
    workers: int = 1,
) -> CorrectorSet:
    """All ``d`` correctors of one realization, their fluxes and flux correctors.

    Without ``a_bar`` the realization's own flux average is used, so the
    fluxes are exactly mean-free.
    """
    grid = coef.grid
    d = grid.d
    solves: List[CorrectorSolve] = map_jobs(
        lambda i: solve_corrector(coef, i, T, tol),
        list(range(d)),
        workers=workers,
        label="correctors",
    )
    grads = [s.grad_phi for s in solves]
    sample = np.stack([flux_average(coef, g, i) for i, g in enumerate(grads)], axis=1)
    used = sample if a_bar is None else np.asarray(a_bar, dtype=float)
    qs = flux(coef, grads, used)
    if with_sigma:
        fcs = [solve_flux_corrector(qi, T) for qi in qs]
        sigmas = tuple(fc.sigma for fc in fcs)
        means = np.stack([fc.removed_mean for fc in fcs])
    else:
        sigmas = tuple(SkewTensorField(grid) for _ in range(d))
        means = np.stack([qi.axis_means() for qi in qs])
    logger.debug(
        "correctors solved: iterations=%s residuals=%s",
        [s.iterations for s in solves],
        [s.residual for s in solves],
    )
    return CorrectorSet(
        grid=grid,
        T=T,
        phi=tuple(s.phi for s in solves),
        grad_phi=tuple(grads),
        q=qs,
        sigma=sigmas,
        a_bar_sample=sample,
        a_bar_used=used,
        flux_means=means,
        residuals=tuple(s.residual for s in solves),
        iterations=tuple(s.iterations for s in solves),
        seed=coef.seed,
        warnings=tuple(coef.warnings),
    )


def corrected_gradient_energy(
    coef: CoefficientSet, grad_phi: VectorField, i: int
) -> Tuple[float, float]:
    """``(<a (e_i + grad phi), e_i + grad phi>, |e_i + grad phi|^2)``, averaged."""
    energy, plain = 0.0, 0.0
    for j in range(coef.grid.d):
        g = (i == j) + grad_phi.components[j]
        energy += float(np.mean(coef.a[j] * g**2))
        plain += float(np.mean(g**2))
    return energy, plain


def parameter_derivative_ratio(
    param: ParameterField,
    coef_map: CoefficientMap,
    i: int,
    center: Sequence[float],
    radius: float,
    t: float = 1e-3,
    tol: float = DEFAULT_TOL,
) -> float:
    """``|grad d phi|^2 / |e_i + grad phi|^2_{B}`` for a unit bump of omega on the ball B.

    The derivative of the corrector along the bump is a central finite
    difference of two re-solves.
    """
    grid = param.grid
    cells = grid.ball_mask(center, radius).astype(float)
    faces = np.stack(
        [grid.ball_mask(center, radius, staggered_axis=j) for j in range(grid.d)]
    ).astype(float)
    if not faces.any():
        raise InvalidInputError("the perturbation ball contains no faces")
    base = solve_corrector(coef_map(param), i, tol=tol)
    plus = solve_corrector(coef_map(param.perturbed(cells, faces, t)), i, tol=tol)
    minus = solve_corrector(coef_map(param.perturbed(cells, faces, -t)), i, tol=tol)
    dphi = (plus.phi.values - minus.phi.values) / (2 * t)
    num = sum(float(np.sum(g**2)) for g in _grad(dphi, grid.h, PERIODIC))
    den = 0.0
    for j in range(grid.d):
        g = (i == j) + base.grad_phi.components[j]
        den += float(np.sum(faces[j] * g**2))
    return num / den


def sublinearity_trend(
    phi: ScalarField, radii: Sequence[float], center: Optional[Sequence[float]] = None
) -> List[Tuple[float, float]]:
    """``(R, avg_{B_R} |phi|^2 / R^2)`` for each radius."""
    grid = phi.grid
    center = center if center is not None else [grid.length / 2] * grid.d
    out = []
    for R in radii:
        mask = grid.ball_mask(center, R)
        if not mask.any():
            continue
        out.append((float(R), float(np.mean(phi.values[mask] ** 2)) / R**2))
    return out


def massive_convergence(
    coef: CoefficientSet, i: int, Ts: Sequence[float], tol: float = DEFAULT_TOL
) -> List[Tuple[float, float]]:
    """``(T, |phi^T - phi|_{L2})`` for the given regularization parameters."""
    ref = solve_corrector(coef, i, INFINITE_T, tol).phi.values
    vol = coef.grid.cell_volume
    out = []
    for T in Ts:
        phiT = solve_corrector(coef, i, T, tol).phi.values
        out.append((float(T), float(np.sqrt(np.sum((phiT - ref) ** 2) * vol))))
    return out


@dataclass
class MomentRow:
    epsilon: float
    n_samples: int
    phi2: float
    phi2_se: float
    phi_p: Optional[float]
    phi_p_se: Optional[float]
    sigma2: float
    sigma2_se: float
    grad2: float
    grad2_se: float


@dataclass
class MomentReport:
    rows: List[MomentRow]
    slopes: Dict[str, Optional[SlopeFit]] = field(default_factory=dict)
    derivative_ratio_mean: Optional[float] = None
    derivative_ratio_max: Optional[float] = None
    notes: List[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "rows": [r.__dict__ for r in self.rows],
            "slopes": {
                k: (v.to_record() if v is not None else None)
                for k, v in self.slopes.items()
            },
            "derivative_ratio_mean": self.derivative_ratio_mean,
            "derivative_ratio_max": self.derivative_ratio_max,
            "notes": self.notes,
        }


def _mean_se(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se


def _sample_moments(cs: CorrectorSet) -> Tuple[float, Optional[float], float, float]:
    d = cs.d
    phi2 = float(np.mean([np.mean(p.values**2) for p in cs.phi]))
    phi_p = (
        float(np.mean([np.mean(np.abs(p.values) ** (2 * d / (d - 2))) for p in cs.phi]))
        if d >= 3
        else None
    )
    sigma2 = float(np.mean([np.mean(s.squared_sum()) for s in cs.sigma]))
    grad2 = float(
        np.mean(
            [
                sum(np.mean(((i == j) + g.components[j]) ** 2) for j in range(d))
                for i, g in enumerate(cs.grad_phi)
            ]
        )
    )
    return phi2, phi_p, sigma2, grad2


def moment_diagnostics(
    samples: Mapping[float, Sequence[CorrectorSet]],
    derivative_ratios: Optional[Sequence[float]] = None,
    min_samples: int = 8,
) -> MomentReport:
    """Second moments of ``phi``, ``sigma`` and ``e + grad phi`` per scale, with
    their fitted scalings when at least two scales are present."""
    rows: List[MomentRow] = []
    for eps in sorted(samples, reverse=True):
        ens = samples[eps]
        if len(ens) < min_samples:
            raise InvalidInputError(
                f"eps={eps}: {len(ens)} samples, at least {min_samples} required"
            )
        moments = [_sample_moments(cs) for cs in ens]
        phi2 = _mean_se([m[0] for m in moments])
        phi_p = _mean_se([m[1] for m in moments]) if moments[0][1] is not None else (None, None)
        sigma2 = _mean_se([m[2] for m in moments])
        grad2 = _mean_se([m[3] for m in moments])
        rows.append(
            MomentRow(
                epsilon=float(eps),
                n_samples=len(ens),
                phi2=phi2[0],
                phi2_se=phi2[1],
                phi_p=phi_p[0],
                phi_p_se=phi_p[1],
                sigma2=sigma2[0],
                sigma2_se=sigma2[1],
                grad2=grad2[0],
                grad2_se=grad2[1],
            )
        )
    report = MomentReport(rows=rows)
    for name in ("phi2", "phi_p", "sigma2"):
        values = [(r.epsilon, getattr(r, name)) for r in rows]
        if any(v is None for _, v in values):
            continue
        if len(values) < 2:
            report.slopes[name] = None
            report.notes.append(f"{name}: a single scale, no slope")
        elif all(v == 0 for _, v in values):
            report.slopes[name] = None
            report.notes.append(f"{name}: identically zero")
        else:
            report.slopes[name] = fit_slope(values, min_points=2)
    if derivative_ratios:
        report.derivative_ratio_mean = float(np.mean(derivative_ratios))
        report.derivative_ratio_max = float(np.max(derivative_ratios))
    return report


__all__ = [
    "CorrectorSet",
    "CorrectorSolve",
    "FluxCorrector",
    "MomentReport",
    "MomentRow",
    "solve_corrector",
    "solve_correctors",
    "flux",
    "flux_average",
    "solve_flux_corrector",
    "sigma_divergence",
    "divergence_identity_check",
    "corrected_gradient_energy",
    "parameter_derivative_ratio",
    "sublinearity_trend",
    "massive_convergence",
    "moment_diagnostics",
    "INFINITE_T",
]
