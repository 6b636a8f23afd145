"""Staggered finite-volume calculus and Krylov solvers.

Scalars live on cells. The gradient component ``j`` lives on the faces normal
to axis ``j``; face ``m`` is the lower face of cell ``m`` (``x_j = m h``).
Periodic grids carry ``n`` faces per axis, Dirichlet grids ``n + 1`` (the
faces at ``x_j = 0`` and ``x_j = L`` included).
"""

from __future__ import annotations
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse.linalg import LinearOperator, bicgstab, cg

from ._errors import (
    InvalidInputError,
    NonConvergenceError,
    PecletWarning,
    WarningRecord,
    warning_record,
)
from ._logging import get_module_logger
from .field import CoefficientSet, GridSpec

logger = get_module_logger("calculus")

DEFAULT_TOL = 1e-10
MAX_RESTARTS = 3


@dataclass
class ScalarField:
    grid: GridSpec
    values: np.ndarray
    warnings: List[WarningRecord] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise InvalidInputError(
                f"scalar field shape {self.values.shape} != grid {self.grid.shape}"
            )

    def mean(self) -> float:
        return float(self.values.mean())

    def integral(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)


@dataclass
class VectorField:
    grid: GridSpec
    components: Tuple[np.ndarray, ...]
    periodic: bool = True

    def __post_init__(self):
        self.components = tuple(np.asarray(c, dtype=float) for c in self.components)
        if len(self.components) != self.grid.d:
            raise InvalidInputError("one component per axis is required")

    @classmethod
    def from_stacked(cls, grid: GridSpec, stacked: np.ndarray) -> VectorField:
        return cls(grid, tuple(stacked[j] for j in range(grid.d)), True)

    def stacked(self) -> np.ndarray:
        if not self.periodic:
            raise InvalidInputError("dirichlet face fields have ragged shapes")
        return np.stack(self.components)

    def axis_means(self) -> np.ndarray:
        return np.array([c.mean() for c in self.components])


@dataclass
class SkewTensorField:
    """Skew tensor stored once per pair ``j < k``; ``(j, k)`` sits on the
    edge offset by half a cell in both axes."""

    grid: GridSpec
    pairs: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)

    def component(self, j: int, k: int) -> np.ndarray:
        if j == k:
            return np.zeros(self.grid.shape)
        if j < k:
            return self.pairs.get((j, k), np.zeros(self.grid.shape))
        return -self.pairs.get((k, j), np.zeros(self.grid.shape))

    def squared_sum(self) -> np.ndarray:
        """Pointwise sum over all ordered pairs of the squared components."""
        total = np.zeros(self.grid.shape)
        for v in self.pairs.values():
            total = total + 2.0 * v**2
        return total

    @classmethod
    def zeros(cls, grid: GridSpec) -> SkewTensorField:
        return cls(
            grid,
            {
                (j, k): np.zeros(grid.shape)
                for j in range(grid.d)
                for k in range(j + 1, grid.d)
            },
        )


BoundaryKind = Literal["periodic", "dirichlet"]


@dataclass(frozen=True)
class BoundaryCondition:
    """Periodic wrap or Dirichlet data on the boundary faces.

    ``lower[j]`` and ``upper[j]`` hold the data on ``x_j = 0`` and ``x_j = L``
    with axis ``j`` kept as a length-one axis.
    """

    kind: BoundaryKind = "periodic"
    lower: Tuple[np.ndarray, ...] = ()
    upper: Tuple[np.ndarray, ...] = ()

    @property
    def periodic(self) -> bool:
        return self.kind == "periodic"

    @classmethod
    def dirichlet(
        cls, grid: GridSpec, data: Union[float, Callable[..., np.ndarray]] = 0.0
    ) -> BoundaryCondition:
        lower, upper = [], []
        for j in range(grid.d):
            coords = grid.face_centers(j, boundary=True)
            if callable(data):
                values = np.broadcast_to(
                    np.asarray(data(*coords), dtype=float), coords[0].shape
                )
            else:
                values = np.full(coords[0].shape, float(data))
            if not np.all(np.isfinite(values)):
                raise InvalidInputError("dirichlet data must be finite")
            lower.append(np.take(values, [0], axis=j))
            upper.append(np.take(values, [grid.n], axis=j))
        return cls("dirichlet", tuple(lower), tuple(upper))

    def homogeneous(self) -> BoundaryCondition:
        if self.periodic:
            return self
        return BoundaryCondition(
            "dirichlet",
            tuple(np.zeros_like(x) for x in self.lower),
            tuple(np.zeros_like(x) for x in self.upper),
        )


PERIODIC = BoundaryCondition()


def _grad(u: np.ndarray, h: float, bc: BoundaryCondition) -> Tuple[np.ndarray, ...]:
    out = []
    for j in range(u.ndim):
        if bc.periodic:
            out.append((u - np.roll(u, 1, axis=j)) / h)
        else:
            lo = (np.take(u, [0], axis=j) - bc.lower[j]) / (h / 2)
            hi = (bc.upper[j] - np.take(u, [u.shape[j] - 1], axis=j)) / (h / 2)
            out.append(np.concatenate([lo, np.diff(u, axis=j) / h, hi], axis=j))
    return tuple(out)


def _div(F: Sequence[np.ndarray], h: float, periodic: bool) -> np.ndarray:
    total = None
    for j, Fj in enumerate(F):
        if periodic:
            term = (np.roll(Fj, -1, axis=j) - Fj) / h
        else:
            term = np.diff(Fj, axis=j) / h
        total = term if total is None else total + term
    return total


def _face_to_cell(F: Sequence[np.ndarray], periodic: bool) -> Tuple[np.ndarray, ...]:
    out = []
    for j, Fj in enumerate(F):
        if periodic:
            out.append(0.5 * (Fj + np.roll(Fj, -1, axis=j)))
        else:
            n = Fj.shape[j] - 1
            out.append(
                0.5
                * (
                    np.take(Fj, np.arange(n), axis=j)
                    + np.take(Fj, np.arange(1, n + 1), axis=j)
                )
            )
    return tuple(out)


def face_coefficients(
    coef: CoefficientSet, bc: BoundaryCondition
) -> Tuple[np.ndarray, ...]:
    """Per-axis face values of ``a``; dirichlet grids repeat the wrap face at x_j = L."""
    if bc.periodic:
        return tuple(coef.a[j] for j in range(coef.grid.d))
    return tuple(
        np.concatenate([coef.a[j], np.take(coef.a[j], [0], axis=j)], axis=j)
        for j in range(coef.grid.d)
    )


def gradient(u: ScalarField, bc: BoundaryCondition = PERIODIC) -> VectorField:
    return VectorField(u.grid, _grad(u.values, u.grid.h, bc), bc.periodic)


def divergence(F: VectorField) -> ScalarField:
    return ScalarField(F.grid, _div(F.components, F.grid.h, F.periodic))


def cell_average(F: VectorField) -> Tuple[np.ndarray, ...]:
    """Centered face-to-cell average of every component."""
    return _face_to_cell(F.components, F.periodic)


def peclet_number(coef: CoefficientSet) -> float:
    return coef.grid.h * coef.K / (2 * coef.a_min)


def _peclet_records(coef: CoefficientSet, source: str) -> List[WarningRecord]:
    pe = peclet_number(coef)
    if pe >= 1:
        return [
            warning_record(
                source,
                f"grid Peclet number {pe:.3g} >= 1, monotonicity not guaranteed",
                pe,
                PecletWarning,
            )
        ]
    return []


def _apply(
    coef: CoefficientSet, u: np.ndarray, bc: BoundaryCondition
) -> np.ndarray:
    h = coef.grid.h
    g = _grad(u, h, bc)
    a = face_coefficients(coef, bc)
    out = -_div([aj * gj for aj, gj in zip(a, g)], h, bc.periodic)
    if coef.has_drift:
        for j, avg in enumerate(_face_to_cell(g, bc.periodic)):
            out = out + coef.b[j] * avg
    return out + coef.Lambda * u


def apply_operator(
    coef: CoefficientSet, u: ScalarField, bc: BoundaryCondition = PERIODIC
) -> ScalarField:
    """``-div(a grad u) + b . avg(grad u) + Lambda u`` on cells.

    A grid Peclet number ``>= 1`` is attached to the result as a warning record.
    """
    if u.grid != coef.grid:
        raise InvalidInputError("coefficients and field live on different grids")
    records = _peclet_records(coef, "calculus.apply_operator")
    return ScalarField(u.grid, _apply(coef, u.values, bc), records)


def _ghost_padded(u: np.ndarray, bc: BoundaryCondition) -> np.ndarray:
    if bc.periodic:
        return np.pad(u, 1, mode="wrap")
    out = u
    for j in range(u.ndim):
        lo, hi = bc.lower[j], bc.upper[j]
        for k in range(j):
            widths = [(0, 0)] * u.ndim
            widths[k] = (1, 1)
            lo = np.pad(lo, widths, mode="edge")
            hi = np.pad(hi, widths, mode="edge")
        first = np.take(out, [0], axis=j)
        last = np.take(out, [out.shape[j] - 1], axis=j)
        out = np.concatenate([2 * lo - first, out, 2 * hi - last], axis=j)
    return out


def apply_homogenized(
    a_bar: np.ndarray,
    b_bar: np.ndarray,
    Lambda: float,
    u: ScalarField,
    bc: BoundaryCondition = PERIODIC,
) -> ScalarField:
    """``-div(a_bar grad u) + b_bar . grad u + Lambda u`` with constant coefficients.

    Diagonal second derivatives and the drift use the same stencils as
    :func:`apply_operator`, so constant heterogeneous coefficients give the
    identical discrete operator. Mixed derivatives use centered differences.
    """
    grid = u.grid
    h = grid.h
    a_bar = np.asarray(a_bar, dtype=float).reshape(grid.d, grid.d)
    b_bar = np.asarray(b_bar, dtype=float).reshape(grid.d)
    g = _grad(u.values, h, bc)
    out = -_div([a_bar[j, j] * g[j] for j in range(grid.d)], h, bc.periodic)
    for j, avg in enumerate(_face_to_cell(g, bc.periodic)):
        out = out + b_bar[j] * avg
    mixed = 0.5 * (a_bar + a_bar.T)
    if grid.d > 1 and np.any(mixed - np.diag(np.diag(mixed))):
        padded = _ghost_padded(u.values, bc)
        core = tuple(slice(1, -1) for _ in range(grid.d))
        for j in range(grid.d):
            for k in range(grid.d):
                if j == k or mixed[j, k] == 0:
                    continue
                dj = (np.roll(padded, -1, axis=j) - np.roll(padded, 1, axis=j)) / (
                    2 * h
                )
                djk = (np.roll(dj, -1, axis=k) - np.roll(dj, 1, axis=k)) / (2 * h)
                out = out - mixed[j, k] * djk[core]
    return ScalarField(grid, out + Lambda * u.values)


@dataclass
class EnergyWitness:
    form: float
    lower_bound: float
    grad_sq: float
    u_sq: float

    @property
    def holds(self) -> bool:
        return self.form >= self.lower_bound - 1e-12 * abs(self.form)


def energy_form(coef: CoefficientSet, u: ScalarField) -> EnergyWitness:
    """Periodic bilinear form ``<A u, u>`` against ``3/4 |grad u|^2 + (Lambda - K^2)|u|^2``."""
    vol = coef.grid.cell_volume
    form = float(np.sum(_apply(coef, u.values, PERIODIC) * u.values) * vol)
    g = _grad(u.values, coef.grid.h, PERIODIC)
    grad_sq = float(sum(np.sum(gj**2) for gj in g) * vol)
    u_sq = float(np.sum(u.values**2) * vol)
    return EnergyWitness(
        form=form,
        lower_bound=0.75 * grad_sq + (coef.Lambda - coef.K**2) * u_sq,
        grad_sq=grad_sq,
        u_sq=u_sq,
    )


def _jacobi_diagonal(coef: CoefficientSet, bc: BoundaryCondition) -> np.ndarray:
    h2 = coef.grid.h ** 2
    diag = np.full(coef.grid.shape, coef.Lambda, dtype=float)
    for j, aj in enumerate(face_coefficients(coef, bc)):
        if bc.periodic:
            diag += (aj + np.roll(aj, -1, axis=j)) / h2
        else:
            n = coef.grid.n
            lower = np.take(aj, np.arange(n), axis=j)
            upper = np.take(aj, np.arange(1, n + 1), axis=j)
            weight_lo = np.ones(n)
            weight_hi = np.ones(n)
            weight_lo[0] = 2.0
            weight_hi[-1] = 2.0
            shape = [1] * coef.grid.d
            shape[j] = n
            diag += (
                lower * weight_lo.reshape(shape) + upper * weight_hi.reshape(shape)
            ) / h2
    return diag


@dataclass
class SolveResult:
    u: ScalarField
    iterations: int
    residual: float
    history: List[float] = field(default_factory=list)
    warnings: List[WarningRecord] = field(default_factory=list)

    def to_record(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual}


KrylovMethod = Literal["cg", "bicgstab"]


def _krylov(
    op: LinearOperator,
    rhs: np.ndarray,
    *,
    method: KrylovMethod,
    tol: float,
    maxiter: int,
    precond: Optional[LinearOperator] = None,
    x0: Optional[np.ndarray] = None,
    label: str = "solve",
) -> Tuple[np.ndarray, int, List[float]]:
    """Runs cg or bicgstab to relative residual ``tol``.

    Breakdowns restart from the current iterate, at most ``MAX_RESTARTS``
    times, within the overall ``maxiter`` budget.
    """
    rnorm = float(np.linalg.norm(rhs))
    if rnorm == 0:
        return np.zeros_like(rhs), 0, [0.0]
    solver = cg if method == "cg" else bicgstab
    history: List[float] = []
    x = np.zeros_like(rhs) if x0 is None else x0.copy()

    def _callback(xk):
        history.append(float(np.linalg.norm(rhs - op.matvec(xk))) / rnorm)

    used = 0
    for attempt in range(MAX_RESTARTS + 1):
        x, info = solver(
            op,
            rhs,
            x0=x,
            rtol=tol,
            atol=0.0,
            maxiter=maxiter - used,
            M=precond,
            callback=_callback,
        )
        used = len(history)
        residual = float(np.linalg.norm(rhs - op.matvec(x))) / rnorm
        if residual <= tol * (1 + 1e-6):
            logger.debug("%s: %s converged in %d iterations", label, method, used)
            return x, used, history
        if info > 0 or used >= maxiter:
            break
        logger.debug("%s: %s breakdown (info=%d), restart %d", label, method, info, attempt + 1)
    raise NonConvergenceError(
        f"{label}: {method} did not reach rtol={tol:g} within {maxiter} iterations "
        f"(final relative residual {residual:.3e})",
        history,
    )


def solve(
    coef: CoefficientSet,
    f: ScalarField,
    bc: BoundaryCondition = PERIODIC,
    tol: float = DEFAULT_TOL,
    x0: Optional[ScalarField] = None,
) -> SolveResult:
    """Solves ``-div(a grad u) + b . grad u + Lambda u = f`` by BiCGStab.

    The boundary data are lifted to the right-hand side, the iteration runs on
    the homogeneous operator with Jacobi preconditioning.
    """
    if f.grid != coef.grid:
        raise InvalidInputError("coefficients and right-hand side differ in grid")
    if coef.Lambda < coef.K**2 + 1 - 1e-12:
        raise InvalidInputError(
            f"Lambda={coef.Lambda} < K^2 + 1 = {coef.K**2 + 1}, coercivity lost"
        )
    grid = coef.grid
    records = _peclet_records(coef, "calculus.solve")
    hom = bc.homogeneous()
    lift = np.zeros(grid.shape) if bc.periodic else _apply(coef, np.zeros(grid.shape), bc)
    rhs = (f.values - lift).ravel()
    size = grid.size

    op = LinearOperator(
        (size, size),
        matvec=lambda x: _apply(coef, x.reshape(grid.shape), hom).ravel(),
        dtype=float,
    )
    inv_diag = 1.0 / _jacobi_diagonal(coef, bc).ravel()
    precond = LinearOperator((size, size), matvec=lambda x: x * inv_diag, dtype=float)
    x, iterations, history = _krylov(
        op,
        rhs,
        method="bicgstab",
        tol=tol,
        maxiter=50 * grid.n,
        precond=precond,
        x0=None if x0 is None else x0.values.ravel(),
        label="calculus.solve",
    )
    return SolveResult(
        u=ScalarField(grid, x.reshape(grid.shape)),
        iterations=iterations,
        residual=history[-1] if history else 0.0,
        history=history,
        warnings=records,
    )


def sobolev_exponent(d: int) -> float:
    if d < 3:
        raise InvalidInputError(f"the exponent 2d/(d-2) needs d >= 3, got d={d}")
    return 2 * d / (d - 2)


NormKind = Union[float, Literal["sobolev"]]


def norm(u: ScalarField, p: NormKind = 2) -> float:
    """Discrete Lp norm for ``p`` in ``{2, 2d/(d-2), inf}``; ``p="sobolev"``
    selects ``2d/(d-2)``, which needs ``d >= 3``."""
    d = u.grid.d
    if p == "sobolev":
        p = sobolev_exponent(d)
    if p == np.inf:
        return float(np.abs(u.values).max())
    p = float(p)
    allowed = (2.0,) if d < 3 else (2.0, sobolev_exponent(d))
    if p not in allowed:
        raise InvalidInputError(
            f"p={p:g} is not supported in d={d}; use one of "
            + ", ".join(f"{q:g}" for q in allowed)
            + " or inf"
        )
    return float((np.sum(np.abs(u.values) ** p) * u.grid.cell_volume) ** (1 / p))


def face_norm(F: VectorField) -> float:
    """L2 norm of a face field; dirichlet boundary faces carry half weight."""
    total = 0.0
    for j, Fj in enumerate(F.components):
        w = Fj**2
        if not F.periodic:
            n = Fj.shape[j] - 1
            weights = np.ones(n + 1)
            weights[[0, n]] = 0.5
            shape = [1] * Fj.ndim
            shape[j] = n + 1
            w = w * weights.reshape(shape)
        total += float(w.sum())
    return float(np.sqrt(total * F.grid.cell_volume))


def seminorm_h1(u: ScalarField, bc: BoundaryCondition = PERIODIC) -> float:
    return face_norm(gradient(u, bc))


def inner(u: ScalarField, v: ScalarField) -> float:
    return float(np.sum(u.values * v.values) * u.grid.cell_volume)


def face_inner(F: VectorField, G: VectorField) -> float:
    return float(
        sum(np.sum(f * g) for f, g in zip(F.components, G.components))
        * F.grid.cell_volume
    )


def laplacian_symbol(grid: GridSpec, real: bool = True) -> np.ndarray:
    """Eigenvalues of ``-Delta_h`` on the torus, laid out for rfftn (or fftn)."""
    k = np.fft.fftfreq(grid.n) * grid.n
    sym = np.zeros([grid.n] * (grid.d - 1) + [grid.n // 2 + 1 if real else grid.n])
    for j in range(grid.d):
        kj = np.fft.rfftfreq(grid.n) * grid.n if (real and j == grid.d - 1) else k
        shape = [1] * grid.d
        shape[j] = kj.size
        sym = sym + (4 / grid.h**2) * np.sin(np.pi * kj / grid.n).reshape(shape) ** 2
    return sym


def spectral_inverse(
    rhs: np.ndarray, grid: GridSpec, mass: float = 0.0, coeff: float = 1.0
) -> np.ndarray:
    """Solves ``(-coeff Delta_h + mass) x = rhs`` on the torus.

    With ``mass == 0`` the mean of ``rhs`` is discarded and ``x`` is mean-zero.
    """
    symbol = coeff * laplacian_symbol(grid) + mass
    modes = np.fft.rfftn(rhs)
    zero = (0,) * grid.d
    if mass == 0:
        symbol[zero] = 1.0
        modes[zero] = 0.0
    return np.fft.irfftn(modes / symbol, s=grid.shape, axes=tuple(range(grid.d)))


__all__ = [
    "ScalarField",
    "VectorField",
    "SkewTensorField",
    "BoundaryCondition",
    "PERIODIC",
    "SolveResult",
    "EnergyWitness",
    "gradient",
    "divergence",
    "cell_average",
    "face_coefficients",
    "apply_operator",
    "apply_homogenized",
    "energy_form",
    "peclet_number",
    "solve",
    "norm",
    "face_norm",
    "seminorm_h1",
    "inner",
    "face_inner",
    "sobolev_exponent",
    "laplacian_symbol",
    "spectral_inverse",
]
