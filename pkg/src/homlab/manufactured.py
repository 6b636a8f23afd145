"""Analytic macroscopic profiles with exact first and second derivatives."""

from __future__ import annotations
from abc import ABC, abstractmethod
from typing import Literal, Optional, Sequence, Tuple

import numpy as np

from ._errors import InvalidInputError
from .calculus import BoundaryCondition, ScalarField
from .field import GridSpec

Coords = Sequence[np.ndarray]


class ManufacturedSolution(ABC):
    def __init__(self, d: int):
        self.d = d

    @abstractmethod
    def value(self, *x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def gradient(self, *x: np.ndarray) -> np.ndarray:
        """Array of shape ``(d,) + x[0].shape``."""

    @abstractmethod
    def hessian(self, *x: np.ndarray) -> np.ndarray:
        """Array of shape ``(d, d) + x[0].shape``."""

    def _check(self, grid: GridSpec):
        if grid.d != self.d:
            raise InvalidInputError(f"profile is {self.d}-d, grid is {grid.d}-d")

    def sample(self, grid: GridSpec) -> ScalarField:
        self._check(grid)
        return ScalarField(grid, self.value(*grid.cell_centers()))

    def sample_gradient(self, grid: GridSpec) -> np.ndarray:
        self._check(grid)
        return self.gradient(*grid.cell_centers())

    def sample_hessian(self, grid: GridSpec) -> np.ndarray:
        self._check(grid)
        return self.hessian(*grid.cell_centers())

    def dirichlet(self, grid: GridSpec) -> BoundaryCondition:
        self._check(grid)
        return BoundaryCondition.dirichlet(grid, self.value)

    def gradient_h1_norm(self, grid: GridSpec) -> float:
        """``||grad u0||_{H^1}`` by midpoint quadrature on the cells."""
        g = self.sample_gradient(grid)
        H = self.sample_hessian(grid)
        total = np.sum(g**2) + np.sum(H**2)
        return float(np.sqrt(total * grid.cell_volume))

    def gradient_l2_norm(self, grid: GridSpec) -> float:
        g = self.sample_gradient(grid)
        return float(np.sqrt(np.sum(g**2) * grid.cell_volume))

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


class SineProduct(ManufacturedSolution):
    """``prod_j sin(2 pi x_j / L)``."""

    def __init__(self, d: int, length: float = 1.0):
        super().__init__(d)
        self.k = 2 * np.pi / length

    def _factors(self, x: Coords) -> Tuple[list, list]:
        return [np.sin(self.k * xj) for xj in x], [np.cos(self.k * xj) for xj in x]

    def value(self, *x):
        s, _ = self._factors(x)
        return np.prod(np.stack(s), axis=0)

    def gradient(self, *x):
        s, c = self._factors(x)
        out = []
        for j in range(self.d):
            terms = [c[l] if l == j else s[l] for l in range(self.d)]
            out.append(self.k * np.prod(np.stack(terms), axis=0))
        return np.stack(out)

    def hessian(self, *x):
        s, c = self._factors(x)
        u = np.prod(np.stack(s), axis=0)
        H = np.empty((self.d, self.d) + u.shape)
        for j in range(self.d):
            for k in range(self.d):
                if j == k:
                    H[j, k] = -(self.k**2) * u
                else:
                    terms = [c[l] if l in (j, k) else s[l] for l in range(self.d)]
                    H[j, k] = self.k**2 * np.prod(np.stack(terms), axis=0)
        return H


class Sine(ManufacturedSolution):
    """``sin(2 pi x_axis / L)``, constant in the other directions."""

    def __init__(self, d: int, axis: int = 0, length: float = 1.0):
        super().__init__(d)
        self.axis = axis
        self.k = 2 * np.pi / length

    def value(self, *x):
        return np.sin(self.k * x[self.axis]) + 0 * x[0]

    def gradient(self, *x):
        out = np.zeros((self.d,) + np.shape(x[0]))
        out[self.axis] = self.k * np.cos(self.k * x[self.axis])
        return out

    def hessian(self, *x):
        out = np.zeros((self.d, self.d) + np.shape(x[0]))
        out[self.axis, self.axis] = -(self.k**2) * np.sin(self.k * x[self.axis])
        return out


class Bump(ManufacturedSolution):
    """``(1 - |x - c|^2 / r^2)_+^4``, a C^2 bump supported in the ball B_r(c)."""

    def __init__(self, center: Sequence[float], radius: float):
        super().__init__(len(center))
        if radius <= 0:
            raise InvalidInputError("bump radius must be positive")
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)

    @property
    def support_diameter(self) -> float:
        return 2 * self.radius

    def _offsets(self, x: Coords) -> np.ndarray:
        return np.stack([xj - cj for xj, cj in zip(x, self.center)])

    def _s(self, dx: np.ndarray) -> np.ndarray:
        return np.clip(1.0 - np.sum(dx**2, axis=0) / self.radius**2, 0.0, None)

    def value(self, *x):
        return self._s(self._offsets(x)) ** 4

    def gradient(self, *x):
        dx = self._offsets(x)
        s = self._s(dx)
        return -8.0 * s**3 * dx / self.radius**2

    def hessian(self, *x):
        dx = self._offsets(x)
        s = self._s(dx)
        r2 = self.radius**2
        H = 48.0 * s**2 * dx[:, None] * dx[None, :] / r2**2
        for j in range(self.d):
            H[j, j] -= 8.0 * s**3 / r2
        return H

    def describe(self) -> dict:
        return {
            "kind": "Bump",
            "center": self.center.tolist(),
            "radius": self.radius,
        }


ProfileKind = Literal["sine-product", "sine", "bump"]


def make_profile(
    kind: ProfileKind,
    d: int,
    length: float = 1.0,
    radius: Optional[float] = None,
) -> ManufacturedSolution:
    if kind == "sine-product":
        return SineProduct(d, length)
    if kind == "sine":
        return Sine(d, 0, length)
    if kind == "bump":
        return Bump([length / 2] * d, radius if radius is not None else length / 4)
    raise InvalidInputError(f"unknown profile kind {kind!r}")
