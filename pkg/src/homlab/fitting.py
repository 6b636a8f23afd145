from __future__ import annotations
from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from ._errors import InvalidInputError, RunRejectedError


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    ci_low: float
    ci_high: float
    n_points: int

    def to_record(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "ci": [self.ci_low, self.ci_high],
            "n_points": self.n_points,
        }


def _ols(x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def fit_slope(points: Iterable[Tuple[float, float]], min_points: int = 3) -> SlopeFit:
    """Least-squares slope of ``log(error)`` against ``log(eps)``.

    The confidence interval is the jackknife (leave-one-out) interval at two
    standard errors.
    """
    pts = [(float(e), float(v)) for e, v in points]
    if len(pts) < min_points:
        raise RunRejectedError(f"a slope needs at least {min_points} points, got {len(pts)}")
    eps = np.array([p[0] for p in pts])
    err = np.array([p[1] for p in pts])
    if np.any(eps <= 0):
        raise InvalidInputError("scales must be positive")
    if np.any(err <= 0) or not np.all(np.isfinite(err)):
        raise InvalidInputError(f"errors must be positive and finite, got {err.tolist()}")
    x, y = np.log(eps), np.log(err)
    if np.ptp(x) == 0:
        raise RunRejectedError("a slope needs at least two distinct scales")
    slope, intercept = _ols(x, y)
    fitted = slope * x + intercept
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - fitted) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    n = x.size
    if n > 2:
        loo = np.array(
            [_ols(np.delete(x, i), np.delete(y, i))[0] for i in range(n)]
        )
        spread = np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    else:
        spread = 0.0
    return SlopeFit(
        slope=slope,
        intercept=intercept,
        r2=r2,
        ci_low=slope - 2 * spread,
        ci_high=slope + 2 * spread,
        n_points=n,
    )
