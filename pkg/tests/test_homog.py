from dataclasses import dataclass
from typing import FrozenSet

import numpy as np
import pytest

from homlab._errors import InvalidInputError, NonConvergenceError, RunRejectedError
from homlab.corrector import solve_correctors
from homlab.field import (
    CoefficientMap,
    CoefficientSampler,
    CoefficientSet,
    CovarianceSpec,
    FieldSampler,
    FixedCoefficients,
    GridSpec,
)
from homlab.homog import (
    HomogenizedCoefficients,
    drift_average,
    estimate_homogenized,
    gamma_field,
    gamma_l2_bound_check,
    voigt_reuss_bounds,
)
from homlab.manufactured import SineProduct


@pytest.fixture
def source():
    grid = GridSpec(2, 32)
    return CoefficientSampler(
        FieldSampler(CovarianceSpec("squared-exponential", 0.125), grid, 3),
        CoefficientMap(4.0, 0.5, 1.25),
    )


@dataclass(frozen=True)
class FailingSource:
    """Constant coefficients that fail for the listed sample indices."""

    grid: GridSpec
    failing: FrozenSet[int]

    def __call__(self, index: int) -> CoefficientSet:
        if index in self.failing:
            raise NonConvergenceError(f"sample {index} diverged")
        return CoefficientSet.constant(self.grid, a=2.0)


def test_constant_coefficients_are_exact():
    grid = GridSpec(2, 16)
    coef = CoefficientSet.constant(grid, a=3.0, b=[0.2, -0.1])
    result = estimate_homogenized(FixedCoefficients(coef), 2, workers=1)
    assert np.allclose(result.a_bar, 3.0 * np.eye(2))
    assert np.allclose(result.b_bar, [0.2, -0.1])
    assert np.all(result.a_std_err == 0)


def test_isotropic_samples_are_nearly_symmetric(source):
    result = estimate_homogenized(source, 4, workers=1)
    assert result.asymmetry < 1e-6
    assert np.all(result.symmetric_spectrum() >= 1.0)
    assert result.n_samples == 4
    assert result.to_record()["M"] == 4


def test_single_failure_is_excluded():
    failing = FailingSource(GridSpec(2, 8), frozenset({7}))
    result = estimate_homogenized(failing, 20, workers=1)
    assert result.excluded == 1
    assert result.n_samples == 19


def test_many_failures_reject_run():
    failing = FailingSource(GridSpec(2, 8), frozenset({0, 3, 5, 11, 17}))
    with pytest.raises(RunRejectedError):
        estimate_homogenized(failing, 20, workers=1)


def test_non_homlab_errors_propagate():
    def broken(index):
        raise KeyError(index)

    with pytest.raises(KeyError):
        estimate_homogenized(broken, 2, workers=1)


def test_requires_a_sample(source):
    with pytest.raises(InvalidInputError):
        estimate_homogenized(source, 0)


def test_worker_count_does_not_change_result(source):
    serial = estimate_homogenized(source, 4, workers=1)
    parallel = estimate_homogenized(source, 4, workers=3)
    assert np.array_equal(serial.a_bar, parallel.a_bar)
    assert np.array_equal(serial.b_bar, parallel.b_bar)


def test_sample_rows(source):
    result = estimate_homogenized(source, 2, workers=1)
    row = result.samples[1].to_row()
    assert row["sample"] == 1
    assert {"a_11", "a_12", "a_21", "a_22", "b_1", "b_2"} <= set(row)


def test_voigt_reuss_ordering(source):
    coef = source(0)
    harmonic, arithmetic = voigt_reuss_bounds(coef)
    cs = solve_correctors(coef, with_sigma=False)
    for i in range(2):
        assert harmonic[i] - 1e-8 <= cs.a_bar_sample[i, i] <= arithmetic[i] + 1e-8


def test_gamma_bound_holds(source):
    gammas = []
    for index in range(8):
        coef = source(index)
        cs = solve_correctors(coef, with_sigma=False)
        gammas.append(gamma_field(coef, cs, np.zeros(2)))
    report = gamma_l2_bound_check(gammas, SineProduct(2))
    assert report.holds
    assert len(report.ratios) == 8
    assert report.to_record()["holds"] is True


def test_gamma_vanishes_without_drift():
    coef = CoefficientSet.constant(GridSpec(2, 8), a=2.0)
    cs = solve_correctors(coef, with_sigma=False)
    gamma = gamma_field(coef, cs, np.zeros(2))
    assert np.all(gamma.gamma == 0)
    assert np.all(gamma.spatial_means() == 0)


def test_gamma_check_needs_samples(source):
    coef = source(0)
    cs = solve_correctors(coef, with_sigma=False)
    with pytest.raises(InvalidInputError):
        gamma_l2_bound_check([gamma_field(coef, cs, np.zeros(2))], SineProduct(2))


def test_exact_coefficients():
    exact = HomogenizedCoefficients.exact(2.0 * np.eye(3), np.zeros(3))
    assert exact.d == 3
    assert exact.asymmetry == 0.0


def test_laminate_drift_average_matches_quadrature():
    K = 0.5
    grid = GridSpec(2, 128)
    coef = CoefficientSet.from_functions(
        grid,
        a=lambda x, y: 2.0 + np.sin(2 * np.pi * x),
        b=lambda x, y: (K * np.sin(2 * np.pi * x), np.zeros_like(y)),
        lam=3.0,
        K=K,
    )
    cs = solve_correctors(coef, with_sigma=False)
    # a (1 + phi') equals the harmonic mean sqrt(3) across the layers
    x = (np.arange(4096) + 0.5) / 4096
    s = np.sin(2 * np.pi * x)
    oracle = K * np.mean(s * np.sqrt(3.0) / (2.0 + s))
    assert oracle == pytest.approx(K * (np.sqrt(3.0) - 2.0), rel=1e-10)
    assert cs.a_bar_sample[0, 0] == pytest.approx(np.sqrt(3.0), rel=1e-3)
    b_bar = drift_average(coef, cs)
    assert b_bar[0] == pytest.approx(oracle, rel=1e-2)
    assert abs(b_bar[1]) < 1e-8


def test_gamma_of_fresh_sample_is_centered(source):
    M = 16
    homog = estimate_homogenized(source, M, workers=1)
    assert np.all(homog.b_std_err > 0)
    coef = source(M)
    cs = solve_correctors(coef, with_sigma=False)
    means = gamma_field(coef, cs, homog.b_bar).spatial_means()
    # a fresh sample deviates from the ensemble mean by sigma * sqrt(1 + 1/M)
    spread = homog.b_std_err * np.sqrt(M) * np.sqrt(1 + 1 / M)
    assert np.all(np.abs(means) <= 4 * spread)
