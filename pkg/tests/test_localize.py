import numpy as np
import pytest

from homlab._errors import InvalidInputError
from homlab.calculus import ScalarField
from homlab.corrector import CorrectorSet
from homlab.field import (
    CoefficientMap,
    CoefficientSampler,
    CovarianceSpec,
    FieldSampler,
    GridSpec,
)
from homlab.homog import gamma_field
from homlab.localize import (
    CubePartition,
    IotaRejectedError,
    choose_iota,
    cube_average,
    cube_variance_oracle,
    fit_localized_exponents,
    localization_budget,
    localized_variance_check,
    poincare_check,
)
from homlab.manufactured import SineProduct


def _frozen_gammas(eps, grid, M, seed=0):
    """Gamma fields of constant-diffusion samples, whose correctors vanish."""
    source = CoefficientSampler(
        FieldSampler(CovarianceSpec("squared-exponential", eps), grid, seed),
        CoefficientMap(4.0, 0.5, 1.25, (1.0, 1.0), random_diffusion=False),
    )
    out = []
    for k in range(M):
        coef = source(k)
        out.append(gamma_field(coef, CorrectorSet.zeros(coef), np.zeros(grid.d)))
    return out


def test_choose_iota_rounds_to_dyadic():
    choice = choose_iota(1 / 16, 3, GridSpec(3, 128))
    assert choice.used == 0.25
    assert choice.ideal == pytest.approx((1 / 16) ** 0.6)
    assert choice.partition(GridSpec(3, 128)).cubes_per_side == 4


def test_choose_iota_never_below_epsilon():
    choice = choose_iota(0.3, 2, GridSpec(2, 64))
    assert choice.used >= 0.3


def test_choose_iota_rejects_coarse_grid():
    with pytest.raises(IotaRejectedError) as info:
        choose_iota(1 / 64, 2, GridSpec(2, 8))
    assert info.value.minimal_n == 16
    # a quarter-side partition fits on this grid but is not substituted
    CubePartition(GridSpec(2, 8), 0.25)


def test_partition_requires_dyadic_side():
    with pytest.raises(InvalidInputError):
        CubePartition(GridSpec(2, 64), 0.3)


def test_partition_blocks():
    grid = GridSpec(2, 16)
    part = CubePartition(grid, 0.25)
    assert part.n_cubes == 16
    ids = part.cube_index()
    assert ids.shape == grid.shape
    assert np.array_equal(np.bincount(ids.ravel()), np.full(16, 16))
    avg = cube_average(ScalarField(grid, ids.astype(float)), part)
    assert np.array_equal(avg.ravel(), np.arange(16.0))


def test_poincare_holds_for_smooth_fields():
    grid = GridSpec(2, 64)
    x, y = grid.cell_centers()
    v = ScalarField(
        grid, np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y) + 0.3 * np.sin(6 * np.pi * y)
    )
    report = poincare_check(v, CubePartition(grid, 0.25))
    assert report.holds
    assert report.checked == 16


def test_poincare_skips_constant_cubes():
    grid = GridSpec(2, 16)
    report = poincare_check(ScalarField(grid, np.ones(grid.shape)), CubePartition(grid, 0.5))
    assert report.skipped == 4
    assert report.checked == 0
    assert report.holds


def test_localized_variance_matches_oracle():
    eps, M = 1 / 16, 400
    grid = GridSpec(2, 64)
    part = CubePartition(grid, 0.25)
    u0 = SineProduct(2)
    report = localized_variance_check(_frozen_gammas(eps, grid, M), u0, part, eps)
    oracle = cube_variance_oracle(
        CovarianceSpec("squared-exponential", eps), 0.5, (1.0, 1.0), u0, part
    )
    measured = sum(c.variance for c in report.cubes)
    assert abs(measured - oracle.sum()) <= 4 * np.sqrt(2 / (M - 1)) * oracle.sum()
    assert report.n_samples == M
    assert len(report.to_rows(0.25)) == part.n_cubes


def test_localized_variance_needs_samples():
    grid = GridSpec(2, 32)
    gammas = _frozen_gammas(0.125, grid, 4)
    with pytest.raises(InvalidInputError):
        localized_variance_check(gammas, SineProduct(2), CubePartition(grid, 0.25), 0.125)


def test_cube_side_below_epsilon_rejected():
    grid = GridSpec(2, 32)
    gammas = _frozen_gammas(0.25, grid, 4)
    with pytest.raises(InvalidInputError):
        localized_variance_check(
            gammas, SineProduct(2), CubePartition(grid, 0.125), 0.25, min_samples=2
        )


def test_oracle_without_drift_is_zero():
    grid = GridSpec(2, 32)
    oracle = cube_variance_oracle(
        CovarianceSpec("squared-exponential", 0.125),
        0.0,
        (1.0,),
        SineProduct(2),
        CubePartition(grid, 0.25),
    )
    assert np.all(oracle == 0)


def test_exponent_fit_recovers_synthetic_scaling():
    points = [
        (e, i, 3.0 * e**2 * i**-4)
        for e in (0.1, 0.05, 0.025)
        for i in (0.5, 0.25)
    ]
    fit = fit_localized_exponents(points)
    assert fit.eps_exponent == pytest.approx(2.0)
    assert fit.iota_exponent == pytest.approx(-4.0)
    assert fit.n_points == 6


def test_exponent_fit_with_single_iota():
    fit = fit_localized_exponents([(0.1, 0.5, 0.01), (0.05, 0.5, 0.0025)])
    assert fit.iota_exponent is None
    assert fit.eps_exponent == pytest.approx(2.0)


def test_budget_picks_balancing_scale():
    budget = localization_budget(1 / 16, 2)
    assert budget.best_dyadic == 0.25
    assert budget.balancing_scale == pytest.approx(0.25)
    assert budget.continuous_minimizer == pytest.approx(0.25)
    assert min(budget.costs) >= 1 / 16


def test_budget_without_candidates():
    with pytest.raises(InvalidInputError):
        localization_budget(0.5, 2, iotas=[0.25])


@pytest.mark.slow
def test_localized_variance_exponent_with_random_diffusion():
    from homlab.corrector import solve_correctors

    grid = GridSpec(2, 256)
    u0 = SineProduct(2)
    points = []
    for eps in (1 / 8, 1 / 16, 1 / 32):
        source = CoefficientSampler(
            FieldSampler(CovarianceSpec("squared-exponential", eps), grid, 7),
            CoefficientMap(4.0, 0.5, 1.25),
        )
        part = choose_iota(eps, 2, grid).partition(grid)
        gammas = []
        for k in range(32):
            coef = source(k)
            cs = solve_correctors(coef, with_sigma=False)
            gammas.append(gamma_field(coef, cs, np.zeros(2)))
        report = localized_variance_check(gammas, u0, part, eps)
        # normalize out the cube size so only the eps dependence is fitted
        points.append((eps, 1.0, report.normalized_variance * part.iota ** (2 * 2)))
    fit = fit_localized_exponents(points)
    assert 1.0 <= fit.eps_exponent <= 3.0
