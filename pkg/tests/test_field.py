import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from homlab._errors import HomlabWarning, InvalidInputError
from homlab.field import (
    CoefficientMap,
    CoefficientSampler,
    CoefficientSet,
    CovarianceSpec,
    FieldSampler,
    GridSpec,
    ParameterField,
    derive_seed,
    empirical_covariance,
    lipschitz_estimate,
    periodization_correction,
    sample_gaussian_field,
    sample_parameter_field,
    squashed_covariance,
    synthesized_covariance,
)


def test_grid_spacing_and_validation():
    grid = GridSpec(2, 64, 2.0)
    assert grid.h == 2.0 / 64
    assert grid.shape == (64, 64)
    with pytest.raises(InvalidInputError):
        GridSpec(2, 48)
    with pytest.raises(InvalidInputError):
        GridSpec(4, 16)
    with pytest.raises(InvalidInputError):
        GridSpec(2, 16, 0.0)


@pytest.mark.parametrize("kind", ["squared-exponential", "long-range"])
def test_kernel_is_one_at_zero_lag(kind):
    assert CovarianceSpec(kind, 0.1).kernel(0.0) == pytest.approx(1.0)


def test_squared_exponential_value():
    cov = CovarianceSpec("squared-exponential", 0.1)
    assert cov.kernel(0.1) == pytest.approx(np.exp(-0.5))


def test_long_range_value():
    cov = CovarianceSpec("long-range", 0.1)
    assert cov.kernel(0.3) == pytest.approx(0.5)


def test_rejects_non_positive_epsilon():
    with pytest.raises(InvalidInputError):
        CovarianceSpec("squared-exponential", 0.0)
    with pytest.raises(InvalidInputError):
        CovarianceSpec("gaussian", 0.1)


def test_sampling_is_reproducible():
    cov = CovarianceSpec("squared-exponential", 0.1)
    grid = GridSpec(2, 32)
    a = sample_parameter_field(cov, grid, 12345)
    b = sample_parameter_field(cov, grid, 12345)
    c = sample_parameter_field(cov, grid, 12346)
    assert np.array_equal(a.cells, b.cells)
    assert np.array_equal(a.faces, b.faces)
    assert not np.array_equal(a.cells, c.cells)


def test_parameter_values_strictly_inside_unit_interval():
    cov = CovarianceSpec("long-range", 0.05)
    field = sample_parameter_field(cov, GridSpec(2, 64), 3)
    for values in (field.cells, field.faces):
        assert np.all(np.abs(values) < 1)
    assert field.faces.shape == (2, 64, 64)


def test_raw_field_is_mean_zero_on_average():
    cov = CovarianceSpec("squared-exponential", 0.05)
    grid = GridSpec(1, 256)
    means = [sample_gaussian_field(cov, grid, s).cells.mean() for s in range(64)]
    assert abs(np.mean(means)) < 4 * np.std(means) / np.sqrt(len(means)) + 1e-3


def test_shift_of_noise_shifts_cells_and_faces():
    cov = CovarianceSpec("squared-exponential", 0.1)
    grid = GridSpec(2, 16)
    noise = np.random.default_rng(0).standard_normal(grid.shape)
    base = sample_gaussian_field(cov, grid, noise=noise)
    shifted = sample_gaussian_field(cov, grid, noise=np.roll(noise, 1, axis=0))
    assert np.allclose(np.roll(base.cells, 1, axis=0), shifted.cells, atol=1e-12)
    assert np.allclose(np.roll(base.faces, 1, axis=1), shifted.faces, atol=1e-12)


def test_empirical_covariance_matches_synthesized():
    cov = CovarianceSpec("squared-exponential", 0.05)
    grid = GridSpec(1, 256)
    samples = [sample_gaussian_field(cov, grid, derive_seed(9, k)) for k in range(200)]
    est = empirical_covariance(samples, max_lag=6)
    target = synthesized_covariance(cov, grid)[:7]
    assert np.all(np.abs(est.values - target) <= 5 * est.std_err + 0.02)
    assert est.n_samples == 200


def test_empirical_covariance_needs_two_samples():
    cov = CovarianceSpec("squared-exponential", 0.1)
    field = sample_gaussian_field(cov, GridSpec(1, 16), 1)
    with pytest.raises(InvalidInputError):
        empirical_covariance([field], 2)


def test_squashed_covariance_against_direct_quadrature():
    z, w = hermegauss(60)
    w = w / np.sqrt(2 * np.pi)
    expected = float(np.sum(w * np.tanh(z) ** 2))
    values = squashed_covariance(np.array([0.0, 1.0, -1.0]), variance=1.0)
    assert values[0] == pytest.approx(0.0, abs=1e-12)
    assert values[1] == pytest.approx(expected, rel=1e-4)
    assert values[2] == pytest.approx(-expected, rel=1e-4)


def test_squashed_covariance_is_monotone():
    values = squashed_covariance(np.linspace(0, 1, 11), variance=1.0)
    assert np.all(np.diff(values) > 0)


def test_periodization_correction_small_for_short_range():
    cov = CovarianceSpec("squared-exponential", 0.05)
    assert periodization_correction(cov, GridSpec(3, 32)) < 1e-12
    long = CovarianceSpec("long-range", 0.05)
    assert periodization_correction(long, GridSpec(1, 32)) > 0.1


def test_derive_seed_is_deterministic_and_distinct():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)
    assert derive_seed(1, 2) != derive_seed(2, 2)


def test_coefficient_map_bounds():
    grid = GridSpec(2, 32)
    sampler = CoefficientSampler(
        FieldSampler(CovarianceSpec("squared-exponential", 0.1), grid, 5),
        CoefficientMap(4.0, 0.5, 1.25, (1.0, 1.0)),
    )
    coef = sampler(0)
    coef.check_bounds()
    assert coef.a.min() >= 1 and coef.a.max() <= 4
    bnorm = np.sqrt(np.sum(coef.b**2, axis=0))
    assert bnorm.max() <= 0.5 + 1e-12
    # the drift points along the normalized direction
    assert np.allclose(coef.b[0], coef.b[1])


def test_coefficient_map_rejects_inadmissible_parameters():
    with pytest.raises(InvalidInputError):
        CoefficientMap(1.0, 0.5, 2.0)
    with pytest.raises(InvalidInputError):
        CoefficientMap(4.0, 1.0, 1.5)
    with pytest.raises(InvalidInputError):
        CoefficientMap(4.0, -1.0, 2.0)


def test_frozen_diffusion_uses_midpoint():
    grid = GridSpec(1, 16)
    param = ParameterField.constant(grid, 0.3)
    coef = CoefficientMap(3.0, 0.5, 1.25, random_diffusion=False)(param)
    assert np.all(coef.a == 2.0)
    assert np.allclose(coef.b, 0.15)


def test_large_drift_is_flagged():
    grid = GridSpec(1, 16)
    param = ParameterField.constant(grid, 0.0)
    with pytest.warns(HomlabWarning):
        coef = CoefficientMap(2.0, 3.0, 10.0)(param)
    assert coef.warnings


def test_constant_parameter_rejects_boundary_values():
    with pytest.raises(InvalidInputError):
        ParameterField.constant(GridSpec(1, 8), 1.0)


def test_perturbed_stays_inside_unit_interval():
    grid = GridSpec(1, 8)
    param = ParameterField.constant(grid, 0.9999)
    bumped = param.perturbed(np.ones(grid.shape), np.ones((1,) + grid.shape), 0.1)
    assert np.all(bumped.cells < 1)
    assert np.all(bumped.faces < 1)


def test_check_bounds_detects_violation():
    grid = GridSpec(1, 8)
    coef = CoefficientSet.constant(grid, a=0.5, lam=2.0)
    with pytest.raises(InvalidInputError):
        coef.check_bounds()


def test_lipschitz_estimate_of_constant_is_zero():
    assert lipschitz_estimate(CoefficientSet.constant(GridSpec(2, 8), a=2.0)) == 0.0


def test_sampler_is_deterministic():
    sampler = FieldSampler(CovarianceSpec("squared-exponential", 0.2), GridSpec(1, 32), 7)
    assert sampler.seed(3) == sampler.seed(3)
    assert np.array_equal(sampler(3).cells, sampler(3).cells)
