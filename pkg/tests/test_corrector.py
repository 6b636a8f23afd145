import numpy as np
import pytest

from homlab._errors import InvalidInputError
from homlab.calculus import VectorField
from homlab.corrector import (
    CorrectorSet,
    corrected_gradient_energy,
    divergence_identity_check,
    massive_convergence,
    moment_diagnostics,
    parameter_derivative_ratio,
    solve_corrector,
    solve_correctors,
    solve_flux_corrector,
    sublinearity_trend,
)
from homlab.field import (
    CoefficientMap,
    CoefficientSet,
    CovarianceSpec,
    GridSpec,
    sample_parameter_field,
)


@pytest.fixture
def random_coef():
    grid = GridSpec(2, 32)
    param = sample_parameter_field(CovarianceSpec("squared-exponential", 0.125), grid, 21)
    return CoefficientMap(4.0, 0.5, 1.25)(param)


@pytest.fixture
def laminate():
    grid = GridSpec(2, 128)
    return CoefficientSet.from_functions(
        grid, lambda x, y: 2.0 + np.sin(2 * np.pi * x), lam=3.0
    )


def test_constant_coefficients_have_zero_correctors():
    coef = CoefficientSet.constant(GridSpec(2, 16), a=2.5)
    cs = solve_correctors(coef)
    for phi in cs.phi:
        assert np.all(phi.values == 0)
    assert np.allclose(cs.a_bar_sample, 2.5 * np.eye(2))
    assert divergence_identity_check(cs.sigma[0], cs.q[0]) == 0.0


def test_laminate_matches_harmonic_and_arithmetic_means(laminate):
    cs = solve_correctors(laminate, with_sigma=False)
    assert cs.a_bar_sample[0, 0] == pytest.approx(np.sqrt(3), rel=1e-2)
    assert cs.a_bar_sample[1, 1] == pytest.approx(2.0, rel=1e-2)
    assert abs(cs.a_bar_sample[0, 1]) < 1e-8
    assert abs(cs.a_bar_sample[1, 0]) < 1e-8


def test_laminate_corrector_gradient_is_exact(laminate):
    a0 = laminate.a[0]
    c = 1.0 / np.mean(1.0 / a0)
    result = solve_corrector(laminate, 0)
    expected = c / a0 - 1.0
    assert np.max(np.abs(result.grad_phi.components[0] - expected)) < 1e-5
    assert np.max(np.abs(result.grad_phi.components[1])) < 1e-5
    assert abs(result.phi.mean()) < 1e-12


def test_corrected_energy_bounds(laminate):
    result = solve_corrector(laminate, 0)
    energy, plain = corrected_gradient_energy(laminate, result.grad_phi, 0)
    assert plain <= energy <= laminate.lam * plain


def test_flux_corrector_is_skew(random_coef):
    cs = solve_correctors(random_coef)
    sigma = cs.sigma[0]
    assert np.array_equal(sigma.component(1, 0), -sigma.component(0, 1))
    assert np.all(sigma.component(0, 0) == 0)


def test_divergence_identity_holds(random_coef):
    cs = solve_correctors(random_coef)
    for i in range(2):
        assert divergence_identity_check(cs.sigma[i], cs.q[i]) <= 1e-6
    # the realization's own average makes the fluxes mean-free
    assert np.max(np.abs(cs.flux_means)) < 1e-12


def test_flux_corrector_closed_form():
    grid = GridSpec(2, 32)
    h = grid.h
    x, _ = grid.face_centers(1)
    q = VectorField(grid, (np.zeros(grid.shape), np.sin(2 * np.pi * x)))
    fc = solve_flux_corrector(q)
    m0 = np.arange(grid.n)[:, None] * np.ones(grid.n)
    expected = np.cos(2 * np.pi * m0 * h) * h / (2 * np.sin(np.pi * h))
    assert np.max(np.abs(fc.sigma.component(0, 1) - expected)) < 1e-10
    assert divergence_identity_check(fc.sigma, q) < 1e-10


def test_massive_correctors_converge(random_coef):
    rows = massive_convergence(random_coef, 0, [1.0, 10.0, 100.0])
    errors = [err for _, err in rows]
    assert errors[0] > errors[1] > errors[2]


@pytest.mark.parametrize("T", [0.0, -1.0])
def test_non_positive_t_rejected(random_coef, T):
    with pytest.raises(InvalidInputError):
        solve_corrector(random_coef, 0, T=T)


def test_direction_out_of_range(random_coef):
    with pytest.raises(InvalidInputError):
        solve_corrector(random_coef, 2)


def test_moments_of_zero_correctors():
    coef = CoefficientSet.constant(GridSpec(2, 8), a=2.0)
    zeros = [CorrectorSet.zeros(coef)] * 8
    report = moment_diagnostics({0.5: zeros, 0.25: zeros})
    assert report.rows[0].epsilon == 0.5
    assert report.rows[0].phi2 == 0.0
    assert report.rows[0].phi_p is None
    assert report.slopes["phi2"] is None
    assert any("identically zero" in note for note in report.notes)
    assert report.to_record()["rows"][1]["epsilon"] == 0.25


def test_moments_need_enough_samples():
    coef = CoefficientSet.constant(GridSpec(2, 8), a=2.0)
    with pytest.raises(InvalidInputError):
        moment_diagnostics({0.5: [CorrectorSet.zeros(coef)] * 3})


def test_derivative_ratio_is_finite():
    grid = GridSpec(2, 32)
    param = sample_parameter_field(CovarianceSpec("squared-exponential", 0.125), grid, 2)
    ratio = parameter_derivative_ratio(
        param, CoefficientMap(4.0, 0.5, 1.25), 0, [0.5, 0.5], 0.125
    )
    assert np.isfinite(ratio) and ratio > 0


def test_sublinearity_trend_skips_empty_balls(random_coef):
    phi = solve_corrector(random_coef, 0).phi
    rows = sublinearity_trend(phi, [1e-4, 0.1, 0.3])
    assert [r for r, _ in rows] == [0.1, 0.3]
    assert all(v >= 0 for _, v in rows)


def _ensemble(eps, M, seed=2024):
    from homlab.experiments import resolution
    from homlab.field import CoefficientSampler, FieldSampler

    n, _ = resolution(eps, 1.0, 128)
    source = CoefficientSampler(
        FieldSampler(CovarianceSpec("squared-exponential", eps), GridSpec(3, n), seed),
        CoefficientMap(4.0, 0.5, 1.25),
    )
    return [solve_correctors(source(k)) for k in range(M)]


@pytest.mark.slow
def test_moment_scaling_in_three_dimensions():
    report = moment_diagnostics({eps: _ensemble(eps, 8) for eps in (1 / 4, 1 / 8, 1 / 16)})
    assert 1.5 <= report.slopes["phi2"].slope <= 2.5
    assert 1.5 <= report.slopes["sigma2"].slope <= 2.5


def test_derivative_ratio_is_bounded_across_samples():
    grid = GridSpec(2, 32)
    cov = CovarianceSpec("squared-exponential", 0.125)
    coef_map = CoefficientMap(4.0, 0.5, 1.25)
    ratios = [
        parameter_derivative_ratio(
            sample_parameter_field(cov, grid, seed), coef_map, 0, [0.5, 0.5], 0.125
        )
        for seed in range(8)
    ]
    assert all(np.isfinite(r) and r > 0 for r in ratios)
    assert max(ratios) <= 10.0
