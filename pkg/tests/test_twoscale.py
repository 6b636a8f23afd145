import numpy as np
import pytest

from homlab._errors import InvalidInputError
from homlab.corrector import solve_correctors
from homlab.field import (
    CoefficientMap,
    CoefficientSampler,
    CoefficientSet,
    CovarianceSpec,
    FieldSampler,
    FixedCoefficients,
    GridSpec,
    sample_parameter_field,
)
from homlab.manufactured import Bump, SineProduct
from homlab.twoscale import (
    corrector_product_norms,
    residual_scaling,
    sample_residuals,
    two_scale_expansion,
)


def _smooth_coef(n):
    grid = GridSpec(2, n)
    return CoefficientSet.from_functions(
        grid,
        lambda x, y: 2.0 + 0.5 * np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y),
        lambda x, y: (0.3 * np.cos(2 * np.pi * y), 0.2 * np.sin(2 * np.pi * x)),
        lam=3.0,
        K=0.5,
    )


def test_constant_coefficients_have_no_residuals():
    coef = CoefficientSet.constant(GridSpec(2, 16), a=2.0, b=[0.1, 0.2])
    res = sample_residuals(coef, SineProduct(2))
    assert res.norms["R"] == 0.0
    assert res.norms["r1"] == 0.0
    assert res.norms["r2"] < 1e-12
    assert res.identity_residual < 1e-9


def test_expansion_of_zero_correctors_is_profile():
    coef = CoefficientSet.constant(GridSpec(2, 16), a=2.0)
    cs = solve_correctors(coef)
    u0 = SineProduct(2)
    w = two_scale_expansion(u0, cs)
    assert np.array_equal(w.values, u0.sample(coef.grid).values)


def test_triangle_bounds_hold():
    grid = GridSpec(2, 32)
    param = sample_parameter_field(CovarianceSpec("squared-exponential", 0.125), grid, 8)
    coef = CoefficientMap(4.0, 0.5, 1.25, (1.0, 1.0))(param)
    res = sample_residuals(coef, Bump([0.5, 0.5], 0.3))
    assert res.triangle_bounds_hold
    assert set(res.to_row()) == {"R", "r1", "r2", "identity_residual"}


def test_identity_residual_shrinks_under_refinement():
    u0 = SineProduct(2)
    coarse = sample_residuals(_smooth_coef(32), u0).identity_residual
    fine = sample_residuals(_smooth_coef(64), u0).identity_residual
    assert fine <= 0.7 * coarse


def test_product_norm_ratios():
    coef = _smooth_coef(32)
    u0 = SineProduct(2)
    norms = corrector_product_norms(sample_residuals(coef, u0), u0)
    ratios = norms.ratios(0.5)
    assert set(ratios) == {"phi_hess", "phi_grad", "sigma_hess"}
    assert all(v >= 0 for v in ratios.values())


def test_scaling_of_constant_coefficients_is_exact_zero():
    grid = GridSpec(2, 16)
    source = FixedCoefficients(CoefficientSet.constant(grid, a=2.0))
    report = residual_scaling({0.5: source, 0.25: source}, SineProduct(2), 2, workers=1)
    assert report.exact_zero
    assert report.slope_R_r1 is None
    assert report.to_record()["exact_zero"] is True


def test_scaling_needs_two_scales():
    grid = GridSpec(2, 16)
    source = FixedCoefficients(CoefficientSet.constant(grid, a=2.0))
    with pytest.raises(InvalidInputError):
        residual_scaling({0.5: source}, SineProduct(2), 2)


def test_scaling_rows_are_complete():
    grid = GridSpec(2, 32)
    sources = {
        eps: CoefficientSampler(
            FieldSampler(CovarianceSpec("squared-exponential", eps), grid, 1),
            CoefficientMap(4.0, 0.5, 1.25),
        )
        for eps in (0.5, 0.25, 0.125)
    }
    report = residual_scaling(sources, SineProduct(2), 2, workers=1)
    assert len(report.rows) == 6
    assert list(report.means) == [0.5, 0.25, 0.125]
    assert report.slope_R_r1 is not None


@pytest.mark.slow
def test_residual_scaling_in_three_dimensions():
    from homlab.experiments import resolution

    sources = {}
    for eps in (1 / 4, 1 / 8, 1 / 16):
        n, _ = resolution(eps, 1.0, 128)
        sources[eps] = CoefficientSampler(
            FieldSampler(CovarianceSpec("squared-exponential", eps), GridSpec(3, n), 5),
            CoefficientMap(4.0, 0.5, 1.25),
        )
    report = residual_scaling(sources, SineProduct(3), 8)
    assert 0.7 <= report.slope_R_r1.slope <= 1.3
    assert report.slope_r2 is not None
    assert -0.3 <= report.slope_r2.slope <= 0.3
