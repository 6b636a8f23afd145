import numpy as np
import pytest
from scipy.sparse.linalg import LinearOperator

from homlab._errors import InvalidInputError, NonConvergenceError, PecletWarning
from homlab.calculus import (
    PERIODIC,
    BoundaryCondition,
    ScalarField,
    VectorField,
    _krylov,
    apply_homogenized,
    apply_operator,
    divergence,
    energy_form,
    face_inner,
    gradient,
    inner,
    norm,
    seminorm_h1,
    sobolev_exponent,
    solve,
    spectral_inverse,
)
from homlab.fitting import fit_slope
from homlab.field import (
    CoefficientMap,
    CoefficientSet,
    CovarianceSpec,
    GridSpec,
    sample_parameter_field,
)


@pytest.fixture
def grid():
    return GridSpec(2, 32)


@pytest.fixture
def random_coef(grid):
    param = sample_parameter_field(CovarianceSpec("squared-exponential", 0.125), grid, 11)
    return CoefficientMap(4.0, 0.5, 1.25, (1.0, 0.5))(param)


def _random_scalar(grid, seed=0):
    return ScalarField(grid, np.random.default_rng(seed).standard_normal(grid.shape))


def test_summation_by_parts(grid):
    rng = np.random.default_rng(1)
    u = _random_scalar(grid)
    F = VectorField(grid, tuple(rng.standard_normal(grid.shape) for _ in range(2)))
    lhs = inner(u, divergence(F))
    rhs = -face_inner(gradient(u), F)
    assert lhs == pytest.approx(rhs, abs=1e-12 * max(1.0, abs(lhs)))


def test_gradient_of_constant_vanishes(grid):
    g = gradient(ScalarField(grid, np.full(grid.shape, 3.0)))
    assert all(np.all(c == 0) for c in g.components)


def test_scalar_field_shape_is_checked(grid):
    with pytest.raises(InvalidInputError):
        ScalarField(grid, np.zeros((4, 4)))


@pytest.mark.parametrize("dirichlet", [False, True])
def test_homogenized_operator_matches_constant_heterogeneous(grid, dirichlet):
    coef = CoefficientSet.constant(grid, a=2.0, b=[0.3, -0.2])
    bc = BoundaryCondition.dirichlet(grid, 0.5) if dirichlet else PERIODIC
    u = _random_scalar(grid, 2)
    hetero = apply_operator(coef, u, bc).values
    homog = apply_homogenized(2.0 * np.eye(2), [0.3, -0.2], coef.Lambda, u, bc).values
    assert np.allclose(hetero, homog, atol=1e-10)


def test_mixed_derivative_is_second_order():
    grid = GridSpec(2, 64)
    x, y = grid.cell_centers()
    u = ScalarField(grid, np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y))
    a_bar = np.array([[1.0, 0.5], [0.5, 1.0]])
    out = apply_homogenized(a_bar, [0.0, 0.0], 0.0, u).values
    exact = 8 * np.pi**2 * u.values - 4 * np.pi**2 * np.cos(2 * np.pi * x) * np.cos(
        2 * np.pi * y
    )
    assert np.max(np.abs(out - exact)) < 1e-2 * np.max(np.abs(exact))


def test_periodic_solve_recovers_field(random_coef, grid):
    x, y = grid.cell_centers()
    u = ScalarField(grid, np.sin(2 * np.pi * x) * np.cos(4 * np.pi * y))
    f = apply_operator(random_coef, u)
    result = solve(random_coef, f)
    assert np.max(np.abs(result.u.values - u.values)) < 1e-6
    assert result.residual <= 1e-10 * (1 + 1e-6)
    assert result.iterations > 0


def test_dirichlet_solve_recovers_field(random_coef, grid):
    bc = BoundaryCondition.dirichlet(grid, lambda x, y: x + y**2)
    u = _random_scalar(grid, 5)
    f = apply_operator(random_coef, u, bc)
    result = solve(random_coef, f, bc)
    assert np.max(np.abs(result.u.values - u.values)) < 1e-6


def test_dirichlet_data_must_be_finite(grid):
    with pytest.raises(InvalidInputError):
        BoundaryCondition.dirichlet(grid, np.nan)


def test_solve_rejects_lost_coercivity(grid):
    coef = CoefficientSet.constant(grid, a=1.0, b=[1.0, 0.0], Lambda=1.5)
    with pytest.raises(InvalidInputError):
        solve(coef, _random_scalar(grid))


def test_zero_rhs_gives_zero_solution(random_coef, grid):
    result = solve(random_coef, ScalarField(grid, np.zeros(grid.shape)))
    assert np.all(result.u.values == 0)
    assert result.iterations == 0


def test_energy_witness_holds(random_coef, grid):
    for seed in range(5):
        witness = energy_form(random_coef, _random_scalar(grid, seed))
        assert witness.holds
        assert witness.form > 0


def test_spectral_inverse_inverts_massive_laplacian(grid):
    rhs = np.random.default_rng(3).standard_normal(grid.shape)
    x = spectral_inverse(rhs, grid, mass=1.0)
    coef = CoefficientSet.constant(grid, a=1.0, Lambda=1.0)
    back = apply_operator(coef, ScalarField(grid, x)).values
    assert np.allclose(back, rhs, atol=1e-10)


def test_spectral_inverse_massless_is_mean_zero(grid):
    rhs = np.random.default_rng(4).standard_normal(grid.shape) + 2.0
    x = spectral_inverse(rhs, grid)
    assert abs(x.mean()) < 1e-12
    coef = CoefficientSet.constant(grid, a=1.0, Lambda=1.0)
    back = apply_operator(coef, ScalarField(grid, x)).values - x
    assert np.allclose(back, rhs - rhs.mean(), atol=1e-10)


def test_krylov_reports_non_convergence(random_coef, grid):
    size = grid.size
    op = LinearOperator(
        (size, size),
        matvec=lambda v: apply_operator(
            random_coef, ScalarField(grid, v.reshape(grid.shape))
        ).values.ravel(),
        dtype=float,
    )
    rhs = np.random.default_rng(6).standard_normal(size)
    with pytest.raises(NonConvergenceError) as info:
        _krylov(op, rhs, method="bicgstab", tol=1e-12, maxiter=1)
    assert info.value.history


def test_norms_of_constant():
    grid = GridSpec(2, 16)
    u = ScalarField(grid, np.full(grid.shape, 2.0))
    assert norm(u) == pytest.approx(2.0)
    assert norm(u, np.inf) == 2.0
    assert seminorm_h1(u) == 0.0
    with pytest.raises(InvalidInputError):
        norm(u, "sobolev")


@pytest.mark.parametrize("p", [1.0, 0.5, 4.0, 6.0])
def test_norm_rejects_unsupported_exponents(p):
    u = ScalarField(GridSpec(2, 8), np.ones((8, 8)))
    with pytest.raises(InvalidInputError):
        norm(u, p)


def test_sobolev_norm_in_three_dimensions():
    grid = GridSpec(3, 8)
    u = ScalarField(grid, np.ones(grid.shape))
    assert norm(u, 6.0) == pytest.approx(1.0)
    assert norm(u, "sobolev") == pytest.approx(1.0)
    half = ScalarField(grid, (np.arange(8) < 4)[:, None, None] * np.ones(grid.shape))
    assert norm(half) == pytest.approx(np.sqrt(0.5))
    with pytest.raises(InvalidInputError):
        norm(u, 3.0)


def test_sobolev_exponent():
    assert sobolev_exponent(3) == 6.0
    with pytest.raises(InvalidInputError):
        sobolev_exponent(2)


def test_peclet_warning_on_coarse_grid():
    grid = GridSpec(1, 4)
    coef = CoefficientSet.constant(grid, a=1.0, b=[10.0])
    with pytest.warns(PecletWarning):
        out = apply_operator(coef, ScalarField(grid, np.ones(4)))
    assert len(out.warnings) == 1
    assert out.warnings[0].source == "calculus.apply_operator"
    assert out.warnings[0].value == pytest.approx(1.25)


def test_fine_grid_has_no_peclet_record(random_coef, grid):
    assert apply_operator(random_coef, _random_scalar(grid)).warnings == []


def _sine(n):
    grid = GridSpec(2, n)
    x, _ = grid.cell_centers()
    return grid, ScalarField(grid, np.sin(2 * np.pi * x))


@pytest.mark.parametrize("n", [16, 32, 64])
def test_gradient_of_sine_is_second_order(n):
    grid, u = _sine(n)
    g = gradient(u)
    xf, _ = grid.face_centers(0)
    err = np.max(np.abs(g.components[0] - 2 * np.pi * np.cos(2 * np.pi * xf)))
    # centered difference: 2 pi cos(2 pi x) sin(pi h) / (pi h)
    assert err <= 1.01 * 2 * np.pi * (np.pi * grid.h) ** 2 / 6 + 1e-12
    assert np.all(g.components[1] == 0)


@pytest.mark.parametrize("n", [16, 32, 64])
def test_laplacian_of_sine_matches_symbol(n):
    grid, u = _sine(n)
    coef = CoefficientSet.constant(grid, a=1.0, Lambda=0.0)
    out = apply_operator(coef, u).values
    symbol = 4 / grid.h**2 * np.sin(np.pi * grid.h) ** 2
    assert np.allclose(out, symbol * u.values, atol=1e-9)
    err = np.max(np.abs(out - (2 * np.pi) ** 2 * u.values))
    assert err <= 1.01 * (2 * np.pi) ** 2 * (np.pi * grid.h) ** 2 / 3


def _sine_solve_error(n):
    grid, u = _sine(n)
    coef = CoefficientSet.constant(grid, a=1.0, Lambda=1.0)
    f = ScalarField(grid, (1 + (2 * np.pi) ** 2) * u.values)
    result = solve(coef, f, tol=1e-12)
    return grid, u, result.u


@pytest.mark.parametrize("n", [16, 32, 64])
def test_solve_matches_fourier_symbol(n):
    grid, u, uh = _sine_solve_error(n)
    symbol = 4 / grid.h**2 * np.sin(np.pi * grid.h) ** 2
    discrete = (1 + (2 * np.pi) ** 2) / (1 + symbol) * u.values
    assert np.max(np.abs(uh.values - discrete)) < 1e-8
    assert np.max(np.abs(uh.values - u.values)) <= (np.pi * grid.h) ** 2 * 2


def test_solve_error_decays_at_second_order():
    points = []
    for n in (16, 32, 64, 128):
        grid, u, uh = _sine_solve_error(n)
        points.append((grid.h, norm(ScalarField(grid, uh.values - u.values))))
    fit = fit_slope(points)
    assert fit.slope >= 1.8


@pytest.mark.parametrize("n", [64, 128])
def test_energy_witness_on_fine_grids(n):
    grid = GridSpec(2, n)
    param = sample_parameter_field(CovarianceSpec("squared-exponential", 0.125), grid, n)
    coef = CoefficientMap(4.0, 0.5, 1.25, (1.0, 0.5))(param)
    x, y = grid.cell_centers()
    fields = [_random_scalar(grid, seed) for seed in range(3)]
    fields.append(ScalarField(grid, np.sin(2 * np.pi * x) + np.cos(6 * np.pi * y)))
    for u in fields:
        witness = energy_form(coef, u)
        # c h slack with c = 1
        assert witness.form >= witness.lower_bound - grid.h * witness.u_sq
        assert witness.holds
