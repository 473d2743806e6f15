import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import Polynomial

from birthdeath._quadrature import integrate
from birthdeath.asymptotics import (build_potential, kramers_time, laplace_log_max,
                                    laplace_log_min, lemma_coefficients, lemma_sum,
                                    mfpt_asymptotic, phi0, phi0_prime, phi0_second, phi1,
                                    phi1_prime)
from birthdeath.errors import PreconditionError, SingularIntegrandError
from birthdeath.exact import exact_potential, mfpt_exact_right, stationary_distribution
from birthdeath.model import (binomial, build_expansion, expansion_from_coefficients,
                              find_fixed_points, keizer_regularized, poisson, schlogl)

SCHLOGL = schlogl()
SCHLOGL_EXP = build_expansion(SCHLOGL)
SCHLOGL_POT = build_potential(SCHLOGL_EXP, 3.5)


# summation lemma ------------------------------------------------------------

def test_lemma_coefficients_are_bernoulli_over_factorial():
    nu = lemma_coefficients(6)
    assert nu[:4] == (Fraction(-1, 2), Fraction(1, 12), Fraction(0), Fraction(-1, 720))
    assert nu[5] == Fraction(1, 30240)


def test_lemma_constant_function():
    assert lemma_sum(lambda z: 1.0, None, None, 0.7, 10) == pytest.approx(0.7, abs=1e-14)


def test_lemma_square():
    value = lemma_sum(lambda z: z * z, None, None, 1.0, 10, dF0=lambda z: 2 * z)
    assert value == pytest.approx(0.285, abs=1e-12)
    assert 9 * 10 * 19 / 6000 == pytest.approx(0.285)


def test_lemma_linear():
    assert lemma_sum(lambda z: z, None, None, 1.0, 4) == pytest.approx(0.375, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=1, max_size=3), st.integers(1, 40), st.integers(1, 5))
def test_lemma_exact_for_quadratics(coefs, V, whole):
    # for polynomials of degree <= 2 the three-term expansion is exact
    poly = Polynomial(coefs)
    x = whole / V * max(1, V // whole)
    n_terms = round(x * V)
    direct = sum(poly(l / V) for l in range(n_terms)) / V
    value = lemma_sum(poly, None, None, n_terms / V, V, dF0=poly.deriv())
    assert value == pytest.approx(direct, abs=1e-10)


def test_lemma_with_first_order_term():
    F0, F1 = (lambda z: math.exp(z)), (lambda z: z)
    for V in (20, 40):
        direct = sum(F0(l / V) + F1(l / V) / V for l in range(V)) / V
        assert lemma_sum(F0, F1, None, 1.0, V) == pytest.approx(direct, abs=2 / V ** 3)


# potentials ------------------------------------------------------------------

def test_poisson_phi0_closed_form():
    exp = build_expansion(poisson(1, 2))
    # phi0 is pinned to 0 at x = 0; measured from the minimum at 0.5 instead
    assert phi0(exp, 1.0) - phi0(exp, 0.5) == pytest.approx(0.193147, abs=1e-6)
    assert phi0(exp, 0.5) - phi0(exp, 0.5) == 0.0
    xs = np.linspace(0.05, 2, 9)
    closed = xs * np.log(xs / 0.5) - xs
    np.testing.assert_allclose([phi0(exp, x) for x in xs], closed, atol=1e-10)


def test_poisson_phi1_slope():
    exp = build_expansion(poisson(1, 2))
    xs = np.linspace(0.1, 2.0, 7)
    np.testing.assert_allclose(phi1_prime(exp, xs), 1 / (2 * xs), rtol=1e-12)
    assert phi1(exp, 1.0) - phi1(exp, 0.5) == pytest.approx(0.5 * math.log(2), abs=1e-10)


def test_binomial_phi0_minimum():
    exp = build_expansion(binomial(1, 1, 1))
    assert phi0_prime(exp, 0.5) == pytest.approx(0.0, abs=1e-14)
    closed = lambda x: math.log((1 - x)) - x * math.log((1 - x) / x)
    for x in (0.2, 0.5, 0.8):
        # both are fixed to 0 at x = 0
        assert phi0(exp, x) == pytest.approx(closed(x), abs=1e-10)


def test_flat_model_phi1_difference_vanishes():
    exp = expansion_from_coefficients([2.0], [2.0])
    assert phi1(exp, 1.7) - phi1(exp, 0.3) == pytest.approx(0.0, abs=1e-14)


def test_regularized_keizer_phi1_matches_exact():
    model = keizer_regularized()
    exp = build_expansion(model)
    V = 10_000
    pot = exact_potential(stationary_distribution(model, V))
    i1, i2 = V, V // 2
    exact_gap = pot.phi[i1] - pot.phi[i2]
    leading_gap = phi0(exp, 1.0) - phi0(exp, 0.5)
    predicted = phi1(exp, 1.0) - phi1(exp, 0.5)
    assert V * (exact_gap - leading_gap) == pytest.approx(predicted, abs=5e-3)


def test_singular_integrand_reports_location():
    # death rate vanishes at x = 1
    exp = expansion_from_coefficients([1.0], [1.0, -1.0])
    with pytest.raises(SingularIntegrandError, match="1"):
        phi0(exp, 1.5)


def test_potential_grid_slope_and_curvature():
    xs = np.linspace(0.1, 3.4, 50)
    slope = SCHLOGL_POT._phi0.derivative()(xs)
    np.testing.assert_allclose(slope, phi0_prime(SCHLOGL_EXP, xs), atol=1e-10)
    for fp in find_fixed_points(SCHLOGL_EXP, 0.01, 3.4):
        x = fp.location
        assert phi0_prime(SCHLOGL_EXP, x) == pytest.approx(0.0, abs=1e-12)
        curvature = -SCHLOGL_EXP.b_prime(x) / SCHLOGL_EXP.lambda0(x)
        assert phi0_second(SCHLOGL_EXP, x) == pytest.approx(curvature, abs=1e-8)


def test_hu_residual_vanishes():
    xs = np.linspace(0.05, 3.4, 200)
    slope = phi0_prime(SCHLOGL_EXP, xs)
    mu, lam = SCHLOGL_EXP.mu0(xs), SCHLOGL_EXP.lambda0(xs)
    residual = mu * (np.exp(slope) - 1) + lam * (np.exp(-slope) - 1)
    assert np.max(np.abs(residual)) < 1e-12


def _consistency_error(model, V, xs):
    pot = exact_potential(stationary_distribution(model, V))
    grid = build_potential(build_expansion(model), xs[-1] + 0.1)
    idx = np.rint(xs * V).astype(int)
    gap = pot.phi[idx] - grid.phi(idx / V, V)
    return np.max(np.abs(gap - gap.mean()))


@pytest.mark.parametrize("model,xs", [
    (poisson(), np.linspace(0.2, 1.2, 11)),
    (SCHLOGL, np.linspace(0.2, 3.0, 15)),
    (keizer_regularized(), np.linspace(0.2, 2.0, 10)),
])
def test_potential_error_is_second_order(model, xs):
    e100, e200, e400 = (_consistency_error(model, V, xs) for V in (100, 200, 400))
    assert 2.5 <= e100 / e200 <= 6
    assert 2.5 <= e200 / e400 <= 6


# passage times ----------------------------------------------------------------

def test_asymptotic_mfpt_on_schlogl():
    V = 60
    exact = mfpt_exact_right(SCHLOGL, V, 24, 78)
    approx = mfpt_asymptotic(SCHLOGL_EXP, SCHLOGL_POT, V, 0.4, 1.3)
    assert abs(approx / exact - 1) < 0.2


def test_asymptotic_mfpt_degenerate():
    assert mfpt_asymptotic(SCHLOGL_EXP, SCHLOGL_POT, 60, 0.7, 0.7) == 0.0


@pytest.mark.xfail(strict=True, reason="the continuum integral gives about half the exact time "
                   "when the target sits where phi0 is steep on the lattice scale")
def test_asymptotic_mfpt_on_poisson():
    model = poisson(1, 2)
    exp = build_expansion(model)
    pot = build_potential(exp, 1.5)
    exact = mfpt_exact_right(model, 200, 100, 200)
    assert abs(mfpt_asymptotic(exp, pot, 200, 0.5, 1.0) / exact - 1) < 0.1


def test_kramers_converges_monotonically():
    errors = []
    for V in (50, 100, 200, 400):
        exact = mfpt_exact_right(SCHLOGL, V, round(0.4 * V), round(1.3 * V))
        errors.append(abs(kramers_time(SCHLOGL_EXP, V, 0.4, 1.0, SCHLOGL_POT).time / exact - 1))
    assert all(a > b for a, b in zip(errors, errors[1:]))


def test_kramers_needs_the_correction_term():
    V = 200
    exact = mfpt_exact_right(SCHLOGL, V, 80, 260)
    est = kramers_time(SCHLOGL_EXP, V, 0.4, 1.0, SCHLOGL_POT)
    assert abs(est.time / exact - 1) < abs(est.time_leading_only / exact - 1)
    assert est.bistability_class == "nonlinear"
    assert est.barrier_leading > 0


def test_kramers_quadrature_and_grid_agree():
    with_grid = kramers_time(SCHLOGL_EXP, 100, 0.4, 1.0, SCHLOGL_POT).time
    direct = kramers_time(SCHLOGL_EXP, 100, 0.4, 1.0).time
    assert with_grid == pytest.approx(direct, rel=1e-8)


def test_kramers_and_integral_converge():
    ratios = [kramers_time(SCHLOGL_EXP, V, 0.4, 1.0, SCHLOGL_POT).time
              / mfpt_asymptotic(SCHLOGL_EXP, SCHLOGL_POT, V, 0.4, 1.3) for V in (50, 100, 200)]
    gaps = [abs(r - 1) for r in ratios]
    assert gaps[0] > gaps[1] > gaps[2]


def test_kramers_symmetric_double_well():
    lam = Polynomial([1.0]) + Polynomial([-1.0, 1.0]) ** 3 - 0.25 * Polynomial([-1.0, 1.0])
    mirror = Polynomial([2.0, -1.0])
    mu = lam(mirror)
    exp = expansion_from_coefficients(mu.coef, lam.coef)
    right = kramers_time(exp, 80, 0.5, 1.0)
    left = kramers_time(exp, 80, 1.5, 1.0)
    assert right.time == pytest.approx(left.time, rel=1e-9)


def test_kramers_rejects_wrong_curvatures():
    with pytest.raises(PreconditionError):
        kramers_time(SCHLOGL_EXP, 100, 1.0, 0.4)


# Laplace forms ---------------------------------------------------------------

def _oracle(phi, V, x):
    shift = min(phi(y) for y in np.linspace(0, x, 2001))
    value = integrate(lambda y: math.exp(-V * (phi(y) - shift)), 0, x, epsabs=0, epsrel=1e-12)[0]
    return -shift + math.log(value) / V


def test_laplace_gaussian():
    phi = lambda y: (y - 0.5) ** 2
    V = 400
    value = laplace_log_min(phi, V, 1.0, dphi=lambda y: 2 * (y - 0.5), d2phi=lambda y: 2.0)
    closed = math.log(2 * math.pi / (V * 2)) / (2 * V)
    assert value == pytest.approx(closed, abs=5 / V ** 2)
    assert value == pytest.approx(_oracle(phi, V, 1.0), abs=5 / V ** 2)


def test_laplace_enthalpic_branch():
    phi = lambda y: (y - 0.5) ** 2
    V = 400
    value = laplace_log_min(phi, V, 0.2, domain_max=1.0)
    assert value == pytest.approx(_oracle(phi, V, 0.2), abs=5 / V ** 2)
    slope, curvature = -0.6, 2.0
    endpoint = -phi(0.2) - math.log(V * abs(slope)) / V - curvature / (V * slope ** 2) / V
    assert value == pytest.approx(endpoint, abs=1e-12)


@pytest.mark.parametrize("x", [0.48, 0.5, 0.53])
def test_laplace_inside_layer(x):
    phi = lambda y: (y - 0.5) ** 2 + 0.3 * (y - 0.5) ** 3
    V = 400
    assert laplace_log_min(phi, V, x, domain_max=1.0) == pytest.approx(_oracle(phi, V, x),
                                                                       abs=1 / V)


def test_laplace_large_deviation_limit():
    phi = lambda y: (y - 0.5) ** 2 + 0.1
    values = [laplace_log_min(phi, V, 1.0) for V in (10, 100, 1000, 10_000)]
    gaps = [abs(v + 0.1) for v in values]
    assert gaps == sorted(gaps, reverse=True) and gaps[-1] < 1e-3


@pytest.mark.parametrize("x", [0.2, 0.5, 0.7, 1.0])
def test_laplace_max(x):
    phi = lambda y: 0.3 - (y - 0.5) ** 2 + 0.5 * y
    V = 200
    assert laplace_log_max(phi, V, x, domain_max=1.0) == pytest.approx(_oracle(phi, V, x),
                                                                       abs=5 / V ** 2)


def test_laplace_multiple_minima_rejected():
    phi = lambda y: math.cos(12 * y)
    with pytest.raises(PreconditionError):
        laplace_log_min(phi, 100, 1.5)
