"""Spectral layer: eigenvalues, operator identities, covariance forms."""
import math
from fractions import Fraction

import numpy as np
import pytest

from urnlab.kernels import TableKernel, builtin_finite, builtin_simon
from urnlab.measures import (
    ConstantFunction,
    ONE,
    PiecewisePolynomial,
    TagFunction,
    linear_combination,
    measure_integrate,
)
from urnlab.spectral import (
    CovarianceForm,
    InexactIntegralError,
    SpectralError,
    apply_R,
    bridge_covariance,
    limit_covariance,
    sigma_sq,
    spectral_constants,
)

IND = PiecewisePolynomial.indicator


@pytest.fixture
def uniform_two_color():
    return builtin_finite(2, [(1, 1)],
                          [[(Fraction(1, 2), [0]), (Fraction(1, 2), [1])]] * 2)


def test_constants_simon():
    c = spectral_constants(builtin_simon(0.4))
    assert c.lambda1 == pytest.approx(1.0, abs=1e-15)
    assert c.lambda2 == 0.4
    assert float(c.rho) == pytest.approx(0.4, abs=1e-15)


def test_constants_two_color(uniform_two_color):
    c = spectral_constants(uniform_two_color)
    assert c.lambda1 == 2 and c.lambda2 == 1
    assert c.rho == Fraction(1, 2)


def test_constants_pure_innovation():
    k = builtin_finite(2, [(1, 0)], [[(1, [0])], [(1, [0])]])
    c = spectral_constants(k)
    assert c.lambda1 == 1 and c.lambda2 == 0 and c.rho == 0


def test_lambda_gap_identity():
    for kernel in (builtin_simon(0.2), builtin_simon(0.9),
                   builtin_finite(3, [(1, 2)], [[(1, [0])]] * 3)):
        c = spectral_constants(kernel)
        assert abs(float(c.lambda1 - c.lambda2 - c.mu_a)) < 1e-12


def test_apply_R_modulation_eigenfunction(uniform_two_color):
    c = spectral_constants(uniform_two_color)
    ra = apply_R(uniform_two_color, uniform_two_color.modulation)
    for s in range(2):
        assert ra(s) == c.lambda1 * uniform_two_color.modulation(s)


def test_apply_R_centered_eigenfunction(uniform_two_color):
    f = TagFunction([1, -1])  # mu(f) = 0
    rf = apply_R(uniform_two_color, f)
    for s in range(2):
        assert rf(s) == uniform_two_color.lambda2 * f(s)


def test_apply_R_simon_constant_one():
    k = builtin_simon(0.4)
    r1 = apply_R(k, ConstantFunction(1))
    for s in (0.0, 0.25, 0.8, 1.0):
        assert r1(s) == pytest.approx(1.0, abs=1e-15)


def test_apply_R_pointwise_identities_at_probe_colors():
    k = builtin_simon(0.35)
    c = spectral_constants(k)
    probes = np.linspace(0.0, 1.0, 1000)
    ra = apply_R(k, k.modulation)
    for s in probes:
        assert abs(ra(float(s)) - float(c.lambda1) * k.modulation(s)) \
            <= 1e-12 * abs(float(c.lambda1))
    f = linear_combination(1, IND(0.0, 0.5), -1, IND(0.5, 1.0))  # mu(f) = 0
    rf = apply_R(k, f)
    for s in probes:
        expect = float(c.lambda2) * f(float(s))
        assert abs(rf(float(s)) - expect) <= 1e-12 * max(1.0, abs(expect))


def test_apply_R_integral_identity():
    k = builtin_simon(0.45)
    c = spectral_constants(k)
    for f in (IND(0.0, 0.3), PiecewisePolynomial.polynomial([1.0, 2.0]),
              ConstantFunction(3)):
        rf = apply_R(k, f)
        mu_rf = measure_integrate(k.intensity, rf)
        mu_f = measure_integrate(k.intensity, f)
        assert mu_rf == pytest.approx(float(c.lambda1) * mu_f, rel=1e-12)


def test_apply_R_inexact_integral_error():
    from urnlab.measures import FuncTestFunction

    k = builtin_simon(0.4)
    f = FuncTestFunction(lambda s: math.sin(s), sup_bound=1.0)
    with pytest.raises(InexactIntegralError):
        apply_R(k, f)


def test_sigma_sq_simon_indicator():
    k = builtin_simon(0.4)
    assert sigma_sq(k, IND(0.0, 0.25)) == pytest.approx(0.25, abs=1e-15)


def test_sigma_sq_zero_function():
    assert sigma_sq(builtin_simon(0.6), ConstantFunction(0)) == 0.0


def test_sigma_sq_two_color_difference(uniform_two_color):
    f = TagFunction([1, -1])
    assert sigma_sq(uniform_two_color, f) == 2


def test_limit_covariance_diagonal_matches_sigma():
    k = builtin_simon(0.3)
    f = IND(0.0, 0.7)
    assert limit_covariance(k, f, f) == pytest.approx(sigma_sq(k, f), abs=1e-15)


def test_limit_covariance_disjoint_indicators_simon():
    k = builtin_simon(0.4)
    assert limit_covariance(k, IND(0.0, 0.5), IND(0.5, 1.0)) == pytest.approx(0.0, abs=1e-15)


def test_limit_covariance_single_atom_innovation(uniform_two_color):
    f = TagFunction([1, 0])
    g = TagFunction([0, 1])
    # single-ball innovation never hits both tags; mubar(fg) = 0
    assert limit_covariance(uniform_two_color, f, g) == 0


def test_bridge_variance_quarter_indicator():
    k = builtin_simon(0.3)
    x = 0.25
    assert bridge_covariance(k, IND(0.0, x), IND(0.0, x)) \
        == pytest.approx(x - x * x, abs=1e-15)


def test_bridge_of_one_vanishes():
    k = builtin_simon(0.45)
    for g in (IND(0.0, 0.3), ConstantFunction(2)):
        assert abs(bridge_covariance(k, ONE, g)) < 1e-10
        assert abs(bridge_covariance(k, g, ONE)) < 1e-10


def test_bridge_translation_invariance():
    k = builtin_simon(0.25)
    f = IND(0.0, 0.6)
    g = IND(0.2, 0.9)
    shifted = linear_combination(1, f, 1, ConstantFunction(3.5))
    assert bridge_covariance(k, shifted, g) \
        == pytest.approx(bridge_covariance(k, f, g), abs=1e-10)


def test_bridge_disjoint_halves():
    k = builtin_simon(0.3)
    assert bridge_covariance(k, IND(0.0, 0.5), IND(0.5, 1.0)) \
        == pytest.approx(-0.25, abs=1e-14)


def test_gram_matrix_psd():
    k = builtin_simon(0.4)
    fam = [IND(i / 8, (i + 1) / 8) for i in range(8)]
    form = CovarianceForm.closed_form(k)
    gram = form.gram(fam)
    assert np.allclose(gram, gram.T)
    eig = np.linalg.eigvalsh(gram)
    assert eig.min() >= -1e-9 * np.trace(gram)


def test_gram_matrix_psd_monte_carlo():
    k = builtin_simon(0.4)
    fam = [IND(0.0, 0.25), IND(0.25, 0.5), IND(0.0, 0.75),
           PiecewisePolynomial.polynomial([0.0, 1.0])]
    form = CovarianceForm.monte_carlo(k, 4000, seed=5)
    gram = form.gram(fam)
    eig = np.linalg.eigvalsh(gram)
    assert eig.min() >= -1e-9 * np.trace(gram)


def test_monte_carlo_sigma_matches_closed_form():
    k = builtin_simon(0.4)
    f = IND(0.0, 0.25)
    form = CovarianceForm.monte_carlo(k, 20_000, seed=9)
    est, se = form.sigma_sq(f)
    assert abs(est - 0.25) <= 4 * se


def test_monte_carlo_cov_matches_closed_form_finite(uniform_two_color):
    f = TagFunction([1, -1])
    form = CovarianceForm.monte_carlo(uniform_two_color, 20_000, seed=10)
    est, se = form.sigma_sq(f)
    assert abs(est - 2.0) <= 4 * max(se, 1e-12)


def test_constants_validation_rejects_bad_rho():
    # a kernel object with forged metadata violating lambda1 > lambda2
    k = builtin_simon(0.5)
    from urnlab.spectral import SpectralConstants

    with pytest.raises(SpectralError):
        SpectralConstants(lambda1=1.0, lambda2=0.5, rho=0.5, mu_a=-0.1,
                          mu_bar=k.intensity.normalized())
