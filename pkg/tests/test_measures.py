"""Measures layer: integration, normalization, exact products."""
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from urnlab.measures import (
    AtomicMeasure,
    ConstantFunction,
    CountingMeasure,
    DensityMeasure,
    EmptyMeasureError,
    FuncTestFunction,
    PiecewisePolynomial,
    TagFunction,
    UnsupportedPairError,
    integrate,
    linear_combination,
    measure_integrate,
    normalize,
    product,
)


def test_integrate_point_atoms_with_indicator():
    nu = CountingMeasure([(0.2, 2), (0.7, 1)])
    f = PiecewisePolynomial.indicator(0.0, 0.5)
    assert integrate(nu, f) == 2.0


def test_integrate_zero_function():
    nu = CountingMeasure([(0.3, 4), (0.9, 1)])
    assert integrate(nu, ConstantFunction(0)) == 0.0


def test_integrate_tag_table():
    nu = CountingMeasure([(0, 3), (1, 4)])
    f = TagFunction([1, -1])
    assert integrate(nu, f) == -1.0


def test_integrate_one_equals_total():
    nu = CountingMeasure([(0, 3), (1, 4), (2, 9)])
    assert integrate(nu, ConstantFunction(1)) == nu.total


def test_normalize_examples():
    assert dict(normalize(CountingMeasure([(0, 1), (1, 3)]))) == {0: 0.25, 1: 0.75}
    assert dict(normalize(CountingMeasure([(0, 5)]))) == {0: 1.0}
    assert dict(normalize(CountingMeasure([(0.1, 2), (0.9, 2)]))) == {0.1: 0.5, 0.9: 0.5}


def test_normalize_weights_sum_to_one():
    nu = CountingMeasure([(i, i + 1) for i in range(7)])
    weights = [w for _, w in normalize(nu)]
    assert abs(math.fsum(weights) - 1.0) < 1e-15
    assert all(0.0 <= w <= 1.0 for w in weights)


def test_normalize_empty_measure_errors():
    with pytest.raises(EmptyMeasureError):
        normalize(CountingMeasure())


def test_counting_measure_invariants():
    nu = CountingMeasure([(0, 2)])
    nu.add(0, -2)
    assert nu.total == 0 and len(nu) == 0
    with pytest.raises(ValueError):
        nu.add(1, -1)


def test_measure_integrate_scaled_lebesgue_indicator():
    # innovation intensity of the p=0.4 copy-or-innovate kernel
    mu = DensityMeasure.lebesgue(1.0 - 0.4)
    f = PiecewisePolynomial.indicator(0.0, 0.5)
    assert measure_integrate(mu, f) == pytest.approx(0.3, abs=1e-15)


def test_measure_integrate_atomic_total_mass():
    mu = AtomicMeasure([(0, 0.5), (1, 0.5)])
    assert measure_integrate(mu, ConstantFunction(1)) == 1.0


def test_measure_integrate_uniform_first_moment():
    mu = DensityMeasure.lebesgue(1.0)
    f = PiecewisePolynomial.polynomial([0.0, 1.0])
    assert measure_integrate(mu, f) == pytest.approx(0.5, abs=1e-15)


def test_measure_integrate_atomic_exact_rationals():
    mu = AtomicMeasure([(0, Fraction(1, 3)), (1, Fraction(2, 3))])
    f = TagFunction([Fraction(1), Fraction(-1)])
    assert measure_integrate(mu, f) == Fraction(-1, 3)


def test_measure_integrate_declared_integral_fallback():
    mu = DensityMeasure.lebesgue(2.0)
    f = FuncTestFunction(lambda s: math.sin(s), sup_bound=1.0,
                        mu_integral=2.0 * (1 - math.cos(1.0)))
    assert measure_integrate(mu, f) == pytest.approx(2.0 * (1 - math.cos(1.0)))


def test_measure_integrate_unsupported_pair():
    mu = DensityMeasure.lebesgue(1.0)
    f = FuncTestFunction(lambda s: math.sin(s), sup_bound=1.0)
    with pytest.raises(UnsupportedPairError):
        measure_integrate(mu, f)


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_integrate_linearity(alpha, beta):
    nu = CountingMeasure([(0.1, 1), (0.4, 2), (0.8, 3)])
    f = PiecewisePolynomial.indicator(0.0, 0.5)
    g = PiecewisePolynomial.polynomial([1.0, -2.0, 0.5])
    combo = linear_combination(alpha, f, beta, g)
    lhs = integrate(nu, combo)
    rhs = alpha * integrate(nu, f) + beta * integrate(nu, g)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_product_of_indicators():
    f = PiecewisePolynomial.indicator(0.0, 0.5)
    g = PiecewisePolynomial.indicator(0.25, 0.75)
    fg = product(f, g)
    assert fg.lebesgue_integral() == pytest.approx(0.25, abs=1e-15)
    for s in (0.1, 0.3, 0.6, 0.9):
        assert fg(s) == f(s) * g(s)


def test_product_of_polynomials():
    f = PiecewisePolynomial.polynomial([0.0, 1.0])   # s
    g = PiecewisePolynomial.polynomial([0.0, 0.0, 1.0])  # s^2
    fg = product(f, g)
    assert fg.lebesgue_integral() == pytest.approx(0.25, abs=1e-15)  # int s^3


def test_product_mixed_families_errors():
    f = PiecewisePolynomial.indicator(0.0, 0.5)
    g = TagFunction([1, 2])
    with pytest.raises(UnsupportedPairError):
        product(f, g)


def test_piecewise_eval_boundaries():
    f = PiecewisePolynomial.indicator(0.25, 0.5)
    assert f(0.25) == 1.0 and f(0.5) == 0.0  # half-open pieces
    assert f(0.0) == 0.0 and f(1.0) == 0.0
    g = PiecewisePolynomial.indicator(0.5, 1.0)
    assert g(1.0) == 1.0  # right-closed at the top


def test_density_measure_normalization():
    mu = DensityMeasure.lebesgue(0.7)
    mu_bar = mu.normalized()
    assert mu_bar.total_mass == pytest.approx(1.0, abs=1e-15)
    f = PiecewisePolynomial.indicator(0.0, 0.25)
    assert measure_integrate(mu_bar, f) == pytest.approx(0.25, abs=1e-14)


def test_atomic_normalized_keeps_rationals():
    mu = AtomicMeasure([(0, Fraction(1, 2)), (1, Fraction(1, 4))])
    mu_bar = mu.normalized()
    assert mu_bar.total_mass == 1
    assert dict(mu_bar.pairs)[0] == Fraction(2, 3)
