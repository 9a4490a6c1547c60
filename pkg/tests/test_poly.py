import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sosroa.poly import (
    DimensionError,
    Polynomial,
    PolynomialParseError,
    VectorField,
    coeff_max_abs_diff,
    evaluate,
    gradient,
    grlex_key,
    lie_derivative,
    monomials_up_to,
    poly_add,
    poly_mul,
    poly_sub,
)

X1 = Polynomial.variable(2, 0)
X2 = Polynomial.variable(2, 1)
VDP = VectorField.parse(["-x2", "x1 + x2*(x1^2 - 1)"])


# -- evaluate ----------------------------------------------------------------


def test_zero_polynomial_evaluates_to_zero():
    assert evaluate(Polynomial.zero(2), [3.7, -2.0]) == 0.0


def test_univariate_square():
    p = Polynomial.parse("x1^2", 1)
    assert evaluate(p, [2.0]) == 4.0


def test_van_der_pol_component_at_one_one():
    assert VDP.components[1]([1.0, 1.0]) == 1.0


def test_evaluate_dimension_mismatch():
    with pytest.raises(DimensionError):
        evaluate(X1, [1.0, 2.0, 3.0])


def test_evaluate_many_matches_pointwise():
    p = Polynomial.parse("1 - 2*x1^2*x2 + x2^3 + 0.5*x1*x2")
    pts = np.random.default_rng(1).uniform(-2, 2, (50, 2))
    batch = p.evaluate_many(pts)
    for x, v in zip(pts, batch):
        assert v == pytest.approx(p.evaluate(list(x)), rel=1e-13, abs=1e-13)


# -- gradient ----------------------------------------------------------------


def test_gradient_of_squared_norm():
    g = gradient(X1**2 + X2**2)
    assert g[0] == X1 * 2 and g[1] == X2 * 2


def test_gradient_of_constant_is_zero():
    g = gradient(Polynomial.constant(2, 5.0))
    assert all(c.is_zero() for c in g) and len(g) == 2


def test_gradient_hand_example():
    g = gradient(X1**2 * X2)
    assert g[0] == X1 * X2 * 2
    assert g[1] == X1**2


# -- lie derivative ----------------------------------------------------------


def test_lie_derivative_of_norm_along_van_der_pol():
    got = lie_derivative(X1**2 + X2**2, VDP)
    assert got == Polynomial.parse("2*x1^2*x2^2 - 2*x2^2")


def test_lie_derivative_of_constant_is_zero():
    assert lie_derivative(Polynomial.constant(2, 3.0), VDP).is_zero()


def test_lie_derivative_linear_system():
    f = VectorField.parse(["-x1", "-x2"])
    assert lie_derivative(X1, f) == -X1


def test_lie_derivative_dimension_mismatch():
    with pytest.raises(DimensionError):
        lie_derivative(Polynomial.variable(3, 0), VDP)


# -- arithmetic --------------------------------------------------------------


def test_difference_of_squares():
    assert poly_mul(X1 + X2, X1 - X2) == X1**2 - X2**2


def test_self_subtraction_is_empty():
    p = Polynomial.parse("x1^3 - 4*x1*x2 + 7")
    d = poly_sub(p, p)
    assert d.is_zero() and d.terms == {}


def test_ball_polynomial():
    u = Polynomial.ball(2, 1.0)
    assert u == Polynomial.parse("1 - x1^2 - x2^2")
    assert Polynomial.ball(2, 2.0).coeff((0, 0)) == 4.0


def test_add_dimension_mismatch():
    with pytest.raises(DimensionError):
        poly_add(X1, Polynomial.variable(3, 0))


def test_mul_degree_adds():
    a = Polynomial.parse("x1^2 + x2")
    b = Polynomial.parse("x1*x2^3 - 1")
    assert poly_mul(a, b).degree() == 6


def test_degree_of_zero_is_zero():
    assert Polynomial.zero(3).degree() == 0


# -- coefficient comparison --------------------------------------------------


def test_coeff_diff_identical():
    p = Polynomial.parse("x1 + 3*x2^2")
    assert coeff_max_abs_diff(p, p) == 0.0


def test_coeff_diff_single_term():
    assert coeff_max_abs_diff(X1**2, X1**2 * 1.5) == 0.5


def test_coeff_diff_missing_term_counts_as_zero():
    assert coeff_max_abs_diff(X1 + X2, X1) == 1.0


# -- parsing and printing ----------------------------------------------------


def test_parse_print_round_trip():
    text = "1 - 2*x1^2*x2 + x2^3"
    p = Polynomial.parse(text)
    assert str(p) == text
    assert Polynomial.parse(str(p)) == p


def test_parse_whitespace_insensitive():
    assert Polynomial.parse(" x1 *x2^ 2 - 3 ") == Polynomial.parse("x1*x2^2-3")


@pytest.mark.parametrize("bad", ["x1 +", "x0", "x1^-1", "(x1", "x1/x2", "y1", ""])
def test_parse_errors(bad):
    with pytest.raises(PolynomialParseError):
        Polynomial.parse(bad, 2)


def test_json_round_trip():
    p = Polynomial.parse("0.1*x1^4 - x1*x2 + 2.5")
    assert Polynomial.from_json(2, p.to_json()) == p


def test_grlex_ordering():
    monos = monomials_up_to(2, 2)
    assert monos == sorted(monos, key=grlex_key)
    assert monos[0] == (0, 0)
    assert [sum(m) for m in monos] == sorted(sum(m) for m in monos)


# -- vector fields -----------------------------------------------------------


def test_vector_field_requires_equilibrium_at_origin():
    with pytest.raises(ValueError):
        VectorField.parse(["x1 + 1", "x2"])
    VectorField.parse(["x1 + 1", "x2"], equilibrium_at_origin=False)


def test_rescaled_field_conjugates_the_flow():
    s = 1 / 3
    g = VDP.rescaled(s)
    x = np.array([0.7, -1.2])
    # z = s x  =>  dz/dt = s f(x)
    assert np.allclose(g(s * x), s * np.asarray(VDP(x)), atol=1e-14)


# -- properties --------------------------------------------------------------

coeffs = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@st.composite
def polynomials(draw, nvars=2, max_degree=4):
    monos = monomials_up_to(nvars, max_degree)
    chosen = draw(st.lists(st.sampled_from(monos), max_size=8, unique=True))
    return Polynomial(nvars, {m: draw(coeffs) for m in chosen})


points = st.lists(st.floats(-1.5, 1.5), min_size=2, max_size=2)


@settings(max_examples=60, deadline=None)
@given(polynomials(), polynomials(), points)
def test_product_evaluates_to_product(a, b, x):
    lhs = (a * b)(x)
    rhs = a(x) * b(x)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(polynomials(max_degree=8), st.lists(st.floats(-1, 1), min_size=2, max_size=2))
def test_gradient_matches_central_differences(p, x):
    h = 1e-6
    for i, gi in enumerate(gradient(p)):
        e = np.zeros(2)
        e[i] = h
        fd = (p(list(np.add(x, e))) - p(list(np.subtract(x, e)))) / (2 * h)
        assert abs(gi(x) - fd) <= 1e-5


@settings(max_examples=60, deadline=None)
@given(polynomials(max_degree=5), points)
def test_lie_derivative_pointwise(p, x):
    grad = [g(x) for g in gradient(p)]
    fx = VDP(x)
    assert lie_derivative(p, VDP)(x) == pytest.approx(float(np.dot(grad, fx)), rel=1e-10, abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(polynomials(), polynomials())
def test_results_never_store_zeros(a, b):
    for r in (a + b, a - b, a * b, a - a):
        assert all(c != 0.0 for c in r.terms.values())


def test_squared_norm_scale():
    p = Polynomial.squared_norm(3, 2.0)
    assert p([1.0, 1.0, 1.0]) == 6.0
    assert math.isclose(p([0.5, 0.0, 0.0]), 0.5)
