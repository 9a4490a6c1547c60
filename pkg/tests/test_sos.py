import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sosroa import sos
from sosroa.poly import Polynomial, VectorField, coeff_max_abs_diff, lie_derivative
from sosroa.sdp import Status, solve

LINEAR = VectorField.parse(["-x1", "-x2"])
VDP = VectorField.parse(["-x2", "x1 + x2*(x1^2 - 1)"])
X1 = Polynomial.variable(2, 0)
X2 = Polynomial.variable(2, 1)


def solve_program(prog):
    cp = sos.compile(prog)
    return cp, solve(cp.problem)


# -- bases and Gram matrices ---------------------------------------------------------


def test_basis_size_is_binomial():
    for n, d in [(1, 3), (2, 2), (2, 4), (3, 3)]:
        assert len(sos.MonomialBasis(n, d)) == math.comb(n + d, d)


def test_gram_identity():
    basis = sos.MonomialBasis(1, 1)
    assert sos.gram_to_poly(np.eye(2), basis) == Polynomial.parse("1 + x1^2", 1)


def test_gram_rank_one():
    basis = sos.MonomialBasis(2, 1, 1)
    assert sos.gram_to_poly(np.ones((2, 2)), basis) == (X1 + X2) ** 2


def test_gram_zero():
    assert sos.gram_to_poly(np.zeros((3, 3)), sos.MonomialBasis(2, 1)).is_zero()


def test_gram_dimension_mismatch():
    with pytest.raises(ValueError):
        sos.gram_to_poly(np.eye(2), sos.MonomialBasis(2, 1))


# -- compile -----------------------------------------------------------------------------


def test_compile_single_sos_constraint():
    prog = sos.SosProgram(1)
    prog.add_sos("sigma", sos.MonomialBasis(1, 1))
    prog.add_identity(sos.Identity("fit", Polynomial.parse("1 + x1^2", 1), {},
                                   [(Polynomial.constant(1, 1.0), "sigma")]))
    cp, sol = solve_program(prog)
    assert cp.problem.num_constraints == 3
    assert sol.status is Status.FEASIBLE
    assert np.allclose(sol.X[0], np.eye(2), atol=1e-7)


def test_compile_empty_program():
    cp, sol = solve_program(sos.SosProgram(2))
    assert cp.problem.num_constraints == 0
    assert sol.status is Status.FEASIBLE


def test_compile_rejects_degree_imbalance():
    prog = sos.SosProgram(1)
    prog.add_sos("sigma", sos.MonomialBasis(1, 1))
    prog.add_identity(sos.Identity("fit", Polynomial.parse("x1^4", 1), {},
                                   [(Polynomial.constant(1, 1.0), "sigma")]))
    with pytest.raises(sos.DegreeImbalanceError, match="half-degree >= 2"):
        sos.compile(prog)


def test_free_variable_recovered():
    # p(x) = c x1^2 with c free, and 2 x1^2 - p SOS  (feasible for any c < 2)
    prog = sos.SosProgram(1)
    prog.add_free("p", [(2,)])
    prog.add_sos("sigma", sos.MonomialBasis(1, 1, 1))
    prog.add_identity(sos.Identity("fit", Polynomial.parse("2*x1^2", 1),
                                   {"p": [Polynomial.parse("-x1^2", 1)]},
                                   [(Polynomial.constant(1, 1.0), "sigma")]))
    cp, sol = solve_program(prog)
    rec = sos.recover(cp, sol)
    assert sol.ok
    assert rec.free["p"].coeff((2,)) < 2.0
    assert max(rec.identity_residuals.values()) <= 1e-7


def test_objective_on_free_variable():
    # minimize c subject to c - 1 = sigma (sigma a nonnegative constant): optimum c = 1
    prog = sos.SosProgram(1)
    prog.add_free("c", [(0,)])
    prog.add_sos("sigma", sos.MonomialBasis(1, 0))
    prog.add_identity(sos.Identity("fit", Polynomial.constant(1, -1.0),
                                   {"c": [Polynomial.constant(1, 1.0)]},
                                   [(Polynomial.constant(1, 1.0), "sigma")]))
    prog.objective = {"c": {(0,): 1.0}}
    cp, sol = solve_program(prog)
    assert sol.status is Status.OPTIMAL
    assert sol.objective_value + cp.objective_offset == pytest.approx(1.0, abs=1e-7)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 2))
def test_gram_round_trip(seed, half):
    rng = np.random.default_rng(seed)
    basis = sos.MonomialBasis(2, half)
    q = rng.standard_normal((len(basis), len(basis)))
    G = q @ q.T + 0.1 * np.eye(len(basis))
    target = sos.gram_to_poly(G, basis)
    prog = sos.SosProgram(2)
    prog.add_sos("sigma", basis)
    prog.add_identity(sos.Identity("fit", target, {}, [(Polynomial.constant(2, 1.0), "sigma")]))
    cp, sol = solve_program(prog)
    assert sol.ok
    rec = sos.recover(cp, sol)
    assert coeff_max_abs_diff(rec.sos["sigma"], target) <= 1e-7


# -- the certificate program ---------------------------------------------------------------


def hand_certificate(P, beta, gamma, delta):
    """Linear-system certificate with quadratic multipliers written by hand."""
    basis = sos.MonomialBasis(2, 1, 1)
    empty = sos.MonomialBasis(2, 0, 1)
    sq = Polynomial.squared_norm(2)
    s1 = P - sq * beta
    s3 = sq * gamma - P
    s5 = -lie_derivative(P, LINEAR) - sq * delta
    grams = {}
    for name, s in (("s1", s1), ("s3", s3), ("s5", s5)):
        grams[name] = np.array([[s.coeff((2, 0)), s.coeff((1, 1)) / 2], [s.coeff((1, 1)) / 2, s.coeff((0, 2))]])
    zero = Polynomial.zero(2)
    return sos.SosCertificate(
        P=P, multipliers=[s1, zero, s3, zero, s5, zero], grams=grams,
        bases={"s1": basis, "s2": empty, "s3": basis, "s4": empty, "s5": basis, "s6": empty},
        beta=beta, gamma=gamma, delta=delta, r=1.0, d=2, vector_field=LINEAR,
    )


def test_hand_witness_validates():
    cert = sos.validate_certificate(hand_certificate(X1**2 + X2**2, 0.1, 10.0, 0.1))
    assert max(cert.residuals.values()) == 0.0
    assert cert.min_gram_eigenvalue == pytest.approx(0.9)


def test_linear_program_feasible_and_extracts():
    prog = sos.build_h_program(LINEAR, 2, 1.0, 0.1, 10.0, 0.1)
    cp, sol = solve_program(prog)
    assert sol.status is Status.FEASIBLE
    cert = sos.extract_certificate(prog, cp, sol)
    assert max(cert.residuals.values()) <= 1e-6
    assert cert.min_gram_eigenvalue >= -1e-8


def test_zero_radius_rejected():
    with pytest.raises(ValueError):
        sos.build_h_program(LINEAR, 2, 0.0)


@pytest.mark.parametrize("kwargs", [dict(beta=-1.0), dict(beta=2.0, gamma=1.0), dict(d=1)])
def test_bad_parameters_rejected(kwargs):
    args = dict(f=LINEAR, d=2, r=1.0)
    args.update(kwargs)
    with pytest.raises(ValueError):
        sos.build_h_program(**args)


def test_van_der_pol_degree_bookkeeping():
    prog = sos.build_h_program(VDP, 2, 0.5)
    s5 = prog.sos_vars["s5"]
    assert any(sum(m) == 2 for m in s5.monomials)
    assert prog.sos_vars["s6"].poly_degree == 2
    decrease = prog.identities[2]
    assert max(p.degree() for p in decrease.free_terms["P"]) == 4


def test_multiplier_override_too_small():
    with pytest.raises(sos.DegreeImbalanceError):
        sos.build_h_program(VDP, 4, 0.5, multiplier_degree={"s5": 2, "s6": 0})


def test_odd_degree_rounds_up():
    assert sos.build_h_program(LINEAR, 3, 1.0).free_vars["P"] == sos.build_h_program(LINEAR, 4, 1.0).free_vars["P"]


def test_perturbed_gram_rejected():
    prog = sos.build_h_program(LINEAR, 2, 1.0, 0.1, 10.0, 0.1)
    cp, sol = solve_program(prog)
    cert = sos.extract_certificate(prog, cp, sol)
    cert.grams["s1"] = cert.grams["s1"].copy()
    cert.grams["s1"][0, 0] += 1e-3
    with pytest.raises(sos.ResidualTooLarge):
        sos.validate_certificate(cert)


def test_identity_residual_rejected():
    cert = hand_certificate(X1**2 + X2**2, 0.1, 10.0, 0.1)
    cert.P = cert.P + X1**2 * 1e-3
    with pytest.raises(sos.ResidualTooLarge):
        sos.validate_certificate(cert)


def test_indefinite_gram_rejected():
    cert = hand_certificate(X1**2 + X2**2, 0.1, 10.0, 0.1)
    # s1 = P - beta|x|^2 would need a negative eigenvalue for a P this small
    cert = hand_certificate((X1**2 + X2**2) * 0.05, 0.1, 10.0, 0.1)
    with pytest.raises(sos.GramNotPsd):
        sos.validate_certificate(cert)


def test_certificate_must_vanish_at_origin():
    cert = hand_certificate(X1**2 + X2**2, 0.1, 10.0, 0.1)
    cert.P = Polynomial.parse("(x1^2 - 1)^2 + x2^2")
    with pytest.raises(sos.CertificateError):
        sos.validate_certificate(cert)


def test_infeasible_solution_cannot_be_extracted():
    anti = VectorField.parse(["x1", "x2"])
    prog = sos.build_h_program(anti, 2, 0.5)
    cp, sol = solve_program(prog)
    assert sol.status is Status.INFEASIBLE
    with pytest.raises(sos.SosError):
        sos.extract_certificate(prog, cp, sol)


def test_compilation_independent_of_term_order():
    f1 = VectorField.parse(["-x2", "x1 + x2*(x1^2 - 1)"])
    f2 = VectorField.parse(["-x2", "-x2 + x1^2*x2 + x1"])
    a = sos.compile(sos.build_h_program(f1, 4, 0.5)).problem
    b = sos.compile(sos.build_h_program(f2, 4, 0.5)).problem
    assert np.array_equal(a.b, b.b)
    assert all(np.array_equal(x, y) for x, y in zip(a.A, b.A))


@pytest.mark.parametrize("f, d, r", [(LINEAR, 2, 1.0), (VDP.rescaled(1 / 3), 4, 0.5)])
def test_sampled_certificate_conditions(f, d, r):
    prog = sos.build_h_program(f, d, r)
    cp, sol = solve_program(prog)
    cert = sos.extract_certificate(prog, cp, sol)
    rng = np.random.default_rng(0)
    g = rng.standard_normal((10_000, 2))
    g *= (r * np.sqrt(rng.uniform(size=10_000)) / np.linalg.norm(g, axis=1))[:, None]
    sq = np.sum(g**2, axis=1)
    p = cert.P.evaluate_many(g)
    lie = lie_derivative(cert.P, f).evaluate_many(g)
    assert np.all(cert.beta * sq - 1e-6 <= p)
    assert np.all(p <= cert.gamma * sq + 1e-6)
    assert np.all(lie <= -cert.delta * sq + 1e-6)


# -- sublevel containment ---------------------------------------------------------------------


def level_status(P, a, r, d_mult=0):
    _, sol = solve_program(sos.build_level_program(P, a, r, d_mult))
    return sol.status


def test_small_level_contained():
    assert level_status(X1**2 + X2**2, 0.25, 1.0) is Status.FEASIBLE


def test_large_level_not_contained():
    assert level_status(X1**2 + X2**2, 4.0, 1.0) is Status.INFEASIBLE


def test_touching_level_is_not_strictly_feasible():
    assert level_status(X1**2 + X2**2, 1.0, 1.0) is not Status.FEASIBLE


def test_level_program_rejects_bad_arguments():
    with pytest.raises(ValueError):
        sos.build_level_program(X1**2, 0.0, 1.0)
    with pytest.raises(ValueError):
        sos.build_level_program(X1**2, 1.0, -1.0)


def test_sphere_separation():
    P = X1**2 * 4 + X2**2
    ok = sos.build_sphere_level_program(P, 0.9, 1.0)
    _, sol = solve_program(ok)
    assert sol.status is Status.FEASIBLE
    _, sol = solve_program(sos.build_sphere_level_program(P, 1.1, 1.0))
    assert sol.status is Status.INFEASIBLE


def test_sphere_separation_ignores_outside_of_ball():
    # P dips negative far outside the ball, so no whole-sublevel containment exists,
    # but P >= 0.5 on the unit circle still holds
    P = X1**2 + X2**2 - (X1**4 + X2**4) * 0.1
    _, sol = solve_program(sos.build_sphere_level_program(P, 0.5, 1.0))
    assert sol.status is Status.FEASIBLE
    assert level_status(P, 0.5, 1.0, 2) is not Status.FEASIBLE


def test_ball_moments():
    assert sos.ball_moment((0, 0), 1.0) == pytest.approx(math.pi)
    assert sos.ball_moment((2, 0), 1.0) == pytest.approx(math.pi / 4)
    assert sos.ball_moment((1, 2), 1.0) == 0.0
    assert sos.ball_moment((0, 0, 0), 2.0) == pytest.approx(4 / 3 * math.pi * 8)
    # x^2 y^2 over the unit disk
    assert sos.ball_moment((2, 2), 1.0) == pytest.approx(math.pi / 24)


def test_shaped_program_is_a_certificate_program():
    prog = sos.build_shaped_h_program(LINEAR, 2, 1.0)
    cp, sol = solve_program(prog)
    assert sol.status is Status.OPTIMAL
    cert = sos.extract_certificate(prog, cp, sol)
    # the smallest P with P >= 1 on the unit circle is |x|^2 itself
    assert coeff_max_abs_diff(cert.P, X1**2 + X2**2) <= 1e-5
