"""Sum-of-squares programs compiled to SDPs by Gram-matrix coefficient matching.

An :class:`SosProgram` holds free polynomial variables, SOS polynomial
variables (each a Gram matrix over a monomial basis) and polynomial identities

    fixed + sum_k L_k(free_k) = sum_j m_j * sigma_j

that must hold coefficient by coefficient. :func:`compile` turns the program
into an :class:`~sosroa.sdp.SdpProblem` with one PSD block per SOS variable;
free coefficients are eliminated through the left null space of their
columns and recovered by least squares after solving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .poly import (
    DimensionError,
    Monomial,
    Polynomial,
    VectorField,
    coeff_max_abs_diff,
    grlex_key,
    lie_derivative,
    mono_mul,
    monomials_up_to,
)
from .sdp import SdpProblem, SdpSolution

CERT_RESIDUAL_TOL = 1e-6
CERT_PSD_TOL = 1e-8


class SosError(ValueError):
    pass


class DegreeImbalanceError(SosError):
    pass


class ResidualTooLarge(SosError):
    pass


class GramNotPsd(SosError):
    pass


class CertificateError(SosError):
    pass


@dataclass(frozen=True)
class MonomialBasis:
    """Monomials with ``min_degree <= total degree <= max_degree``, grlex ordered."""

    nvars: int
    max_degree: int
    min_degree: int = 0

    @property
    def monomials(self) -> list[Monomial]:
        if self.max_degree < self.min_degree:
            return []
        return monomials_up_to(self.nvars, self.max_degree, self.min_degree)

    def __len__(self) -> int:
        if self.max_degree < self.min_degree:
            return 0
        full = math.comb(self.nvars + self.max_degree, self.max_degree)
        below = math.comb(self.nvars + self.min_degree - 1, self.min_degree - 1) if self.min_degree > 0 else 0
        return full - below

    @property
    def poly_degree(self) -> int:
        """Degree of polynomials representable by a Gram matrix over this basis."""
        return 2 * self.max_degree


def gram_to_poly(G: np.ndarray, basis: MonomialBasis) -> Polynomial:
    """z' G z for the basis vector z."""
    G = np.asarray(G, dtype=float)
    monos = basis.monomials
    if G.shape != (len(monos), len(monos)):
        raise DimensionError(f"Gram matrix {G.shape} does not match basis of size {len(monos)}")
    terms: dict[Monomial, float] = {}
    for a, ma in enumerate(monos):
        for b, mb in enumerate(monos):
            if G[a, b] != 0.0:
                mono = mono_mul(ma, mb)
                terms[mono] = terms.get(mono, 0.0) + G[a, b]
    return Polynomial(basis.nvars, terms)


@dataclass
class Identity:
    """``fixed + sum(free contributions) == sum(multiplier * sos_var)``.

    ``free_terms`` maps a free variable name to one polynomial per support
    monomial: the polynomial multiplying that coefficient.
    """

    name: str
    fixed: Polynomial
    free_terms: dict[str, list[Polynomial]] = field(default_factory=dict)
    sos_terms: list[tuple[Polynomial, str]] = field(default_factory=list)


@dataclass
class SosProgram:
    nvars: int
    free_vars: dict[str, list[Monomial]] = field(default_factory=dict)
    sos_vars: dict[str, MonomialBasis] = field(default_factory=dict)
    identities: list[Identity] = field(default_factory=list)
    meta: object = None
    vector_field: VectorField | None = None
    # linear cost to minimize: free variable name -> {monomial: weight}
    objective: dict[str, dict[Monomial, float]] = field(default_factory=dict)

    def add_free(self, name: str, support: list[Monomial]) -> None:
        self.free_vars[name] = sorted((tuple(m) for m in support), key=grlex_key)

    def add_sos(self, name: str, basis: MonomialBasis) -> None:
        self.sos_vars[name] = basis

    def add_identity(self, identity: Identity) -> None:
        for name in identity.free_terms:
            if len(identity.free_terms[name]) != len(self.free_vars[name]):
                raise SosError(f"identity {identity.name}: wrong number of terms for {name}")
        for _, name in identity.sos_terms:
            if name not in self.sos_vars:
                raise SosError(f"identity {identity.name}: unknown SOS variable {name}")
        self.identities.append(identity)

    def check_degrees(self) -> None:
        """Each identity's left side must fit within what its SOS terms can reach."""
        for ident in self.identities:
            lhs = ident.fixed.degree() if not ident.fixed.is_zero() else -1
            for name, polys in ident.free_terms.items():
                for p in polys:
                    if not p.is_zero():
                        lhs = max(lhs, p.degree())
            rhs = -1
            for mult, name in ident.sos_terms:
                basis = self.sos_vars[name]
                if len(basis) and not mult.is_zero():
                    rhs = max(rhs, mult.degree() + basis.poly_degree)
            if lhs > rhs:
                detail = ", ".join(
                    f"{name} (multiplier degree {mult.degree()}) needs Gram half-degree "
                    f">= {math.ceil(max(lhs - mult.degree(), 0) / 2)}"
                    for mult, name in ident.sos_terms
                )
                raise DegreeImbalanceError(
                    f"identity {ident.name!r}: left side has degree {lhs} but the SOS side reaches "
                    f"only {rhs}; {detail}"
                )


@dataclass
class CompiledProgram:
    program: SosProgram
    problem: SdpProblem
    sos_names: list[str]
    free_names: list[str]
    free_slices: dict[str, slice]
    # full (un-eliminated) system: sum_b <Afull_b, G_b> + F f = c
    A_full: list[np.ndarray]
    F: np.ndarray
    c: np.ndarray
    rows: list[tuple[int, Monomial]]
    # objective value = <C, G> + objective_offset
    objective_offset: float = 0.0


def _identity_rows(prog: SosProgram, ident: Identity) -> list[Monomial]:
    monos = set(ident.fixed.terms)
    for polys in ident.free_terms.values():
        for p in polys:
            monos.update(p.terms)
    for mult, name in ident.sos_terms:
        basis = prog.sos_vars[name].monomials
        if not basis:
            continue
        for mm in mult.terms:
            for i, a in enumerate(basis):
                for b in basis[i:]:
                    monos.add(mono_mul(mm, mono_mul(a, b)))
    return sorted(monos, key=grlex_key)


def compile(prog: SosProgram) -> CompiledProgram:  # noqa: A001 - mirrors the operation name
    prog.check_degrees()
    # an empty basis means the variable is identically zero; it gets no block
    sos_names = [n for n, basis in prog.sos_vars.items() if len(basis)]
    free_names = list(prog.free_vars)
    bases = [prog.sos_vars[n].monomials for n in sos_names]
    blocks = [len(b) for b in bases]
    free_slices = {}
    off = 0
    for name in free_names:
        free_slices[name] = slice(off, off + len(prog.free_vars[name]))
        off += len(prog.free_vars[name])
    nfree = off

    rows: list[tuple[int, Monomial]] = []
    for k, ident in enumerate(prog.identities):
        rows.extend((k, m) for m in _identity_rows(prog, ident))
    index = {row: i for i, row in enumerate(rows)}
    m = len(rows)
    A_full = [np.zeros((m, k, k)) for k in blocks]
    F = np.zeros((m, nfree))
    c = np.zeros(m)
    block_of = {n: i for i, n in enumerate(sos_names)}

    for k, ident in enumerate(prog.identities):
        for mono, coef in ident.fixed.terms.items():
            c[index[(k, mono)]] += coef
        for name, polys in ident.free_terms.items():
            base = free_slices[name].start
            for j, p in enumerate(polys):
                for mono, coef in p.terms.items():
                    # free terms live on the left; move them right of '=' with a sign flip
                    F[index[(k, mono)], base + j] -= coef
        for mult, name in ident.sos_terms:
            if name not in block_of:
                continue
            bi = block_of[name]
            basis = bases[bi]
            for mm, mc in mult.terms.items():
                for a, ma in enumerate(basis):
                    for b, mb in enumerate(basis):
                        row = index[(k, mono_mul(mm, mono_mul(ma, mb)))]
                        A_full[bi][row, a, b] += mc

    if nfree:
        U, sv, _ = np.linalg.svd(F, full_matrices=True)
        tol = max(F.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0) * 10
        rank = int(np.sum(sv > tol))
        N = U[:, rank:]
        A_red = [np.tensordot(N.T, a, axes=1) for a in A_full]
        A_red = [(a + a.transpose(0, 2, 1)) / 2 for a in A_red]
        c_red = N.T @ c
    else:
        A_red, c_red = A_full, c
    C, offset = None, 0.0
    if prog.objective:
        C, offset = _objective_blocks(prog, free_slices, nfree, A_full, F, c)
    problem = SdpProblem(blocks, A_red, c_red, C)
    return CompiledProgram(prog, problem, sos_names, free_names, free_slices, A_full, F, c, rows, offset)


def _objective_blocks(prog, free_slices, nfree, A_full, F, c):
    # free coefficients are determined by the Grams, p = F^+ (c - A(G)),
    # so w.p = w.F^+ c - <A^T (F^+)^T w, G>
    w = np.zeros(nfree)
    for name, weights in prog.objective.items():
        support = prog.free_vars[name]
        sl = free_slices[name]
        for mono, val in weights.items():
            w[sl.start + support.index(tuple(mono))] += val
    if np.linalg.matrix_rank(F) < nfree:
        raise SosError("objective needs free variables that the identities determine uniquely")
    z = np.linalg.pinv(F).T @ w
    C = []
    for a in A_full:
        blk = -np.tensordot(z, a, axes=1)
        C.append((blk + blk.T) / 2)
    return C, float(z @ c)


@dataclass
class SosSolution:
    free: dict[str, Polynomial]
    grams: dict[str, np.ndarray]
    sos: dict[str, Polynomial]
    identity_residuals: dict[str, float]
    min_gram_eigenvalue: float


def identity_sides(prog: SosProgram, ident: Identity, free: dict[str, Polynomial],
                   sos: dict[str, Polynomial]) -> tuple[Polynomial, Polynomial]:
    lhs = ident.fixed
    for name, polys in ident.free_terms.items():
        coeffs = free[name]
        for mono, p in zip(prog.free_vars[name], polys):
            cf = coeffs.coeff(mono)
            if cf != 0.0:
                lhs = lhs + p * cf
    rhs = Polynomial.zero(prog.nvars)
    for mult, name in ident.sos_terms:
        if name in sos:
            rhs = rhs + mult * sos[name]
    return lhs, rhs


def recover(cp: CompiledProgram, sol: SdpSolution) -> SosSolution:
    """Rebuild all program variables from an SDP solution and recheck every identity."""
    prog = cp.program
    grams = {}
    for name, X in zip(cp.sos_names, sol.X):
        grams[name] = (np.asarray(X) + np.asarray(X).T) / 2
    Gs = [grams[n] for n in cp.sos_names]
    free = {}
    if cp.F.shape[1]:
        rhs = cp.c - sum((np.einsum("ijk,jk->i", a, g) for a, g in zip(cp.A_full, Gs)), np.zeros(len(cp.c)))
        fvec, *_ = np.linalg.lstsq(cp.F, rhs, rcond=None)
        for name in cp.free_names:
            vals = fvec[cp.free_slices[name]]
            free[name] = Polynomial(prog.nvars, dict(zip(prog.free_vars[name], vals)))
    sos = {n: gram_to_poly(grams[n], prog.sos_vars[n]) for n in cp.sos_names}
    resid = {}
    for ident in prog.identities:
        lhs, rhs = identity_sides(prog, ident, free, sos)
        resid[ident.name] = coeff_max_abs_diff(lhs, rhs)
    eigs = [np.linalg.eigvalsh(g)[0] for g in Gs if g.size]
    return SosSolution(free, grams, sos, resid, float(min(eigs)) if eigs else float("inf"))


# -- the Lyapunov certificate program --------------------------------------------


@dataclass(frozen=True)
class HParams:
    beta: float
    gamma: float
    delta: float
    r: float
    d: int

    @property
    def d_eff(self) -> int:
        return 2 * math.ceil(self.d / 2)


@dataclass
class SosCertificate:
    """Polynomial Lyapunov certificate on the ball of radius ``r``.

    ``multipliers`` holds s1..s6 (zero polynomials where a multiplier's basis
    is empty); ``grams`` the matching Gram matrices keyed ``"s1".."s6"``.
    """

    P: Polynomial
    multipliers: list[Polynomial]
    grams: dict[str, np.ndarray]
    bases: dict[str, MonomialBasis]
    beta: float
    gamma: float
    delta: float
    r: float
    d: int
    vector_field: VectorField
    residuals: dict[str, float] = field(default_factory=dict)
    min_gram_eigenvalue: float = float("inf")

    def identities(self) -> list[tuple[str, Polynomial, Polynomial]]:
        """(name, left side, right side) of the three certificate identities."""
        n = self.P.nvars
        sq = Polynomial.squared_norm(n)
        u = Polynomial.ball(n, self.r)
        s = self.multipliers
        return [
            ("lower", self.P - sq * self.beta, s[0] + s[1] * u),
            ("upper", -self.P + sq * self.gamma, s[2] + s[3] * u),
            ("decrease", -lie_derivative(self.P, self.vector_field) - sq * self.delta, s[4] + s[5] * u),
        ]


H_SOS_NAMES = ["s1", "s2", "s3", "s4", "s5", "s6"]


def multiplier_degrees(lhs_degree: int) -> tuple[int, int]:
    """(degree of the plain SOS term, degree of the ball multiplier) for one identity."""
    plain = 2 * math.ceil(lhs_degree / 2)
    ball = 2 * math.ceil((lhs_degree - 2) / 2)
    return plain, max(ball, 0)


def build_h_program(f: VectorField, d: int, r: float, beta: float = 1e-3, gamma: float = 1e3,
                    delta: float = 1e-3, multiplier_degree: dict[str, int] | None = None) -> SosProgram:
    """Lyapunov certificate program for degree ``d`` on the ball of radius ``r``.

    ``P`` has no constant or linear terms. Multiplier degrees default to the
    smallest even degrees balancing each identity; ``multiplier_degree`` can
    override them (e.g. ``{"s5": 2}``), and too small a choice raises
    :class:`DegreeImbalanceError`.
    """
    if not r > 0:
        raise ValueError("radius must be positive")
    if not (beta > 0 and gamma > 0 and delta > 0):
        raise ValueError("beta, gamma and delta must be positive")
    if beta > gamma:
        raise ValueError("beta must not exceed gamma")
    if d < 2:
        raise ValueError("certificate degree must be at least 2")
    n = f.dim
    params = HParams(beta, gamma, delta, r, d)
    dP = params.d_eff
    support = monomials_up_to(n, dP, 2)
    xs = [Polynomial.monomial(m) for m in support]
    sq = Polynomial.squared_norm(n)
    u = Polynomial.ball(n, r)
    one = Polynomial.constant(n, 1.0)

    decrease_terms = [-lie_derivative(x, f) for x in xs]
    decrease_degree = max((p.degree() for p in decrease_terms if not p.is_zero()), default=2)
    lhs_degrees = [dP, dP, max(decrease_degree, 2)]

    prog = SosProgram(n, meta=params, vector_field=f)
    prog.add_free("P", support)
    override = multiplier_degree or {}
    for k, lhs_deg in enumerate(lhs_degrees):
        plain, ball = multiplier_degrees(lhs_deg)
        plain = override.get(H_SOS_NAMES[2 * k], plain)
        ball = override.get(H_SOS_NAMES[2 * k + 1], ball)
        # no constant monomial: every left side vanishes to second order at 0
        prog.add_sos(H_SOS_NAMES[2 * k], MonomialBasis(n, plain // 2, 1))
        prog.add_sos(H_SOS_NAMES[2 * k + 1], MonomialBasis(n, ball // 2, 1))

    prog.add_identity(Identity("lower", sq * (-beta), {"P": xs}, [(one, "s1"), (u, "s2")]))
    prog.add_identity(Identity("upper", sq * gamma, {"P": [-x for x in xs]}, [(one, "s3"), (u, "s4")]))
    prog.add_identity(Identity("decrease", sq * (-delta), {"P": decrease_terms}, [(one, "s5"), (u, "s6")]))
    prog.check_degrees()
    return prog


def extract_certificate(prog: SosProgram, cp: CompiledProgram, sol: SdpSolution,
                        meta: HParams | None = None) -> SosCertificate:
    """Turn a solved H program into a certificate, rechecking it from scratch."""
    if not sol.ok:
        raise SosError(f"cannot extract a certificate from a {sol.status.value} solution")
    meta = meta or prog.meta
    rec = recover(cp, sol)
    n = prog.nvars
    mults = [rec.sos.get(name, Polynomial.zero(n)) for name in H_SOS_NAMES]
    cert = SosCertificate(
        P=rec.free["P"],
        multipliers=mults,
        grams={name: rec.grams[name] for name in H_SOS_NAMES if name in rec.grams},
        bases={name: prog.sos_vars[name] for name in H_SOS_NAMES},
        beta=meta.beta, gamma=meta.gamma, delta=meta.delta, r=meta.r, d=meta.d,
        vector_field=prog.vector_field,
    )
    validate_certificate(cert)
    return cert


def validate_certificate(cert: SosCertificate, residual_tol: float = CERT_RESIDUAL_TOL,
                         psd_tol: float = CERT_PSD_TOL) -> SosCertificate:
    """Recompute identities and Gram spectra; raise on any violation.

    Fills ``cert.residuals`` and ``cert.min_gram_eigenvalue``.
    """
    n = cert.P.nvars
    if not (cert.beta > 0 and cert.gamma > 0 and cert.delta > 0 and cert.r > 0):
        raise CertificateError("beta, gamma, delta and r must be positive")
    if cert.beta > cert.gamma:
        raise CertificateError("beta exceeds gamma")
    if cert.P.coeff((0,) * n) != 0.0:
        raise CertificateError(f"P(0) = {cert.P.coeff((0,) * n)!r}, a certificate must vanish at the origin")
    for name, G in cert.grams.items():
        rebuilt = gram_to_poly(G, cert.bases[name])
        idx = H_SOS_NAMES.index(name)
        if coeff_max_abs_diff(rebuilt, cert.multipliers[idx]) > residual_tol:
            raise ResidualTooLarge(f"multiplier {name} does not match its Gram matrix")
    min_eig = float("inf")
    for name, G in cert.grams.items():
        if G.size:
            lam = float(np.linalg.eigvalsh((G + G.T) / 2)[0])
            min_eig = min(min_eig, lam)
            if lam < -psd_tol:
                raise GramNotPsd(f"Gram matrix of {name} has eigenvalue {lam:.3e}")
    residuals = {}
    for name, lhs, rhs in cert.identities():
        res = coeff_max_abs_diff(lhs, rhs)
        residuals[name] = res
        if res > residual_tol:
            raise ResidualTooLarge(f"identity {name!r} residual {res:.3e} exceeds {residual_tol:g}")
    cert.residuals = residuals
    cert.min_gram_eigenvalue = min_eig
    return cert


# -- sublevel containment program --------------------------------------------


def build_level_program(P: Polynomial, a: float, r: float, d_mult: int = 0) -> SosProgram:
    """Containment of {P <= a} in the ball of radius ``r``.

    Encodes ``u_r = sigma + s * (a - P)`` with ``sigma`` and ``s`` SOS and
    ``deg s <= d_mult``: wherever ``P <= a`` the right side is nonnegative,
    hence so is ``u_r``.
    """
    if not a > 0:
        raise ValueError("level must be positive")
    if not r > 0:
        raise ValueError("radius must be positive")
    if d_mult < 0:
        raise ValueError("multiplier degree must be nonnegative")
    n = P.nvars
    u = Polynomial.ball(n, r)
    gap = Polynomial.constant(n, a) - P
    s_half = d_mult // 2
    top = max(2, gap.degree() + 2 * s_half)
    prog = SosProgram(n, meta={"a": a, "r": r, "d_mult": d_mult})
    prog.add_sos("sigma", MonomialBasis(n, math.ceil(top / 2), 0))
    prog.add_sos("s", MonomialBasis(n, s_half, 0))
    one = Polynomial.constant(n, 1.0)
    prog.add_identity(Identity("containment", u, {}, [(one, "sigma"), (gap, "s")]))
    prog.check_degrees()
    return prog


def build_sphere_level_program(P: Polynomial, a: float, r: float, lam_degree: int | None = None) -> SosProgram:
    """``P > a`` on the sphere of radius ``r``.

    Encodes ``P - a + lam * u_r = sigma`` with ``lam`` a free polynomial and
    ``sigma`` SOS. On the sphere ``u_r = 0``, so ``P >= a`` there; since
    ``P(0) = 0 < a``, the component of {P <= a} holding the origin cannot
    leave the ball. Unlike :func:`build_level_program` this says nothing
    about P outside the ball, where a certificate does not constrain it.
    """
    if not a > 0:
        raise ValueError("level must be positive")
    if not r > 0:
        raise ValueError("radius must be positive")
    n = P.nvars
    top = max(2, 2 * math.ceil(P.degree() / 2))
    if lam_degree is None:
        lam_degree = top - 2
    if lam_degree < 0:
        raise ValueError("multiplier degree must be nonnegative")
    u = Polynomial.ball(n, r)
    support = monomials_up_to(n, lam_degree)
    prog = SosProgram(n, meta={"a": a, "r": r, "lam_degree": lam_degree})
    prog.add_free("lam", support)
    prog.add_sos("sigma", MonomialBasis(n, math.ceil(max(top, lam_degree + 2) / 2), 0))
    one = Polynomial.constant(n, 1.0)
    fixed = P - Polynomial.constant(n, a)
    prog.add_identity(Identity("separation", fixed, {"lam": [Polynomial.monomial(m) * u for m in support]},
                               [(one, "sigma")]))
    prog.check_degrees()
    return prog


def ball_moment(alpha: Monomial, r: float) -> float:
    """Integral of ``x^alpha`` over the ball of radius ``r``."""
    if any(a % 2 for a in alpha):
        return 0.0
    n, deg = len(alpha), sum(alpha)
    halves = [(a + 1) / 2 for a in alpha]
    log_sphere = math.log(2.0) + sum(math.lgamma(h) for h in halves) - math.lgamma(sum(halves))
    return math.exp(log_sphere) * r ** (deg + n) / (deg + n)


def build_shaped_h_program(f: VectorField, d: int, r: float, beta: float = 1e-3, gamma: float = 1e3,
                           delta: float = 1e-3, level: float = 1.0) -> SosProgram:
    """The certificate program plus ``P >= level`` on the sphere, minimizing the ball integral of P.

    Any feasible point is a certificate for ``H(d, r)``; the objective picks
    one whose sublevel set {P <= level} is as large as possible on average.
    """
    if not level > 0:
        raise ValueError("level must be positive")
    prog = build_h_program(f, d, r, beta, gamma, delta)
    n = f.dim
    dP = prog.meta.d_eff
    support_P = prog.free_vars["P"]
    u = Polynomial.ball(n, r)
    lam_support = monomials_up_to(n, dP - 2)
    prog.add_free("lam", lam_support)
    prog.add_sos("sigma", MonomialBasis(n, dP // 2, 0))
    prog.add_identity(Identity(
        "separation", Polynomial.constant(n, -level),
        {"P": [Polynomial.monomial(m) for m in support_P],
         "lam": [Polynomial.monomial(m) * u for m in lam_support]},
        [(Polynomial.constant(n, 1.0), "sigma")],
    ))
    prog.objective = {"P": {m: ball_moment(m, r) for m in support_P}}
    prog.check_degrees()
    return prog
