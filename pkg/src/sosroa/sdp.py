"""Dense block-diagonal semidefinite programming.

Problems are in the standard primal form

    minimize    sum_b <C_b, X_b>
    subject to  sum_b <A_ib, X_b> = b_i,   X_b PSD,

with dual ``maximize b'y  s.t.  C_b - sum_i y_i A_ib PSD``. The solver is a
primal-dual path-following method on the homogeneous self-dual embedding,
HKM search direction and Mehrotra predictor-corrector steps. A ``kappa``
dominating ``tau`` yields a Farkas-type infeasibility certificate.

Pure feasibility problems (all-zero objective) are solved by maximizing a
uniform eigenvalue margin ``t`` with ``X_b - t I PSD`` and only declared
feasible when ``t`` clears ``strict_margin``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    NUMERICAL_FAILURE = "NumericalFailure"


class SdpDimensionError(ValueError):
    pass


@dataclass
class SdpProblem:
    """Constraint data per block: ``A[b]`` has shape ``(m, k_b, k_b)``."""

    blocks: list[int]
    A: list[np.ndarray]
    b: np.ndarray
    C: list[np.ndarray] | None = None

    def __post_init__(self):
        self.blocks = [int(k) for k in self.blocks]
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        m = self.b.shape[0]
        if len(self.A) != len(self.blocks):
            raise SdpDimensionError("one constraint array per block is required")
        self.A = [np.asarray(a, dtype=float).reshape(m, k, k) for a, k in zip(self.A, self.blocks)]
        if self.C is None:
            self.C = [np.zeros((k, k)) for k in self.blocks]
        else:
            self.C = [np.asarray(c, dtype=float).reshape(k, k) for c, k in zip(self.C, self.blocks)]
            if len(self.C) != len(self.blocks):
                raise SdpDimensionError("one objective matrix per block is required")
        for a in self.A:
            if a.size and np.max(np.abs(a - a.transpose(0, 2, 1))) > 1e-12 * max(1.0, np.max(np.abs(a))):
                raise SdpDimensionError("constraint matrices must be symmetric")
        for c in self.C:
            if c.size and np.max(np.abs(c - c.T)) > 1e-12 * max(1.0, np.max(np.abs(c))):
                raise SdpDimensionError("objective matrices must be symmetric")
        free_entries = sum(k * (k + 1) // 2 for k in self.blocks)
        if m > free_entries:
            raise SdpDimensionError(f"{m} constraints exceed the {free_entries} free symmetric entries")

    @classmethod
    def from_constraints(cls, blocks, constraints, objective=None) -> SdpProblem:
        """Build from a list of ``(per-block matrices, rhs)`` pairs."""
        m = len(constraints)
        A = [np.zeros((m, k, k)) for k in blocks]
        b = np.zeros(m)
        for i, (mats, rhs) in enumerate(constraints):
            for j, mat in enumerate(mats):
                if mat is not None:
                    A[j][i] = mat
            b[i] = rhs
        return cls(list(blocks), A, b, objective)

    @property
    def num_constraints(self) -> int:
        return self.b.shape[0]

    def is_feasibility(self) -> bool:
        return all(not np.any(c) for c in self.C)

    def apply(self, X: list[np.ndarray]) -> np.ndarray:
        """The vector of ``<A_i, X>``."""
        out = np.zeros(self.num_constraints)
        for a, x in zip(self.A, X):
            out += np.einsum("ijk,jk->i", a, x)
        return out


@dataclass
class SdpOptions:
    feas_tol: float = 1e-7
    psd_tol: float = 1e-8
    strict_margin: float = 1e-7
    margin_cap: float = 1.0
    # trace penalty on the margin problem; keeps its dual strictly feasible so the
    # optimum is attained (can only lower the reported margin, by ~reg * trace)
    margin_regularization: float = 1e-9
    max_iter: int = 200
    # internal stopping tolerances of the interior-point loop (relative)
    ipm_tol: float = 1e-10
    # accepted from the best iterate when the loop stalls before reaching ipm_tol
    ipm_loose_tol: float = 1e-7
    infeas_tol: float = 1e-8


@dataclass
class SdpSolution:
    status: Status
    X: list[np.ndarray]
    objective_value: float
    max_equality_residual: float
    min_eigenvalue: float
    dual_objective: float = float("nan")
    y: np.ndarray | None = None
    iterations: int = 0
    margin: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status in (Status.OPTIMAL, Status.FEASIBLE)


def residuals(prob: SdpProblem, X: list[np.ndarray]) -> tuple[float, float]:
    """Max equality residual and smallest eigenvalue of a candidate ``X``."""
    if len(X) != len(prob.blocks):
        raise SdpDimensionError(f"expected {len(prob.blocks)} blocks, got {len(X)}")
    Xs = []
    for x, k in zip(X, prob.blocks):
        x = np.asarray(x, dtype=float)
        if x.shape != (k, k):
            raise SdpDimensionError(f"block shape {x.shape} does not match dimension {k}")
        Xs.append(x)
    res = prob.apply(Xs) - prob.b
    max_res = float(np.max(np.abs(res))) if res.size else 0.0
    eigs = [np.linalg.eigvalsh((x + x.T) / 2)[0] for x in Xs if x.size]
    min_eig = float(min(eigs)) if eigs else float("inf")
    return max_res, min_eig


def solve(prob: SdpProblem, opts: SdpOptions | None = None) -> SdpSolution:
    """Solve ``prob``; feasibility problems go through the eigenvalue-margin route."""
    opts = opts or SdpOptions()
    if not prob.blocks:
        if prob.num_constraints and np.any(prob.b != 0):
            return _finish(prob, [], Status.INFEASIBLE, opts, info={"reason": "constraints without variables"})
        return _finish(prob, [], Status.FEASIBLE, opts)
    if prob.is_feasibility():
        return _solve_feasibility(prob, opts)
    return _solve_optimization(prob, opts)


def _polish(prob: SdpProblem, X: list[np.ndarray]) -> list[np.ndarray]:
    """Minimum-norm correction of ``X`` onto ``A(X) = b``.

    The correction lies in the span of the (symmetric) constraint matrices, so
    the blocks stay symmetric; it is tiny next to any strict margin.
    """
    if not prob.num_constraints or not X:
        return X
    M = np.concatenate([a.reshape(a.shape[0], -1) for a in prob.A], axis=1)
    flat = np.concatenate([np.asarray(x, dtype=float).reshape(-1) for x in X])
    dx, *_ = np.linalg.lstsq(M, prob.b - M @ flat, rcond=None)
    out, off = [], 0
    for k in prob.blocks:
        blk = (flat[off:off + k * k] + dx[off:off + k * k]).reshape(k, k)
        out.append((blk + blk.T) / 2)
        off += k * k
    return out


def _finish(prob, X, status, opts, y=None, dual=float("nan"), iterations=0, margin=None, info=None):
    max_res, min_eig = residuals(prob, X)
    if status in (Status.OPTIMAL, Status.FEASIBLE) and max_res > 0:
        Xp = _polish(prob, X)
        res_p, eig_p = residuals(prob, Xp)
        if res_p < max_res and eig_p >= min(min_eig, -opts.psd_tol):
            X, max_res, min_eig = Xp, res_p, eig_p
    obj = float(sum(np.sum(c * x) for c, x in zip(prob.C, X)))
    if status in (Status.OPTIMAL, Status.FEASIBLE):
        # never trust the loop's own bookkeeping: recheck the returned point
        if max_res > opts.feas_tol or min_eig < -opts.psd_tol:
            log.debug("solution failed revalidation: residual %.3g, min eig %.3g", max_res, min_eig)
            info = dict(info or {}, revalidation_failed=True)
            status = Status.NUMERICAL_FAILURE
    return SdpSolution(status, X, obj, max_res, min_eig, dual, y, iterations, margin, info or {})


def _solve_optimization(prob: SdpProblem, opts: SdpOptions) -> SdpSolution:
    red = _reduce(prob)
    if red.inconsistent:
        X = [np.zeros((k, k)) for k in prob.blocks]
        return _finish(prob, X, Status.INFEASIBLE, opts, info={"reason": "inconsistent equalities"})
    if red.A[0].shape[0] == 0:
        # no binding equalities: the optimum is X = 0 unless some C has a negative direction
        if all(np.linalg.eigvalsh(c)[0] >= 0 for c in prob.C if c.size):
            X = [np.zeros((k, k)) for k in prob.blocks]
            return _finish(prob, X, Status.OPTIMAL, opts, dual=0.0, info={"reason": "no constraints"})
        X = [np.zeros((k, k)) for k in prob.blocks]
        return _finish(prob, X, Status.INFEASIBLE, opts, info={"reason": "dual_infeasible"})
    out = _hsd(red.A, red.b, prob.C, opts)
    y = red.lift_y(out.y) if out.y is not None else None
    if out.status == "optimal":
        return _finish(prob, out.X, Status.OPTIMAL, opts, y=y, dual=out.dual, iterations=out.iterations)
    if out.status in ("primal_infeasible", "dual_infeasible"):
        return _finish(prob, out.X, Status.INFEASIBLE, opts, y=y, iterations=out.iterations,
                       info={"reason": out.status})
    return _finish(prob, out.X, Status.NUMERICAL_FAILURE, opts, y=y, iterations=out.iterations,
                   info={"reason": out.status})


def _solve_feasibility(prob: SdpProblem, opts: SdpOptions) -> SdpSolution:
    # X_b = Z_b + t I with t = cap - w, w >= 0 a 1x1 block; minimize w
    red = _reduce(prob)
    if red.inconsistent:
        X = [np.zeros((k, k)) for k in prob.blocks]
        return _finish(prob, X, Status.INFEASIBLE, opts, info={"reason": "inconsistent equalities"})
    cap = opts.margin_cap
    if red.A[0].shape[0] == 0:
        X = [cap * np.eye(k) for k in prob.blocks]
        return _finish(prob, X, Status.FEASIBLE, opts, margin=cap, info={"reason": "no constraints"})
    traces = sum(np.trace(a, axis1=1, axis2=2) for a in red.A)
    A_aug = list(red.A) + [(-traces).reshape(-1, 1, 1)]
    b_aug = red.b - cap * traces
    eps = opts.margin_regularization
    C_aug = [eps * np.eye(k) for k in prob.blocks] + [np.ones((1, 1))]
    out = _hsd(A_aug, b_aug, C_aug, opts)
    if out.status != "optimal":
        X = [np.zeros((k, k)) for k in prob.blocks]
        if out.X is not None:
            X = out.X[:-1]
        # the margin problem is always primal feasible, so anything else is numerical
        return _finish(prob, X, Status.NUMERICAL_FAILURE, opts, iterations=out.iterations,
                       info={"reason": out.status})
    margin = cap - float(out.X[-1][0, 0])
    X = [z + margin * np.eye(k) for z, k in zip(out.X[:-1], prob.blocks)]
    if margin >= opts.strict_margin:
        return _finish(prob, X, Status.FEASIBLE, opts, iterations=out.iterations, margin=margin)
    return _finish(prob, X, Status.INFEASIBLE, opts, iterations=out.iterations, margin=margin,
                   info={"reason": "eigenvalue margin below threshold"})


@dataclass
class _Reduced:
    A: list[np.ndarray]
    b: np.ndarray
    keep: np.ndarray
    inconsistent: bool
    m: int

    def lift_y(self, y):
        full = np.zeros(self.m)
        full[self.keep] = y
        return full


def _reduce(prob: SdpProblem) -> _Reduced:
    """Drop linearly dependent equalities; flag an inconsistent system."""
    m = prob.num_constraints
    if m == 0:
        return _Reduced(prob.A, prob.b, np.arange(0), False, 0)
    mat = np.concatenate([a.reshape(m, -1) for a in prob.A], axis=1)
    scale = np.maximum(np.linalg.norm(mat, axis=1), 1e-300)
    # pivoted QR on the transpose picks an independent subset of rows
    _, R, piv = sla.qr((mat / scale[:, None]).T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R)) if R.size else np.zeros(0)
    tol = max(mat.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0) * 10
    rank = int(np.sum(diag > tol))
    keep = np.sort(piv[:rank])
    inconsistent = False
    if rank < m:
        sol, *_ = np.linalg.lstsq(mat, prob.b, rcond=None)
        resid = mat @ sol - prob.b
        inconsistent = bool(np.max(np.abs(resid)) > 1e-9 * max(1.0, np.max(np.abs(prob.b))))
    return _Reduced([a[keep] for a in prob.A], prob.b[keep], keep, inconsistent, m)


@dataclass
class _HsdResult:
    status: str
    X: list | None
    y: np.ndarray | None
    dual: float
    iterations: int


def _inner(U, V):
    return sum(float(np.sum(u * v)) for u, v in zip(U, V))


def _max_step(X, dX):
    """Largest alpha keeping every block of X + alpha dX PSD."""
    alpha = np.inf
    for x, dx in zip(X, dX):
        try:
            L = np.linalg.cholesky(x)
        except np.linalg.LinAlgError:
            return 0.0
        Li = sla.solve_triangular(L, np.eye(len(x)), lower=True)
        M = Li @ dx @ Li.T
        lam = np.linalg.eigvalsh((M + M.T) / 2)[0]
        if lam < 0:
            alpha = min(alpha, -1.0 / lam)
    return alpha


def _hsd(A, b, C, opts: SdpOptions) -> _HsdResult:
    m = b.shape[0]
    ks = [a.shape[1] for a in A]
    nbar = sum(ks) + 1
    # row equilibration keeps the Schur complement reasonably conditioned
    rnorm = np.sqrt(sum(np.sum(a.reshape(m, -1) ** 2, axis=1) for a in A)) if m else np.zeros(0)
    rnorm = np.where(rnorm > 0, rnorm, 1.0)
    A = [a / rnorm[:, None, None] for a in A]
    b = b / rnorm
    Aflat = [a.reshape(m, -1) for a in A]
    bnorm = 1.0 + np.linalg.norm(b)
    cnorm = 1.0 + np.sqrt(_inner(C, C))

    X = [np.eye(k) for k in ks]
    S = [np.eye(k) for k in ks]
    y = np.zeros(m)
    tau = kappa = 1.0

    def op_A(V):
        out = np.zeros(m)
        for af, v in zip(Aflat, V):
            out += af @ v.reshape(-1)
        return out

    def op_At(w):
        return [np.tensordot(w, a, axes=1) for a in A]

    status = "max_iter"
    it = 0
    stall = 0
    best = None
    for it in range(1, opts.max_iter + 1):
        AX = op_A(X)
        ATy = op_At(y)
        cx = _inner(C, X)
        by = float(b @ y)
        F1 = AX - b * tau
        F2 = [aty + s - c * tau for aty, s, c in zip(ATy, S, C)]
        F3 = by - cx - kappa
        mu = (_inner(X, S) + tau * kappa) / nbar

        pres = np.linalg.norm(F1) / tau / bnorm
        dres = np.sqrt(_inner(F2, F2)) / tau / cnorm
        pobj, dobj = cx / tau, by / tau
        gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        log.debug("it %3d mu %.2e tau %.2e kappa %.2e pres %.2e dres %.2e pobj %.6e dobj %.6e",
                  it, mu, tau, kappa, pres, dres, pobj, dobj)
        if pres < opts.ipm_tol and dres < opts.ipm_tol and gap < opts.ipm_tol:
            status = "optimal"
            break
        score = max(pres, dres, gap)
        if best is None or score < best[0]:
            best = (score, [x.copy() for x in X], y.copy(), tau)
        if by > 0:
            ray = np.sqrt(sum(float(np.sum((aty + s) ** 2)) for aty, s in zip(ATy, S)))
            if ray / by < opts.infeas_tol and tau < 1e-3 * kappa:
                status = "primal_infeasible"
                break
        if cx < 0:
            if np.linalg.norm(AX) / (-cx) < opts.infeas_tol and tau < 1e-3 * kappa:
                status = "dual_infeasible"
                break
        if mu < 1e-16 * (1 + tau):
            status = "stalled"
            break

        try:
            Sinv = [np.linalg.inv(s) for s in S]
            Sinv = [(si + si.T) / 2 for si in Sinv]
            M = np.zeros((m, m))
            for a, af, x, si in zip(A, Aflat, X, Sinv):
                T = np.matmul(np.matmul(x, a), si)
                M += af @ T.reshape(m, -1).T
            M = (M + M.T) / 2
            cho = _factor(M)
        except np.linalg.LinAlgError:
            status = "singular_schur"
            break

        XCS = [x @ c @ si for x, c, si in zip(X, C, Sinv)]
        g = op_A(XCS)
        h = _inner(C, XCS)
        v = sla.cho_solve(cho, g + b)
        XF2S = [x @ f2 @ si for x, f2, si in zip(X, F2, Sinv)]
        AXF2S = op_A(XF2S)
        CXF2S = _inner(C, XF2S)

        def direction(sigma, eta, corrX, corrTK):
            R = [sigma * mu * si - x for si, x in zip(Sinv, X)]
            if corrX is not None:
                R = [r - cx_ for r, cx_ in zip(R, corrX)]
            rhs1 = -eta * F1 - op_A(R) - eta * AXF2S
            u = sla.cho_solve(cho, rhs1)
            tk = sigma * mu - tau * kappa - corrTK
            num = -eta * F3 - b @ u + _inner(C, R) + eta * CXF2S + g @ u + tk / tau
            den = b @ v - g @ v + h + kappa / tau
            dtau = num / den
            dy = u + dtau * v
            dS = [-eta * f2 - atdy + c * dtau for f2, atdy, c in zip(F2, op_At(dy), C)]
            dX = []
            for r, x, ds, si in zip(R, X, dS, Sinv):
                t = x @ ds @ si
                dX.append(r - (t + t.T) / 2)
            dkappa = (tk - kappa * dtau) / tau
            return dX, dy, dS, dtau, dkappa

        def step_len(dX, dS, dtau, dkappa):
            a = min(_max_step(X, dX), _max_step(S, dS))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a

        dXa, dya, dSa, dta, dka = direction(0.0, 1.0, None, 0.0)
        aa = min(1.0, step_len(dXa, dSa, dta, dka))
        mu_aff = (_inner([x + aa * d for x, d in zip(X, dXa)], [s + aa * d for s, d in zip(S, dSa)])
                  + (tau + aa * dta) * (kappa + aa * dka)) / nbar
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3))
        corr = []
        for dx, ds, si in zip(dXa, dSa, Sinv):
            t = dx @ ds @ si
            corr.append((t + t.T) / 2)
        dX, dy, dS, dtau, dkappa = direction(sigma, 1.0 - sigma, corr, dta * dka)
        amax = step_len(dX, dS, dtau, dkappa)
        alpha = min(1.0, 0.98 * amax)
        if not np.isfinite(alpha) or alpha < 1e-12:
            stall += 1
            if stall > 3:
                status = "stalled"
                break
            alpha = 0.0
        X = [x + alpha * d for x, d in zip(X, dX)]
        S = [s + alpha * d for s, d in zip(S, dS)]
        X = [(x + x.T) / 2 for x in X]
        S = [(s + s.T) / 2 for s in S]
        y = y + alpha * dy
        tau += alpha * dtau
        kappa += alpha * dkappa
        if not (np.isfinite(tau) and np.isfinite(kappa)):
            status = "diverged"
            break

    if status != "optimal" and status not in ("primal_infeasible", "dual_infeasible"):
        if best is not None and best[0] < opts.ipm_loose_tol:
            log.debug("accepting best iterate (score %.2e) after %s", best[0], status)
            status = "optimal"
            _, X, y, tau = best
    Xout = [x / tau for x in X] if tau > 0 else X
    yout = (y / tau if tau > 0 else y) / rnorm
    dual = float(b @ y / tau) if tau > 0 else float("nan")
    log.debug("hsd finished: %s after %d iterations (tau=%.3g, kappa=%.3g)", status, it, tau, kappa)
    return _HsdResult(status, Xout, yout, dual, it)


def _factor(M):
    try:
        return sla.cho_factor(M, lower=True)
    except np.linalg.LinAlgError:
        # near the end of a run M loses definiteness to rounding; nudge the diagonal
        reg = 1e-14 * max(1.0, float(np.max(np.abs(np.diag(M)))))
        for _ in range(6):
            try:
                return sla.cho_factor(M + reg * np.eye(len(M)), lower=True)
            except np.linalg.LinAlgError:
                reg *= 100
        raise


# -- SDPA sparse format ------------------------------------------------------
#
# Written as the SDPA dual form:  max <F0, Y>  s.t. <F_i, Y> = c_i,  Y PSD,
# so F_i = A_i, c_i = b_i and F0 = -C. Only the upper triangle is listed.


def export_sdpa(prob: SdpProblem, comment: str | None = None) -> str:
    lines = []
    if comment:
        lines.extend('" ' + ln for ln in comment.splitlines())
    m = prob.num_constraints
    lines.append(str(m))
    lines.append(str(len(prob.blocks)))
    lines.append(" ".join(str(k) for k in prob.blocks))
    lines.append(" ".join(repr(float(v)) for v in prob.b))
    for blk, c in enumerate(prob.C, start=1):
        for i, j in zip(*np.triu_indices(c.shape[0])):
            if c[i, j] != 0:
                lines.append(f"0 {blk} {i + 1} {j + 1} {repr(float(-c[i, j]))}")
    for mat in range(m):
        for blk, a in enumerate(prob.A, start=1):
            ai = a[mat]
            for i, j in zip(*np.triu_indices(ai.shape[0])):
                if ai[i, j] != 0:
                    lines.append(f"{mat + 1} {blk} {i + 1} {j + 1} {repr(float(ai[i, j]))}")
    return "\n".join(lines) + "\n"


def import_sdpa(text: str) -> SdpProblem:
    rows = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line[0] in '"*':
            continue
        rows.append(line.replace(",", " ").replace("{", " ").replace("}", " ").replace("(", " ").replace(")", " "))
    m = int(rows[0].split()[0])
    nblocks = int(rows[1].split()[0])
    blocks = [abs(int(v)) for v in rows[2].split()[:nblocks]]
    b = [float(v) for v in rows[3].split()[:m]]
    A = [np.zeros((m, k, k)) for k in blocks]
    C = [np.zeros((k, k)) for k in blocks]
    for line in rows[4:]:
        parts = line.split()
        mat, blk, i, j = (int(p) for p in parts[:4])
        val = float(parts[4])
        target = C[blk - 1] if mat == 0 else A[blk - 1][mat - 1]
        if mat == 0:
            val = -val
        target[i - 1, j - 1] = val
        target[j - 1, i - 1] = val
    return SdpProblem(blocks, A, np.array(b), C)
