"""Region-of-attraction estimation from SOS Lyapunov certificates.

The pipeline is: bisect on the ball radius ``r`` with the certificate program
as oracle, find the largest level ``a`` whose sublevel set of the certified
``P`` stays inside the ball, then rasterize that sublevel set and keep the
face-connected component around the origin.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import sos
from .odesim import Grid, origin_component
from .poly import Polynomial, VectorField, lie_derivative
from .sdp import SdpOptions, SdpSolution, Status, solve
from .setgeom import discretization_error, hausdorff

log = logging.getLogger(__name__)

SAMPLE_TOL = 1e-6


class Outcome(str, enum.Enum):
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    UNKNOWN = "Unknown"


class NoFeasibleRadius(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class SampledConditionViolated(RuntimeError):
    def __init__(self, message, point):
        super().__init__(f"{message} at {list(point)}")
        self.point = np.asarray(point)


@dataclass
class OracleResult:
    outcome: Outcome
    r: float
    certificate: sos.SosCertificate | None = None
    solution: SdpSolution | None = None
    detail: str = ""

    @property
    def feasible(self) -> bool:
        return self.outcome is Outcome.FEASIBLE


def h_oracle(f: VectorField, d: int, r: float, beta: float = 1e-3, gamma: float = 1e3,
             delta: float = 1e-3, sdp_options: SdpOptions | None = None) -> OracleResult:
    """Build, solve and validate the certificate program at radius ``r``."""
    if not r > 0:
        raise ValueError("radius must be positive")
    prog = sos.build_h_program(f, d, r, beta, gamma, delta)
    cp = sos.compile(prog)
    sol = solve(cp.problem, sdp_options)
    if sol.status is Status.INFEASIBLE:
        return OracleResult(Outcome.INFEASIBLE, r, solution=sol, detail=str(sol.info.get("reason", "")))
    if not sol.ok:
        return OracleResult(Outcome.UNKNOWN, r, solution=sol, detail=str(sol.info))
    try:
        cert = sos.extract_certificate(prog, cp, sol)
    except sos.SosError as exc:
        log.warning("r=%.6g: solver reported feasible but the certificate failed validation: %s", r, exc)
        return OracleResult(Outcome.UNKNOWN, r, solution=sol, detail=str(exc))
    return OracleResult(Outcome.FEASIBLE, r, cert, sol)


def make_h_oracle(f: VectorField, d: int, beta: float = 1e-3, gamma: float = 1e3, delta: float = 1e-3,
                  sdp_options: SdpOptions | None = None) -> Callable[[float], OracleResult]:
    def oracle(r: float) -> OracleResult:
        return h_oracle(f, d, r, beta, gamma, delta, sdp_options)

    return oracle


def shape_certificate(f: VectorField, d: int, r: float, beta: float = 1e-3, gamma: float = 1e3,
                      delta: float = 1e-3, slack: float = 0.05,
                      sdp_options: SdpOptions | None = None) -> OracleResult:
    """A certificate at radius ``r`` chosen for a large sublevel set.

    Among the certificates with ``P >= 1`` on the sphere, the ball integral
    of ``P`` is minimized; that optimum sits on the boundary of the PSD cone,
    so a second, strictly feasible solve accepts any certificate whose
    integral is within ``(1 + slack)`` of it.
    """
    if not r > 0:
        raise ValueError("radius must be positive")
    if not slack > 0:
        raise ValueError("slack must be positive")
    prog = sos.build_shaped_h_program(f, d, r, beta, gamma, delta)
    cp = sos.compile(prog)
    first = solve(cp.problem, sdp_options)
    if first.status is Status.INFEASIBLE:
        return OracleResult(Outcome.INFEASIBLE, r, solution=first, detail="shaping program infeasible")
    if first.objective_value is None or first.max_equality_residual > 1e-4:
        return OracleResult(Outcome.UNKNOWN, r, solution=first, detail=str(first.info))
    best = first.objective_value + cp.objective_offset
    bound = best + slack * abs(best)
    prob = cp.problem
    # <C, G> + w = bound - offset with a slack block w >= 0
    A = [np.concatenate([a, c[None]], axis=0) for a, c in zip(prob.A, prob.C)]
    w = np.zeros((prob.num_constraints + 1, 1, 1))
    w[-1, 0, 0] = 1.0
    bounded = sos.SdpProblem(list(prob.blocks) + [1], A + [w], np.append(prob.b, bound - cp.objective_offset))
    sol = solve(bounded, sdp_options)
    if not sol.ok:
        return OracleResult(Outcome.UNKNOWN, r, solution=sol, detail=str(sol.info))
    try:
        cert = sos.extract_certificate(prog, cp, sol)
    except sos.SosError as exc:
        return OracleResult(Outcome.UNKNOWN, r, solution=sol, detail=str(exc))
    return OracleResult(Outcome.FEASIBLE, r, cert, sol, detail=f"ball integral {best:.6g} (+{slack:g})")


@dataclass
class BisectionStep:
    r: float
    feasible: bool
    outcome: Outcome
    certificate: object = None


@dataclass
class BisectionTrace:
    steps: list[BisectionStep] = field(default_factory=list)
    r_lo: float = 0.0
    r_hi: float = 0.0
    tol: float = 0.0

    def monotonicity_violations(self) -> list[tuple[float, float]]:
        """(feasible r, infeasible r) pairs where a larger radius passed and a smaller failed."""
        feas = [s.r for s in self.steps if s.feasible]
        infeas = [s.r for s in self.steps if not s.feasible]
        return [(a, b) for a in feas for b in infeas if a > b]


def bisect_radius(oracle: Callable[[float], OracleResult], r_min: float = 0.0, r_max: float = 1.0,
                  tol: float = 1e-3, max_iter: int = 200):
    """Largest certified radius in ``[r_min, r_max]`` to within ``tol``.

    Midpoint bisection; Unknown outcomes count as infeasible. Returns
    ``(r_best, result, trace)`` where ``result`` is the oracle result of the
    last feasible call.
    """
    if not 0 <= r_min < r_max:
        raise ValueError("need 0 <= r_min < r_max")
    if not tol > 0:
        raise ValueError("tol must be positive")
    trace = BisectionTrace(tol=tol)
    lo, hi = r_min, r_max
    best = None
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        res = oracle(mid)
        trace.steps.append(BisectionStep(mid, res.feasible, res.outcome, res.certificate))
        log.info("radius %.6g: %s", mid, res.outcome.value)
        if res.feasible:
            lo, best = mid, res
        else:
            hi = mid
    trace.r_lo, trace.r_hi = lo, hi
    if best is None:
        if r_min > 0:
            res = oracle(r_min)
            trace.steps.append(BisectionStep(r_min, res.feasible, res.outcome, res.certificate))
            if res.feasible:
                return r_min, res, trace
        raise NoFeasibleRadius(f"no certified radius in [{r_min}, {r_max}]", trace)
    if trace.monotonicity_violations():
        log.warning("feasibility was not monotone in r: %s", trace.monotonicity_violations())
    return lo, best, trace


@dataclass
class LevelResult:
    a: float
    upper_bound: float
    steps: list[tuple[float, bool]]
    diagnostic: str = ""


def _sphere_directions(n: int, count: int = 720, seed: int = 0) -> np.ndarray:
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        th = np.linspace(0, 2 * np.pi, count, endpoint=False)
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    g = np.random.default_rng(seed).standard_normal((count * n, n))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


CONTAINMENTS = ("ball", "sphere")


def level_feasible(P: Polynomial, a: float, r: float, d_mult: int = 0,
                   sdp_options: SdpOptions | None = None, containment: str = "ball") -> bool:
    """Whether containment of {P <= a} in the radius-``r`` ball is certified.

    ``containment="ball"`` certifies the whole sublevel set; ``"sphere"``
    certifies ``P > a`` on the sphere, which confines only the component
    holding the origin (all that an estimate uses).
    """
    if containment == "ball":
        prog = sos.build_level_program(P, a, r, d_mult)
    elif containment == "sphere":
        prog = sos.build_sphere_level_program(P, a, r)
    else:
        raise ValueError(f"unknown containment {containment!r}; expected one of {CONTAINMENTS}")
    cp = sos.compile(prog)
    sol = solve(cp.problem, sdp_options)
    if not sol.ok:
        return False
    rec = sos.recover(cp, sol)
    ok = max(rec.identity_residuals.values()) <= sos.CERT_RESIDUAL_TOL and rec.min_gram_eigenvalue >= -sos.CERT_PSD_TOL
    if not ok:
        log.warning("level %.6g: containment certificate failed revalidation", a)
    return ok


def max_level(P: Polynomial, r: float, tol: float = 1e-3, d_mult: int = 0, gamma: float | None = None,
              relative: bool = False, sdp_options: SdpOptions | None = None,
              containment: str = "ball") -> LevelResult:
    """Largest ``a`` (within ``tol``) with {P <= a} certified inside the ball of radius ``r``.

    The search bracket is ``[0, hi]`` where ``hi`` is the smaller of
    ``gamma r^2`` and the least sampled value of ``P`` just outside the ball;
    no larger level can be contained. With ``relative`` the tolerance is a
    fraction of ``hi``. ``containment`` selects the certificate, see
    :func:`level_feasible`.
    """
    if containment not in CONTAINMENTS:
        raise ValueError(f"unknown containment {containment!r}; expected one of {CONTAINMENTS}")
    if not r > 0:
        raise ValueError("radius must be positive")
    dirs = _sphere_directions(P.nvars)
    hi = float(np.min(P.evaluate_many(dirs * (r * (1 + 1e-6)))))
    if gamma is not None:
        hi = min(hi, gamma * r * r * (1 + 1e-6) ** 2)
    tol_abs = tol * hi if relative else tol
    lo = 0.0
    steps = []
    if hi <= 0:
        return LevelResult(0.0, hi, steps, "P is not positive outside the ball")
    while hi - lo > tol_abs:
        mid = 0.5 * (lo + hi)
        ok = level_feasible(P, mid, r, d_mult, sdp_options, containment)
        steps.append((mid, ok))
        if ok:
            lo = mid
        else:
            hi = mid
    diag = ""
    if lo == 0.0:
        diag = "no positive level could be certified"
        log.error("max_level: %s (r=%g)", diag, r)
    return LevelResult(lo, hi, steps, diag)


@dataclass
class RoaEstimate:
    certificate: sos.SosCertificate
    level: float
    component: np.ndarray
    grid: Grid
    mask: np.ndarray
    r: float
    d: int
    r_star_estimate: float
    hausdorff_to_reference: float | None = None
    trace: BisectionTrace | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.component.shape[0])

    def boundary(self) -> np.ndarray:
        from .odesim import boundary_cells

        return self.grid.points()[boundary_cells(self.mask).reshape(-1)]


def scaled_certificate(cert: sos.SosCertificate, c: float) -> sos.SosCertificate:
    """The same certificate for ``c * P`` (all identities scale linearly)."""
    if not c > 0:
        raise ValueError("scale must be positive")
    return sos.SosCertificate(
        P=cert.P * c,
        multipliers=[m * c for m in cert.multipliers],
        grams={k: g * c for k, g in cert.grams.items()},
        bases=dict(cert.bases),
        beta=cert.beta * c, gamma=cert.gamma * c, delta=cert.delta * c,
        r=cert.r, d=cert.d, vector_field=cert.vector_field,
    )


def verify_component(cert: sos.SosCertificate, a: float, grid_resolution: int = 401,
                     pad: float = 1.05, tol: float = SAMPLE_TOL, validate: bool = True) -> RoaEstimate:
    """Rasterize {P <= a} within the ball and keep the component holding the origin.

    Every cell centre of that component is checked against the certificate's
    pointwise conditions; a failure raises :class:`SampledConditionViolated`.
    """
    if validate:
        sos.validate_certificate(cert)
    if a < 0:
        raise ValueError("level must be nonnegative")
    n = cert.P.nvars
    r = cert.r
    grid = Grid.centered(pad * r, n, grid_resolution)
    pts = grid.points()
    pv = cert.P.evaluate_many(pts)
    sq = np.sum(pts**2, axis=1)
    mask = ((pv <= a) & (sq <= r * r)).reshape(grid.resolution)
    seed = grid.cell_of(np.zeros(n))
    mask[seed] = True
    comp = origin_component(mask, seed)
    flat = comp.reshape(-1)
    D = pts[flat]
    sqD, pD = sq[flat], pv[flat]
    lie = lie_derivative(cert.P, cert.vector_field).evaluate_many(D)
    checks = [
        (cert.beta * sqD - pD > tol, "P below beta |x|^2"),
        (pD - cert.gamma * sqD > tol, "P above gamma |x|^2"),
        (lie + cert.delta * sqD > tol, "P not decreasing at rate delta |x|^2"),
    ]
    for bad, what in checks:
        if np.any(bad):
            raise SampledConditionViolated(what, D[np.argmax(bad)])
    return RoaEstimate(cert, a, D, grid, comp, r, cert.d, r, metadata={
        "grid_diagonal": grid.diagonal,
        "discretization_error": discretization_error(grid.spacing),
    })


@dataclass
class EstimateConfig:
    r_min: float = 0.0
    r_max: float = 1.0
    r_tol: float = 1e-3
    # relative to the level search bracket
    a_tol: float = 1e-3
    beta: float = 1e-3
    gamma: float = 1e3
    delta: float = 1e-3
    grid_resolution: int = 401
    level_multiplier_degree: int | None = None
    # "sphere": confine only the origin's component; "ball": the whole sublevel set
    level_containment: str = "sphere"
    # "shaped": re-solve for large sublevel sets at the radii below;
    # "feasibility": keep the bisection certificate at r_best
    certificate_selection: str = "shaped"
    shape_slack: float = 0.05
    # candidate radii as fractions of r_best; the largest certified component wins
    radius_fractions: tuple[float, ...] = (1.0, 0.975, 0.95, 0.925, 0.9, 0.875, 0.85, 0.825, 0.8)
    sdp: SdpOptions = field(default_factory=SdpOptions)

    def __post_init__(self):
        for name in ("r_tol", "a_tol", "beta", "gamma", "delta", "shape_slack"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.certificate_selection not in ("shaped", "feasibility"):
            raise ValueError("certificate_selection must be 'shaped' or 'feasibility'")
        if self.level_containment not in CONTAINMENTS:
            raise ValueError(f"level_containment must be one of {CONTAINMENTS}")
        if not 0 <= self.r_min < self.r_max:
            raise ValueError("need 0 <= r_min < r_max")
        self.radius_fractions = tuple(float(q) for q in self.radius_fractions)
        if not self.radius_fractions or not all(0 < q <= 1 for q in self.radius_fractions):
            raise ValueError("radius_fractions must be nonempty and within (0, 1]")


def level_degree_for(d: int, override: int | None = None) -> int:
    if override is not None:
        return override
    return max(0, 2 * math.ceil(d / 2) - 2)


def _component_area(est: RoaEstimate) -> float:
    return est.size * float(np.prod(est.grid.spacing))


def _certify_component(cert: sos.SosCertificate, d_mult: int, config: EstimateConfig):
    level = max_level(cert.P, cert.r, config.a_tol, d_mult, gamma=cert.gamma, relative=True,
                      sdp_options=config.sdp, containment=config.level_containment)
    return level, verify_component(cert, level.a, config.grid_resolution)


def estimate_roa(f: VectorField, d: int, config: EstimateConfig | None = None,
                 reference=None) -> RoaEstimate:
    """Bisection on ``r``, largest certified level, then the verified component.

    With shaped selection, certificates are re-solved at a few radii at or
    below ``r_best`` and the one whose verified component has the largest
    area is kept (each candidate is a sound inner approximation on its own).
    ``reference`` is an optional point set (same coordinates as ``f``) used
    for the Hausdorff distance of the estimate.
    """
    config = config or EstimateConfig()
    d_eff = 2 * math.ceil(d / 2)
    meta: dict = {"requested_degree": d, "degree": d_eff}
    if d_eff != d:
        meta["note"] = f"odd degree {d} rounded up to {d_eff} for the Gram bases"
    oracle = make_h_oracle(f, d_eff, config.beta, config.gamma, config.delta, config.sdp)
    r_best, res, trace = bisect_radius(oracle, config.r_min, config.r_max, config.r_tol)
    d_mult = level_degree_for(d_eff, config.level_multiplier_degree)

    candidates = []
    if config.certificate_selection == "shaped":
        for q in config.radius_fractions:
            r = r_best * q
            shaped = shape_certificate(f, d_eff, r, config.beta, config.gamma, config.delta,
                                       config.shape_slack, config.sdp)
            if shaped.certificate is None:
                log.info("d=%d: no shaped certificate at r=%.6g (%s)", d_eff, r, shaped.detail)
                continue
            level, est = _certify_component(shaped.certificate, d_mult, config)
            candidates.append((_component_area(est), r, "shaped", level, est))
    if not candidates:
        if config.certificate_selection == "shaped":
            log.warning("d=%d: shaping failed at every radius; keeping the bisection certificate", d_eff)
        level, est = _certify_component(res.certificate, d_mult, config)
        candidates.append((_component_area(est), r_best, "feasibility", level, est))
    area, r_used, selection, level, est = max(candidates, key=lambda c: (c[0], c[1]))

    est.d = d_eff
    est.trace = trace
    est.r_star_estimate = r_best + config.r_tol
    meta.update(est.metadata)
    meta.update({
        "r_best": r_best,
        "certificate_radius": r_used,
        "certificate_selection": selection,
        "component_area": area,
        "candidate_areas": {repr(c[1]): c[0] for c in candidates},
        "level_multiplier_degree": d_mult,
        "level_containment": config.level_containment,
        "level_upper_bound": level.upper_bound,
        "level_diagnostic": level.diagnostic,
        "bisection_steps": len(trace.steps),
        "monotonicity_violations": trace.monotonicity_violations(),
    })
    est.metadata = meta
    if reference is not None and len(reference):
        est.hausdorff_to_reference = hausdorff(est.component, reference)
    return est
