"""Trajectory integration and a reference region of attraction by classification.

The integrator is the Dormand-Prince 5(4) embedded pair with per-trajectory
adaptive steps. It works on a batch of initial states at once, which is how
whole grids are classified; :func:`integrate` is the single-trajectory view.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .poly import VectorField

log = logging.getLogger(__name__)

# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


class Verdict(str, enum.Enum):
    CONVERGED = "ConvergedToOrigin"
    DIVERGED = "Diverged"
    UNDECIDED = "Undecided"


_VERDICTS = [Verdict.UNDECIDED, Verdict.CONVERGED, Verdict.DIVERGED]


class Label(enum.IntEnum):
    OUTSIDE = 0
    INSIDE = 1
    UNDECIDED = 2


@dataclass
class IntegratorOptions:
    rtol: float = 1e-6
    atol: float = 1e-8
    converge_eps: float = 1e-3
    escape_radius: float = 10.0
    max_steps: int = 100_000
    h_init: float = 1e-2
    # fixed step size; disables error control when set
    fixed_step: float | None = None


@dataclass
class Trajectory:
    x0: np.ndarray
    times: np.ndarray
    states: np.ndarray
    verdict: Verdict

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def _stages(f, x, h):
    k = [f(x)]
    for i in range(1, 7):
        incr = sum(a * kj for a, kj in zip(_A[i], k) if a != 0.0)
        k.append(f(x + h[:, None] * incr))
    return k


@dataclass
class BatchResult:
    codes: np.ndarray
    states: np.ndarray
    times: np.ndarray
    histories: list | None = None

    @property
    def verdicts(self) -> list[Verdict]:
        return [_VERDICTS[c] for c in self.codes]

    def count(self, verdict: Verdict) -> int:
        return int(np.sum(self.codes == _VERDICTS.index(verdict)))

    def mask(self, verdict: Verdict) -> np.ndarray:
        return self.codes == _VERDICTS.index(verdict)


def integrate_batch(f: VectorField, X0, t_max: float, opts: IntegratorOptions | None = None,
                    record=False) -> BatchResult:
    """Integrate every row of ``X0`` up to ``t_max`` (negative: backwards).

    With ``record``, ``histories`` holds ``(times, states)`` of every accepted
    step per row.
    """
    opts = opts or IntegratorOptions()
    X = np.array(X0, dtype=float, ndmin=2)
    B = X.shape[0]
    direction = 1.0 if t_max >= 0 else -1.0
    span = abs(t_max)
    t = np.zeros(B)
    h = np.full(B, opts.fixed_step if opts.fixed_step else opts.h_init)
    code = np.zeros(B, dtype=np.int8)  # indexes _VERDICTS
    active = np.ones(B, dtype=bool)
    steps = np.zeros(B, dtype=np.int64)
    hist = [([0.0], [X[i].copy()]) for i in range(B)] if record else None

    def classify(idx):
        norms = np.linalg.norm(X[idx], axis=1)
        bad = ~np.all(np.isfinite(X[idx]), axis=1)
        div = bad | (norms >= opts.escape_radius)
        conv = ~div & (norms <= opts.converge_eps)
        code[idx[conv]] = 1
        code[idx[div]] = 2
        active[idx[conv | div]] = False

    classify(np.arange(B))
    if span == 0.0:
        active[:] = False

    while np.any(active):
        idx = np.nonzero(active)[0]
        x = X[idx]
        hh = np.minimum(h[idx], span - t[idx])
        k = _stages(f, x, direction * hh)
        y5 = x + (direction * hh)[:, None] * sum(b * kj for b, kj in zip(_B5, k) if b != 0.0)
        if opts.fixed_step:
            accept = np.ones(len(idx), dtype=bool)
            h_new = h[idx]
        else:
            err_vec = (direction * hh)[:, None] * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
            scale = opts.atol + opts.rtol * np.maximum(np.abs(x), np.abs(y5))
            err = np.sqrt(np.mean((err_vec / scale) ** 2, axis=1))
            err = np.where(np.isfinite(err), err, np.inf)
            accept = err <= 1.0
            with np.errstate(divide="ignore"):
                factor = np.where(err > 0, 0.9 * err ** -0.2, 5.0)
            h_new = hh * np.clip(factor, 0.2, 5.0)
        acc = idx[accept]
        X[acc] = y5[accept]
        t[acc] += hh[accept]
        h[idx] = h_new
        steps[idx] += 1
        if record:
            for j in acc:
                hist[j][0].append(direction * t[j])
                hist[j][1].append(X[j].copy())
        classify(acc)
        # time budget exhausted or step-size collapse: undecided, never an exception
        done = (t[idx] >= span * (1 - 1e-14)) | (steps[idx] >= opts.max_steps)
        done |= h[idx] < 1e-12 * np.maximum(1.0, t[idx])
        active[idx[done]] = False

    histories = [(np.array(ts), np.array(xs)) for ts, xs in hist] if record else None
    return BatchResult(code, X, direction * t, histories)


def integrate(f: VectorField, x0, t_max: float, opts: IntegratorOptions | None = None) -> Trajectory:
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")
    res = integrate_batch(f, x0[None, :], t_max, opts, record=True)
    times, states = res.histories[0]
    return Trajectory(x0, times, states, res.verdicts[0])


def check_exponential_decay(f: VectorField, points, mu: float, delta: float, t_max: float,
                            opts: IntegratorOptions | None = None) -> float:
    """Worst ``|x(t)| - mu |x0| exp(-delta t)`` over the points and accepted steps.

    Returns ``-inf`` for an empty point list. Integration runs to ``t_max``
    without the early convergence exit.
    """
    if not (mu > 0 and delta > 0):
        raise ValueError("mu and delta must be positive")
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return float("-inf")
    pts = pts.reshape(len(pts), -1)
    base = opts or IntegratorOptions(rtol=1e-10, atol=1e-12)
    opts = IntegratorOptions(**{**base.__dict__, "converge_eps": 0.0})
    res = integrate_batch(f, pts, t_max, opts, record=True)
    worst = float("-inf")
    for x0, (times, states) in zip(pts, res.histories):
        bound = mu * np.linalg.norm(x0) * np.exp(-delta * np.abs(times))
        worst = max(worst, float(np.max(np.linalg.norm(states, axis=1) - bound)))
    return worst


# -- reference region of attraction --------------------------------------------


@dataclass
class Grid:
    """Cell-centred uniform grid over an axis-aligned box."""

    lower: np.ndarray
    upper: np.ndarray
    resolution: tuple[int, ...]

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if np.isscalar(self.resolution) or isinstance(self.resolution, int):
            self.resolution = (int(self.resolution),) * len(self.lower)
        self.resolution = tuple(int(r) for r in self.resolution)
        if any(r < 1 for r in self.resolution):
            raise ValueError("grid resolution must be at least 1")
        if np.any(self.upper <= self.lower):
            raise ValueError("box upper corner must exceed lower corner")

    @classmethod
    def centered(cls, half_width: float, dim: int, resolution: int) -> Grid:
        return cls(np.full(dim, -half_width), np.full(dim, half_width), (resolution,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / np.array(self.resolution)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.spacing))

    def axes(self) -> list[np.ndarray]:
        return [lo + (np.arange(n) + 0.5) * h for lo, n, h in zip(self.lower, self.resolution, self.spacing)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def cell_of(self, x) -> tuple[int, ...]:
        idx = np.floor((np.asarray(x, dtype=float) - self.lower) / self.spacing).astype(int)
        return tuple(int(np.clip(i, 0, n - 1)) for i, n in zip(idx, self.resolution))

    def to_json(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "resolution": list(self.resolution)}


def origin_component(mask: np.ndarray, seed: tuple[int, ...]) -> np.ndarray:
    """Cells of ``mask`` face-connected to ``seed`` (4-neighbour in 2-D)."""
    if not mask[seed]:
        return np.zeros_like(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    labels, _ = ndimage.label(mask, structure=structure)
    return labels == labels[seed]


def boundary_cells(mask: np.ndarray) -> np.ndarray:
    """Cells of ``mask`` with at least one face neighbour outside it (or on the grid edge)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded.copy()
    for axis in range(mask.ndim):
        interior &= np.roll(padded, 1, axis=axis) & np.roll(padded, -1, axis=axis)
    inner = interior[tuple(slice(1, -1) for _ in range(mask.ndim))]
    return mask & ~inner


@dataclass
class ReferenceRoa:
    grid: Grid
    labels: np.ndarray
    t_max: float
    options: IntegratorOptions = field(default_factory=IntegratorOptions)

    @property
    def inside_mask(self) -> np.ndarray:
        return self.labels == Label.INSIDE

    def inside_points(self) -> np.ndarray:
        return self.grid.points()[self.inside_mask.reshape(-1)]

    def undecided_points(self) -> np.ndarray:
        return self.grid.points()[(self.labels == Label.UNDECIDED).reshape(-1)]

    def boundary_points(self) -> np.ndarray:
        return self.grid.points()[boundary_cells(self.inside_mask).reshape(-1)]

    def counts(self) -> dict[str, int]:
        return {lab.name.lower(): int(np.sum(self.labels == lab)) for lab in Label}

    def write_csv(self, grid_path, boundary_path=None) -> None:
        pts = self.grid.points()
        flat = self.labels.reshape(-1)
        with open(grid_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(self.grid.dim)] + ["label"])
            for p, lab in zip(pts.tolist(), flat.tolist()):
                w.writerow([repr(v) for v in p] + [Label(lab).name.capitalize()])
        if boundary_path is not None:
            from .setgeom import write_point_set

            b = self.boundary_points()
            write_point_set(boundary_path, b if len(b) else np.zeros((0, self.grid.dim)))


def read_labeled_grid(path) -> tuple[np.ndarray, np.ndarray]:
    """Points and labels from a labeled-grid CSV."""
    pts, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            pts.append([float(v) for v in row[:-1]])
            labels.append(Label[row[-1].upper()].value)
    return np.array(pts), np.array(labels)


def reference_roa(f: VectorField, grid: Grid, t_max: float = 100.0,
                  opts: IntegratorOptions | None = None) -> ReferenceRoa:
    """Classify every grid cell centre by forward integration.

    The origin cell is always Inside. Converged cells not face-connected to it
    are relabeled Undecided so the Inside region is a single component.
    """
    opts = opts or IntegratorOptions()
    if np.any(grid.lower > 0) or np.any(grid.upper < 0):
        raise ValueError("reference box must contain the origin")
    pts = grid.points()
    res = integrate_batch(f, pts, t_max, opts)
    labels = np.full(len(pts), Label.UNDECIDED, dtype=np.int8)
    labels[res.mask(Verdict.CONVERGED)] = Label.INSIDE
    labels[res.mask(Verdict.DIVERGED)] = Label.OUTSIDE
    labels = labels.reshape(grid.resolution)
    seed = grid.cell_of(np.zeros(grid.dim))
    labels[seed] = Label.INSIDE
    inside = labels == Label.INSIDE
    comp = origin_component(inside, seed)
    stray = inside & ~comp
    if np.any(stray):
        log.info("%d converged cells are disconnected from the origin; marked undecided", int(stray.sum()))
        labels[stray] = Label.UNDECIDED
    return ReferenceRoa(grid, labels, t_max, opts)
