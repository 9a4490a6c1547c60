"""Distances between finite point sets.

``directed_distance(A, B)`` is the farthest any point of A sits from B;
``hausdorff`` is the larger of the two directions. Point sets are ``(N, n)``
float arrays.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

# above this many point pairs, nearest neighbours come from a KD-tree; the
# winning distance is then recomputed with the same arithmetic as the brute force
KDTREE_THRESHOLD = 10_000_000
_CHUNK = 2048


class EmptyPointSetError(ValueError):
    pass


class SubsetError(ValueError):
    pass


def as_point_set(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"point set must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point sets must be finite")
    return arr


def _check_pair(A, B):
    A, B = as_point_set(A), as_point_set(B)
    if len(A) == 0 or len(B) == 0:
        raise EmptyPointSetError("metric operations need nonempty point sets")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return A, B


def _norms(diff: np.ndarray) -> np.ndarray:
    """Euclidean norms along the last axis, scaled by the largest component.

    Scaling keeps tiny (subnormal) and huge differences from underflowing or
    overflowing when squared; components are accumulated in order so every
    entry equals :func:`_norm` bit for bit.
    """
    m = np.max(np.abs(diff), axis=-1)
    s = np.where(m > 0, m, 1.0)
    t = diff[..., 0] / s
    acc = t * t
    for k in range(1, diff.shape[-1]):
        t = diff[..., k] / s
        acc = acc + t * t
    return m * np.sqrt(acc)


def _norm(diff: list[float]) -> float:
    m = max(abs(v) for v in diff)
    s = m if m > 0 else 1.0
    t = diff[0] / s
    acc = t * t
    for v in diff[1:]:
        t = v / s
        acc = acc + t * t
    return m * math.sqrt(acc)


def _pair_distances(a: np.ndarray, B: np.ndarray) -> np.ndarray:
    return _norms(a[:, None, :] - B[None, :, :])


def nearest_distances(A, B) -> np.ndarray:
    """For each point of A, the distance to its nearest point in B."""
    A, B = _check_pair(A, B)
    if len(A) * len(B) > KDTREE_THRESHOLD:
        _, idx = cKDTree(B).query(A, k=1)
        return _norms(A - B[idx])
    out = np.empty(len(A))
    for start in range(0, len(A), _CHUNK):
        block = A[start:start + _CHUNK]
        out[start:start + _CHUNK] = _pair_distances(block, B).min(axis=1)
    return out


def directed_distance(A, B) -> float:
    return float(nearest_distances(A, B).max())


def hausdorff(A, B) -> float:
    return max(directed_distance(A, B), directed_distance(B, A))


def directed_distance_bruteforce(A, B) -> float:
    """Pure-Python max-min over all pairs (reference implementation)."""
    A, B = _check_pair(A, B)
    worst = 0.0
    for a in A.tolist():
        best = math.inf
        for b in B.tolist():
            best = min(best, _norm([x - y for x, y in zip(a, b)]))
        worst = max(worst, best)
    return worst


def is_subset(A, B) -> bool:
    """Exact point-wise containment of A in B."""
    A, B = _check_pair(A, B)
    rows = {tuple(p) for p in B.tolist()}
    return all(tuple(p) in rows for p in A.tolist())


def _first_missing(A, B):
    rows = {tuple(p) for p in B.tolist()}
    for p in A.tolist():
        if tuple(p) not in rows:
            return p
    return None


def check_nested_triangle(X, Y, Z) -> bool:
    """For X in Y in Z, whether H(X, Z) >= max(H(X, Y), H(Y, Z))."""
    X, Y = _check_pair(X, Y)
    Y, Z = _check_pair(Y, Z)
    for inner, outer, label in ((X, Y, "X not in Y"), (Y, Z, "Y not in Z")):
        missing = _first_missing(inner, outer)
        if missing is not None:
            raise SubsetError(f"{label}: point {missing} is missing")
    return hausdorff(X, Z) >= max(hausdorff(X, Y), hausdorff(Y, Z))


def discretization_error(spacing) -> float:
    """Half the diagonal of a grid cell with the given per-axis spacing."""
    spacing = np.atleast_1d(np.asarray(spacing, dtype=float))
    return 0.5 * float(np.sqrt(np.sum(spacing**2)))


def write_point_set(path, points, header=None) -> None:
    points = as_point_set(points)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header or [f"x{i + 1}" for i in range(points.shape[1])])
        for row in points.tolist():
            w.writerow([repr(v) for v in row])


def read_point_set(path) -> np.ndarray:
    rows = []
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise
                continue  # header line
    if not rows:
        return np.zeros((0, 0))
    return np.array(rows)
