"""Rotation matrices, the normalized geodesic metric and farthest point sampling.

Rotations are plain ``numpy`` arrays of shape ``(3, 3)`` (or stacks of shape
``(n, 3, 3)``) in row-major order, acting on column vectors.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DegenerateInput, InvalidK

ORTHO_TOL = 1e-9
DEGENERATE_EPS = 1e-12


def orthogonality_error(m: np.ndarray) -> np.ndarray:
    """Frobenius norm of ``m^T m - I`` (per matrix for stacks)."""
    m = np.asarray(m, dtype=np.float64)
    gram = np.swapaxes(m, -1, -2) @ m
    return np.linalg.norm(gram - np.eye(3), axis=(-2, -1))


def is_rotation(m: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3) or not np.all(np.isfinite(m)):
        return False
    det = np.linalg.det(m)
    return bool(np.all(orthogonality_error(m) <= tol) and np.all(np.abs(det - 1.0) <= tol))


def as_rotation(m, tol: float = ORTHO_TOL) -> np.ndarray:
    """Validate and return ``m`` as a float64 rotation array."""
    arr = np.array(m, dtype=np.float64)
    if not is_rotation(arr, tol):
        raise DegenerateInput("matrix is not a proper rotation within %g" % tol)
    return arr


def rot_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    k = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(k)
    if n < DEGENERATE_EPS:
        raise DegenerateInput("rotation axis must be non-zero")
    k = k / n
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def rot_z(degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def geodesic_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """Rotation angle of ``r1^T r2`` divided by pi, in ``[0, 1]``."""
    tr = float(np.sum(np.asarray(r1, dtype=np.float64) * np.asarray(r2, dtype=np.float64)))
    return float(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)) / np.pi)


def geodesic_to_many(r: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """Normalized geodesic distance from one rotation to each of ``pool`` (n, 3, 3)."""
    pool = np.asarray(pool, dtype=np.float64)
    tr = np.einsum("ij,nij->n", np.asarray(r, dtype=np.float64), pool)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)) / np.pi


def pairwise_geodesic(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = a if b is None else np.asarray(b, dtype=np.float64)
    tr = np.einsum("aij,bij->ab", a, b)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)) / np.pi


def from_sixd(a: Sequence[float], b: Sequence[float]) -> np.ndarray:
    """Gram-Schmidt map from two raw 3-vectors to a rotation.

    The normalized ``a``, the component of ``b`` orthogonal to it and their
    cross product become the three columns.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    if na < DEGENERATE_EPS:
        raise DegenerateInput("first 6D vector has zero length")
    c1 = a / na
    u = b - np.dot(c1, b) * c1
    nu = np.linalg.norm(u)
    if nu < DEGENERATE_EPS:
        raise DegenerateInput("second 6D vector is parallel to the first")
    c2 = u / nu
    c3 = np.cross(c1, c2)
    return np.column_stack([c1, c2, c3])


def from_sixd_batch(v: np.ndarray) -> np.ndarray:
    """Vectorized :func:`from_sixd` over rows of an ``(n, 6)`` array."""
    v = np.asarray(v, dtype=np.float64)
    a, b = v[:, :3], v[:, 3:]
    na = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(na < DEGENERATE_EPS):
        raise DegenerateInput("first 6D vector has zero length")
    c1 = a / na
    u = b - np.sum(c1 * b, axis=1, keepdims=True) * c1
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(nu < DEGENERATE_EPS):
        raise DegenerateInput("second 6D vector is parallel to the first")
    c2 = u / nu
    return np.stack([c1, c2, np.cross(c1, c2)], axis=-1)


def _degenerate(v: np.ndarray) -> np.ndarray:
    a, b = v[:, :3], v[:, 3:]
    na = np.linalg.norm(a, axis=1)
    c1 = a / np.maximum(na, DEGENERATE_EPS)[:, None]
    u = b - np.sum(c1 * b, axis=1, keepdims=True) * c1
    return (na < DEGENERATE_EPS) | (np.linalg.norm(u, axis=1) < DEGENERATE_EPS)


def sample_rotations(count: int, seed: int) -> np.ndarray:
    """Draw ``count`` rotations from six i.i.d. standard normals each.

    Returns an array of shape ``(count, 3, 3)``; identical for identical
    ``(count, seed)``.  Degenerate draws (measure zero) are redrawn.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((count, 6))
    for i in np.flatnonzero(_degenerate(v)):
        while _degenerate(v[i : i + 1])[0]:
            v[i] = rng.standard_normal(6)
    return from_sixd_batch(v)


def fps_select(pool: np.ndarray, k: int, start: int = 0, return_radii: bool = False):
    """Greedy farthest point sampling under the geodesic metric.

    Each step picks the pool member whose distance to the nearest already
    selected member is largest; ties go to the lowest index.  With
    ``return_radii`` the max-min distance reached at every step is also
    returned (``radii[0]`` is ``inf`` for the seed element).
    """
    pool = np.asarray(pool, dtype=np.float64)
    n = pool.shape[0]
    if k < 1 or k > n:
        raise InvalidK(f"k={k} must lie in [1, {n}]")
    if not 0 <= start < n:
        raise IndexError(f"start index {start} outside pool of size {n}")
    selected = [int(start)]
    radii = [np.inf]
    nearest = geodesic_to_many(pool[start], pool)
    chosen = np.zeros(n, dtype=bool)
    chosen[start] = True
    for _ in range(1, k):
        cand = np.where(chosen, -np.inf, nearest)
        idx = int(np.argmax(cand))
        selected.append(idx)
        radii.append(float(nearest[idx]))
        chosen[idx] = True
        np.minimum(nearest, geodesic_to_many(pool[idx], pool), out=nearest)
    if return_radii:
        return selected, radii
    return selected


def covering_radius(pool: np.ndarray, selected: Sequence[int]) -> float:
    """Largest distance from any pool member to its nearest selected member."""
    d = pairwise_geodesic(pool, np.asarray(pool)[list(selected)])
    return float(d.min(axis=1).max())
