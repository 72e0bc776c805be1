"""Small-dimension linear algebra, quaternions and a finite-difference checker.

Quaternions are stored scalar-first ``(w, x, y, z)`` with the Hamilton
convention. Every function accepts a single quaternion or a batch with the
quaternion on the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS_SCALE = 1e-6
_QUAT_MIN_NORM = 1e-12


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments outside its domain."""


def normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if not np.all(np.isfinite(q)):
        raise InvalidInputError("quaternion has non-finite entries")
    if np.any(norm <= _QUAT_MIN_NORM):
        raise InvalidInputError("zero-norm quaternion")
    return q / norm


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a (possibly unnormalized) quaternion.

    The matrix maps ``R @ e_x`` etc. in the usual active sense. Its rows are
    used as the local axes of a Gaussian, so the surface normal of a
    flattened Gaussian is ``R[k, :]`` with ``k`` the smallest scale.

    Args:
        q: ``(..., 4)`` array, ``(w, x, y, z)``.

    Returns:
        ``(..., 3, 3)`` rotation matrices.
    """
    w, x, y, z = np.moveaxis(normalize_quat(q), -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(R.shape[:-1] + (3, 3))


def quat_to_rotmat_vjp(q, grad_R) -> np.ndarray:
    """Pull a gradient on ``quat_to_rotmat(q)`` back to the raw quaternion.

    Includes the internal normalization, so the result is orthogonal to ``q``.
    """
    q = np.asarray(q, dtype=np.float64)
    grad_R = np.asarray(grad_R, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    G = grad_R.reshape(grad_R.shape[:-2] + (9,))
    g = np.moveaxis(G, -1, 0)
    zero = np.zeros_like(w)
    # d(R entries)/d(component), row-major over the 9 entries
    dw = (zero, -2 * z, 2 * y, 2 * z, zero, -2 * x, -2 * y, 2 * x, zero)
    dx = (zero, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x)
    dy = (-4 * y, 2 * x, 2 * w, 2 * x, zero, 2 * z, -2 * w, 2 * z, -4 * y)
    dz = (-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, zero)
    gqn = np.stack(
        [sum(gi * di for gi, di in zip(g, d)) for d in (dw, dx, dy, dz)], axis=-1
    )
    radial = np.sum(gqn * qn, axis=-1, keepdims=True)
    return (gqn - radial * qn) / norm


def rotmat_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single matrix (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q if q[0] >= 0 else -q


def axis_angle_to_rotmat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return quat_to_rotmat(np.concatenate([[np.cos(half)], np.sin(half) * axis]))


def smallest_axis_index(s) -> np.ndarray:
    """Index of the smallest scale; ``np.argmin`` already breaks ties low."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise InvalidInputError("scales must be positive")
    return np.argmin(s, axis=-1)


def smallest_axis_normal(R, s) -> np.ndarray:
    """Row of ``R`` belonging to the smallest scale (the flattened normal)."""
    R = np.asarray(R, dtype=np.float64)
    k = smallest_axis_index(s)
    n = np.take_along_axis(R, k[..., None, None], axis=-2)[..., 0, :]
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def tangent_axes(s) -> np.ndarray:
    """The two non-normal axis indices, in increasing order. Shape ``(..., 2)``."""
    k = smallest_axis_index(s)
    table = np.array([[1, 2], [0, 2], [0, 1]])
    return table[k]


def safe_normalize(v, axis: int = -1, eps: float = 1e-12):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return np.where(n > eps, v / np.maximum(n, eps), 0.0)


def angle_between_deg(a, b) -> np.ndarray:
    """Unsigned angle between vectors in degrees, on the last axis."""
    a = safe_normalize(a)
    b = safe_normalize(b)
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def image_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences along rows (vertical) and columns (horizontal).

    Borders use one-sided differences. Works for ``(H, W)`` or ``(H, W, C)``.
    """
    img = np.asarray(img, dtype=np.float64)
    gv = np.empty_like(img)
    gh = np.empty_like(img)
    gv[1:-1] = 0.5 * (img[2:] - img[:-2])
    gv[0] = img[1] - img[0]
    gv[-1] = img[-1] - img[-2]
    gh[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gh[:, 0] = img[:, 1] - img[:, 0]
    gh[:, -1] = img[:, -1] - img[:, -2]
    return gv, gh


@dataclass
class GradCheckReport:
    index: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    h: float
    rtol: float
    passed: bool = field(init=False)
    pass_fraction: float = field(init=False)

    def __post_init__(self):
        ok = self.rel_error < self.rtol
        self.pass_fraction = float(np.mean(ok)) if ok.size else 1.0
        self.passed = bool(ok.all())

    @property
    def max_rel_error(self) -> float:
        return float(np.max(self.rel_error)) if self.rel_error.size else 0.0


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    with np.errstate(invalid="ignore"):
        err = np.abs(a - b) / denom
    return np.where(np.isfinite(err), err, np.inf)


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x,
    g,
    h: float = 1e-6,
    rtol: float = 1e-4,
    indices: Sequence[int] | None = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare an analytic gradient against central differences.

    ``f`` is evaluated in float64 at ``x +/- h e_i`` for every flat index in
    ``indices`` (all entries by default). Non-finite evaluations count as
    failures rather than raising.

    Args:
        f: scalar function of an array shaped like ``x``.
        x: evaluation point.
        g: analytic gradient, same shape as ``x``.
        h: step size.
        rtol: pass threshold on the relative error.
        indices: flat indices to check.
        floor: lower bound of the relative-error denominator, so entries
            where both gradients vanish do not divide by zero.
    """
    if h <= 0:
        raise InvalidInputError("step size must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=int)
    numeric = np.empty(idx.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        with np.errstate(invalid="ignore", over="ignore"):
            numeric[j] = (float(fp) - float(fm)) / (2.0 * h)
    analytic = g[idx]
    return GradCheckReport(
        index=idx,
        analytic=analytic,
        numeric=numeric,
        rel_error=relative_error(analytic, numeric, floor),
        h=h,
        rtol=rtol,
    )
