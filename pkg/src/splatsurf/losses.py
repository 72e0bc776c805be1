"""Training objectives and the depth-derived normal map.

Every loss returns a :class:`LossResult` holding its value and the gradient
with respect to its differentiable inputs. Per-pixel terms are averaged over
valid pixels.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, NamedTuple

import numpy as np

from .numerics import InvalidInputError
from .scene import Camera

DISCONTINUITY_FACTOR = 5.0


class LossResult(NamedTuple):
    value: float
    grad: Any
    empty: bool = False


def _empty(grad) -> LossResult:
    warnings.warn("loss evaluated on zero valid pixels", RuntimeWarning, stacklevel=3)
    return LossResult(0.0, grad, True)


def scale_flatten_loss(scales) -> LossResult:
    """Mean over Gaussians of the smallest scale; gradient on the argmin entry."""
    s = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    grad = np.zeros_like(s)
    if len(s) == 0:
        return LossResult(0.0, grad)
    if np.any(s <= 0):
        raise InvalidInputError("scales must be positive")
    k = np.argmin(s, axis=1)
    rows = np.arange(len(s))
    grad[rows, k] = 1.0 / len(s)
    return LossResult(float(s[rows, k].mean()), grad)


def confidence_pointmap_loss(P_pred, Q, P_gt, mask=None, beta: float = 0.2) -> LossResult:
    """Confidence-weighted L1 pointmap regression with a ``-beta log Q`` prior.

    Returns ``grad = (dL/dP_pred, dL/dQ)``.
    """
    if beta < 0:
        raise InvalidInputError("beta must be non-negative")
    P_pred = np.asarray(P_pred, dtype=np.float64)
    P_gt = np.asarray(P_gt, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if np.any(Q < 1):
        raise InvalidInputError("confidence must be >= 1")
    mask = np.ones(Q.shape, bool) if mask is None else np.asarray(mask, bool)
    gP, gQ = np.zeros_like(P_pred), np.zeros_like(Q)
    n = int(mask.sum())
    if n == 0:
        return _empty((gP, gQ))
    diff = P_pred - P_gt
    l1 = np.abs(diff).sum(-1)
    terms = Q * l1 - beta * np.log(Q)
    gP[mask] = (Q[..., None] * np.sign(diff))[mask] / n
    gQ[mask] = (l1 - beta / Q)[mask] / n
    return LossResult(float(terms[mask].sum() / n), (gP, gQ))


def rgb_loss(C_hat, C_gt) -> LossResult:
    """Mean absolute colour error."""
    C_hat = np.asarray(C_hat, dtype=np.float64)
    C_gt = np.asarray(C_gt, dtype=np.float64)
    if C_hat.shape != C_gt.shape:
        raise InvalidInputError(f"shape mismatch {C_hat.shape} vs {C_gt.shape}")
    diff = C_hat - C_gt
    return LossResult(float(np.abs(diff).mean()), np.sign(diff) / diff.size)


def _normal_penalty(N, N_gt, valid) -> LossResult:
    gN = np.zeros_like(N)
    n = int(valid.sum())
    if n == 0:
        return _empty(gN)
    diff = N - N_gt
    per_px = np.abs(diff).sum(-1) + 1.0 - np.sum(N * N_gt, -1)
    gN[valid] = (np.sign(diff) - N_gt)[valid] / n
    return LossResult(float(per_px[valid].sum() / n), gN)


def normal_loss(N_hat, N_gt, mask=None) -> LossResult:
    """L1 plus (1 - cosine) between composited and reference normals.

    ``N_hat`` is used as composited, without renormalization.
    """
    N_hat = np.asarray(N_hat, dtype=np.float64)
    N_gt = np.asarray(N_gt, dtype=np.float64)
    valid = np.linalg.norm(N_gt, axis=-1) > 0.5 if mask is None else np.asarray(mask, bool)
    return _normal_penalty(N_hat, N_gt, valid)


# Depth-derived normals -------------------------------------------------------


@dataclass
class DNormalAux:
    X: np.ndarray
    gv: np.ndarray
    gh: np.ndarray
    cross: np.ndarray
    norm: np.ndarray
    sign: np.ndarray
    valid: np.ndarray
    rows: tuple
    cols: tuple


def _neighbors(n: int):
    lo = np.arange(n) - 1
    hi = np.arange(n) + 1
    fac = np.full(n, 0.5)
    lo[0], fac[0] = 0, 1.0
    hi[-1], fac[-1] = n - 1, 1.0
    return lo, hi, fac


def dnormal_from_depth(D, cam: Camera, return_aux: bool = False):
    """Normals from the cross product of finite differences of back-projected depth.

    Central differences inside the image, one-sided at the borders. A pixel
    gets a zero normal when it or a neighbour used in its differences has no
    depth, or when a neighbour lies more than ``DISCONTINUITY_FACTOR`` pixel
    footprints away (depth edge). Normals face the camera.
    """
    D = np.asarray(D, dtype=np.float64)
    H, W = D.shape
    if H < 2 or W < 2:
        raise InvalidInputError("depth map must be at least 2x2")
    X = cam.backproject(D)
    ru, rd, rf = _neighbors(H)
    cl, cr, cf = _neighbors(W)
    gv = (X[rd] - X[ru]) * rf[:, None, None]
    gh = (X[:, cr] - X[:, cl]) * cf[None, :, None]

    pos = D > 0
    valid = pos & pos[ru] & pos[rd] & pos[:, cl] & pos[:, cr]
    limit = DISCONTINUITY_FACTOR * D / min(cam.fx, cam.fy)
    for nb in (X[ru], X[rd], X[:, cl], X[:, cr]):
        valid &= np.linalg.norm(nb - X, axis=-1) <= limit

    c = np.cross(gv, gh)
    norm = np.linalg.norm(c, axis=-1)
    valid &= norm > 1e-30
    safe = np.where(valid, norm, 1.0)
    sign = np.where(np.sum(c * X, -1) > 0, -1.0, 1.0)
    N = np.where(valid[..., None], c * (sign / safe)[..., None], 0.0)
    if return_aux:
        return N, DNormalAux(X, gv, gh, c, safe, sign, valid, (ru, rd, rf), (cl, cr, cf))
    return N


def dnormal_backward(grad_N, cam: Camera, aux: DNormalAux) -> np.ndarray:
    """Pull a gradient on the depth-derived normals back to the depth map."""
    gN = np.where(aux.valid[..., None], grad_N, 0.0)
    chat = aux.cross / aux.norm[..., None]
    gc = aux.sign[..., None] * (gN - chat * np.sum(chat * gN, -1, keepdims=True)) / aux.norm[..., None]
    g_gv = np.cross(aux.gh, gc)
    g_gh = np.cross(gc, aux.gv)
    H, W = aux.valid.shape
    gX = np.zeros((H, W, 3))
    ru, rd, rf = aux.rows
    cl, cr, cf = aux.cols
    tv = g_gv * rf[:, None, None]
    np.add.at(gX, rd, tv)
    np.add.at(gX, ru, -tv)
    th = g_gh * cf[None, :, None]
    gXt = np.zeros((W, H, 3))
    np.add.at(gXt, cr, th.transpose(1, 0, 2))
    np.add.at(gXt, cl, -th.transpose(1, 0, 2))
    gX += gXt.transpose(1, 0, 2)
    return np.sum(gX * cam.pixel_rays(), -1)


def dnormal_loss(D_hat, cam: Camera, N_gt, mask=None) -> LossResult:
    """Normal penalty between depth-derived normals of ``D_hat`` and ``N_gt``.

    The gradient is with respect to ``D_hat``.
    """
    N_gt = np.asarray(N_gt, dtype=np.float64)
    N, aux = dnormal_from_depth(D_hat, cam, return_aux=True)
    valid = aux.valid & (np.linalg.norm(N_gt, axis=-1) > 0.5)
    if mask is not None:
        valid &= np.asarray(mask, bool)
    res = _normal_penalty(N, N_gt, valid)
    if res.empty:
        return LossResult(0.0, np.zeros_like(np.asarray(D_hat, dtype=np.float64)), True)
    return LossResult(res.value, dnormal_backward(res.grad, cam, aux))


# Weighted total --------------------------------------------------------------

TERMS = ("c", "r", "s", "n", "dn")


@dataclass
class LossWeights:
    lambda_c: float = 1.0
    lambda_r: float = 1.0
    lambda_s: float = 100.0
    lambda_n: float = 0.05
    lambda_dn: float = 0.05
    beta: float = 0.2

    def as_dict(self) -> dict:
        return {t: getattr(self, f"lambda_{t}") for t in TERMS}


@dataclass
class LossBreakdown:
    l_c: float = 0.0
    l_r: float = 0.0
    l_s: float = 0.0
    l_n: float = 0.0
    l_dn: float = 0.0
    lambdas: dict = field(default_factory=lambda: LossWeights().as_dict())
    total: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def total_loss(parts: dict, weights: LossWeights | dict | None = None) -> LossBreakdown:
    """Weighted sum of the five terms.

    ``parts`` maps ``"c", "r", "s", "n", "dn"`` (missing terms count as 0) to
    values; ``weights`` is a :class:`LossWeights` or a dict with the same keys.
    """
    if weights is None:
        weights = LossWeights()
    lam = weights.as_dict() if isinstance(weights, LossWeights) else {t: float(weights.get(t, 0.0)) for t in TERMS}
    for t, v in lam.items():
        if v < 0:
            raise InvalidInputError(f"weight lambda_{t} is negative")
    vals = {t: float(parts.get(t, 0.0)) for t in TERMS}
    total = sum(lam[t] * vals[t] for t in TERMS)
    return LossBreakdown(**{f"l_{t}": vals[t] for t in TERMS}, lambdas=dict(lam), total=total)
