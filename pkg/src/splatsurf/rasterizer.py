"""Differentiable splatting of flattened Gaussians.

Each Gaussian acts as a planar disc (surfel) through its centre, with the
smallest-scale axis as normal. Per pixel, the viewing ray is intersected with
that plane; the intersection gives the Gaussian's depth for the ray and, in
the Gaussian's tangent frame, the offset that sets its effective opacity

    alpha_eff = alpha * exp(-0.5 * (u1^2 / s_t1^2 + u2^2 / s_t2^2)).

Colour, depth and normal are composited front to back over a single global
depth sort; depth and normal are normalized by accumulated alpha.

The backward pass is written by hand. Gradients stop at the sort order, the
tangent-axis selection and the normal orientation flip, which are all
piecewise constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .io import GAUSSIAN_PROPS, read_ply, write_ply
from .numerics import (
    EPS_SCALE,
    InvalidInputError,
    normalize_quat,
    quat_to_rotmat,
    quat_to_rotmat_vjp,
    smallest_axis_index,
    tangent_axes,
)
from .scene import Camera

NEAR_PLANE = 1e-4
EPS_PERP = 1e-6
CUTOFF_SIGMA = 3.0


@dataclass
class Gaussians:
    """Structure-of-arrays Gaussian set.

    ``means`` (N, 3) m, ``scales`` (N, 3) m, ``quats`` (N, 4) wxyz,
    ``opacity`` (N,), ``colors`` (N, 3).
    """

    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)

    def __len__(self):
        return len(self.means)

    def copy(self) -> "Gaussians":
        return Gaussians(self.means.copy(), self.scales.copy(), self.quats.copy(),
                         self.opacity.copy(), self.colors.copy())

    def subset(self, idx) -> "Gaussians":
        return Gaussians(self.means[idx], self.scales[idx], self.quats[idx],
                         self.opacity[idx], self.colors[idx])

    def validate(self) -> None:
        if np.any(self.scales < EPS_SCALE * (1 - 1e-9)):
            raise InvalidInputError(f"scales must be >= {EPS_SCALE}")
        if np.any((self.opacity < 0) | (self.opacity > 1)):
            raise InvalidInputError("opacity must lie in [0, 1]")
        if np.any((self.colors < 0) | (self.colors > 1)):
            raise InvalidInputError("colors must lie in [0, 1]")
        normalize_quat(self.quats)

    @property
    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.quats)

    def normals(self) -> np.ndarray:
        """World-frame flattened normals (row of R at the smallest scale)."""
        k = smallest_axis_index(self.scales)
        return self.rotations[np.arange(len(self)), k]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.means.ravel(), self.scales.ravel(), self.quats.ravel(),
                               self.opacity.ravel(), self.colors.ravel()])

    @classmethod
    def from_flat(cls, x, n: int) -> "Gaussians":
        x = np.asarray(x, dtype=np.float64)
        o = np.cumsum([0, 3 * n, 3 * n, 4 * n, n, 3 * n])
        return cls(x[o[0]:o[1]], x[o[1]:o[2]], x[o[2]:o[3]], x[o[3]:o[4]], x[o[4]:o[5]])

    def save_ply(self, path) -> None:
        cols = np.concatenate([self.means, self.scales, self.quats, self.opacity[:, None], self.colors], 1)
        write_ply(path, {k: cols[:, i] for i, k in enumerate(GAUSSIAN_PROPS)})

    @classmethod
    def load_ply(cls, path) -> "Gaussians":
        v, _ = read_ply(path)
        cols = np.stack([v[k] for k in GAUSSIAN_PROPS], 1)
        return cls(cols[:, 0:3], cols[:, 3:6], cols[:, 6:10], cols[:, 10], cols[:, 11:14])


@dataclass
class ParamGradients:
    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "ParamGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)))

    def __iadd__(self, other: "ParamGradients"):
        for k in ("means", "scales", "quats", "opacity", "colors"):
            getattr(self, k).__iadd__(getattr(other, k))
        return self

    def scaled(self, c: float) -> "ParamGradients":
        return ParamGradients(self.means * c, self.scales * c, self.quats * c, self.opacity * c, self.colors * c)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.means.ravel(), self.scales.ravel(), self.quats.ravel(),
                               self.opacity.ravel(), self.colors.ravel()])


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    alpha: np.ndarray


# Projection ------------------------------------------------------------------


@dataclass
class Projection:
    """Camera-frame geometry of every Gaussian for one view."""

    p: np.ndarray
    n: np.ndarray
    sign: np.ndarray
    T1: np.ndarray
    T2: np.ndarray
    normal_idx: np.ndarray
    tangent_idx: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    visible: np.ndarray
    bbox: np.ndarray
    order: np.ndarray
    center_px: np.ndarray


def project_gaussians(g: Gaussians, cam: Camera, cutoff: float = CUTOFF_SIGMA) -> Projection:
    N = len(g)
    rows = np.arange(N)
    Rg = quat_to_rotmat(g.quats) if N else np.zeros((0, 3, 3))
    k = smallest_axis_index(g.scales) if N else np.zeros(0, int)
    tk = tangent_axes(g.scales) if N else np.zeros((0, 2), int)
    p = cam.world_to_cam(g.means)
    n_raw = Rg[rows, k] @ cam.R.T
    facing = np.sum(n_raw * p, axis=-1)
    sign = np.where(facing > 0, -1.0, 1.0)
    n = n_raw * sign[:, None]
    T1 = Rg[rows, tk[:, 0]] @ cam.R.T
    T2 = Rg[rows, tk[:, 1]] @ cam.R.T
    s1 = g.scales[rows, tk[:, 0]]
    s2 = g.scales[rows, tk[:, 1]]
    visible = p[:, 2] > NEAR_PLANE

    # screen bbox of the cutoff rectangle; falls back to the whole image when
    # a corner is behind the camera
    H, W = cam.height, cam.width
    bbox = np.zeros((N, 4), dtype=np.int64)  # r0, r1, c0, c1 (inclusive)
    corners = (p[:, None, :]
               + cutoff * np.array([-1, 1, 1, -1])[None, :, None] * s1[:, None, None] * T1[:, None, :]
               + cutoff * np.array([-1, -1, 1, 1])[None, :, None] * s2[:, None, None] * T2[:, None, :])
    u, v, z = cam.project(corners)
    full = np.any(z <= NEAR_PLANE, axis=1)
    with np.errstate(invalid="ignore"):
        c0 = np.ceil(np.nan_to_num(u.min(1), nan=0, posinf=W, neginf=-1))
        c1 = np.floor(np.nan_to_num(u.max(1), nan=W, posinf=W, neginf=-1))
        r0 = np.ceil(np.nan_to_num(v.min(1), nan=0, posinf=H, neginf=-1))
        r1 = np.floor(np.nan_to_num(v.max(1), nan=H, posinf=H, neginf=-1))
    bbox[:, 0] = np.where(full, 0, np.clip(r0, 0, H))
    bbox[:, 1] = np.where(full, H - 1, np.clip(r1, -1, H - 1))
    bbox[:, 2] = np.where(full, 0, np.clip(c0, 0, W))
    bbox[:, 3] = np.where(full, W - 1, np.clip(c1, -1, W - 1))
    bbox[~visible] = (0, -1, 0, -1)

    order = np.argsort(p[:, 2], kind="stable")
    order = order[visible[order]]
    with np.errstate(divide="ignore", invalid="ignore"):
        pu, pv, _ = cam.project(p)
    return Projection(p, n, sign, T1, T2, k, tk, s1, s2, visible, bbox, order, np.stack([pu, pv], -1))


@dataclass
class Footprint:
    center_px: np.ndarray
    normal: np.ndarray
    point: np.ndarray
    tangents: np.ndarray
    extents: np.ndarray
    depth: float
    pixels: np.ndarray

    @property
    def culled(self) -> bool:
        return len(self.pixels) == 0


def project_gaussian(g: Gaussians, cam: Camera, index: int = 0) -> Footprint:
    """Footprint of one Gaussian: pixels whose ray meets it inside the cutoff."""
    sub = g.subset([index])
    proj = project_gaussians(sub, cam)
    rays = cam.pixel_rays()
    pixels = np.zeros((0, 2), dtype=np.int64)
    if proj.visible[0]:
        r0, r1, c0, c1 = proj.bbox[0]
        rr, cc = np.mgrid[r0:r1 + 1, c0:c1 + 1]
        rr, cc = rr.ravel(), cc.ravel()
        m, ok = _ray_mahalanobis(rays[rr, cc], proj, 0)
        keep = ok & (m <= CUTOFF_SIGMA**2)
        pixels = np.stack([rr[keep], cc[keep]], -1)
    return Footprint(proj.center_px[0], proj.n[0], proj.p[0], np.stack([proj.T1[0], proj.T2[0]]),
                     CUTOFF_SIGMA * np.array([proj.s1[0], proj.s2[0]]), float(proj.p[0, 2]), pixels)


def _ray_mahalanobis(r, proj: Projection, i: int):
    n, p = proj.n[i], proj.p[i]
    b = r @ n
    rn = np.linalg.norm(r, axis=-1)
    ok = b < -EPS_PERP * rn
    d = (n @ p) / np.where(ok, b, -1.0)
    delta = d[:, None] * r - p
    u1 = delta @ proj.T1[i]
    u2 = delta @ proj.T2[i]
    return u1**2 / proj.s1[i] ** 2 + u2**2 / proj.s2[i] ** 2, ok


def ray_plane_depth(n, p, r, eps: float = EPS_PERP) -> float:
    """z-depth where the ray from the origin along unit ``r`` meets the plane (n, p).

    Returns ``nan`` when ``|n . r| <= eps`` (grazing ray).
    """
    n = np.asarray(n, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    nr = np.sum(n * r, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = r[..., 2] * np.sum(n * p, axis=-1) / nr
    return np.where(np.abs(nr) > eps, d, np.nan)


def composite_ray(alphas, colors, depths, normals):
    """Front-to-back compositing of an already sorted list of contributions.

    Args:
        alphas: ``(K,)`` effective opacities, nearest first.
        colors: ``(K, 3)``.
        depths: ``(K,)`` intersection depths.
        normals: ``(K, 3)``.

    Returns:
        ``(rgb, depth, normal, alpha, weights)``; depth and normal are
        normalized by the accumulated alpha (0 when it is 0).
    """
    a = np.asarray(alphas, dtype=np.float64)
    T = np.concatenate([[1.0], np.cumprod(1.0 - a)[:-1]])
    w = a * T
    A = float(w.sum())
    rgb = w @ np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if A <= 0:
        return rgb, 0.0, np.zeros(3), A, w
    depth = float(w @ np.asarray(depths, dtype=np.float64)) / A
    normal = w @ np.asarray(normals, dtype=np.float64).reshape(-1, 3) / A
    return rgb, depth, normal, A, w


# Kernels ---------------------------------------------------------------------


@numba.njit(cache=True, error_model="numpy")
def _pair_geometry(g, i, j, rays, p, n, T1, T2, inv1, inv2, eps_perp):
    r0 = rays[i, j, 0]
    r1 = rays[i, j, 1]
    r2 = rays[i, j, 2]
    b = n[g, 0] * r0 + n[g, 1] * r1 + n[g, 2] * r2
    rn = np.sqrt(r0 * r0 + r1 * r1 + r2 * r2)
    if b >= -eps_perp * rn:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
    a = n[g, 0] * p[g, 0] + n[g, 1] * p[g, 1] + n[g, 2] * p[g, 2]
    d = a / b
    dx = d * r0 - p[g, 0]
    dy = d * r1 - p[g, 1]
    dz = d * r2 - p[g, 2]
    u1 = dx * T1[g, 0] + dy * T1[g, 1] + dz * T1[g, 2]
    u2 = dx * T2[g, 0] + dy * T2[g, 1] + dz * T2[g, 2]
    m = u1 * u1 * inv1[g] + u2 * u2 * inv2[g]
    return True, a, b, d, dx, dy, dz, u1, u2, m


@numba.njit(cache=True, error_model="numpy")
def _forward_kernel(order, bbox, rays, p, n, T1, T2, inv1, inv2, opacity, colors, eps_perp, cut2, record):
    H = rays.shape[0]
    W = rays.shape[1]
    acc = np.zeros((H, W, 8))
    trans = np.ones((H, W))
    count = 0
    if record:
        cap = 0
        for g in order:
            cap += max(0, bbox[g, 1] - bbox[g, 0] + 1) * max(0, bbox[g, 3] - bbox[g, 2] + 1)
    else:
        cap = 0
    pg = np.empty(cap, dtype=np.int64)
    pi = np.empty(cap, dtype=np.int64)
    pj = np.empty(cap, dtype=np.int64)
    pa = np.empty(cap)
    pt = np.empty(cap)
    for g in order:
        for i in range(bbox[g, 0], bbox[g, 1] + 1):
            for j in range(bbox[g, 2], bbox[g, 3] + 1):
                ok, a, b, d, dx, dy, dz, u1, u2, m = _pair_geometry(
                    g, i, j, rays, p, n, T1, T2, inv1, inv2, eps_perp)
                if not ok or m > cut2:
                    continue
                ae = opacity[g] * np.exp(-0.5 * m)
                if ae <= 0.0:
                    continue
                T = trans[i, j]
                w = ae * T
                acc[i, j, 0] += w * colors[g, 0]
                acc[i, j, 1] += w * colors[g, 1]
                acc[i, j, 2] += w * colors[g, 2]
                acc[i, j, 3] += w
                acc[i, j, 4] += w * d
                acc[i, j, 5] += w * n[g, 0]
                acc[i, j, 6] += w * n[g, 1]
                acc[i, j, 7] += w * n[g, 2]
                trans[i, j] = T * (1.0 - ae)
                if record:
                    pg[count] = g
                    pi[count] = i
                    pj[count] = j
                    pa[count] = ae
                    pt[count] = T
                count += 1
    return acc, pg[:count], pi[:count], pj[:count], pa[:count], pt[:count]


@numba.njit(cache=True, error_model="numpy")
def _backward_kernel(pg, pi, pj, pa, pt, gF, rays, p, n, T1, T2, inv1, inv2, opacity, colors, eps_perp):
    N = p.shape[0]
    H = rays.shape[0]
    W = rays.shape[1]
    gp = np.zeros((N, 3))
    gn = np.zeros((N, 3))
    gT1 = np.zeros((N, 3))
    gT2 = np.zeros((N, 3))
    ginv1 = np.zeros(N)
    ginv2 = np.zeros(N)
    gop = np.zeros(N)
    gc = np.zeros((N, 3))
    B = np.zeros((H, W, 8))
    f = np.empty(8)
    for k in range(len(pg) - 1, -1, -1):
        g = pg[k]
        i = pi[k]
        j = pj[k]
        ae = pa[k]
        T = pt[k]
        ok, a, b, d, dx, dy, dz, u1, u2, m = _pair_geometry(
            g, i, j, rays, p, n, T1, T2, inv1, inv2, eps_perp)
        f[0] = colors[g, 0]
        f[1] = colors[g, 1]
        f[2] = colors[g, 2]
        f[3] = 1.0
        f[4] = d
        f[5] = n[g, 0]
        f[6] = n[g, 1]
        f[7] = n[g, 2]
        w = ae * T
        dot_f = 0.0
        dot_b = 0.0
        for c in range(8):
            dot_f += gF[i, j, c] * f[c]
            dot_b += gF[i, j, c] * B[i, j, c]
        gae = T * (dot_f - dot_b)
        for c in range(8):
            B[i, j, c] = ae * f[c] + (1.0 - ae) * B[i, j, c]
        gc[g, 0] += w * gF[i, j, 0]
        gc[g, 1] += w * gF[i, j, 1]
        gc[g, 2] += w * gF[i, j, 2]
        gd = w * gF[i, j, 4]

        e = ae / opacity[g]
        gop[g] += gae * e
        gm = -0.5 * ae * gae
        gu1 = 2.0 * gm * u1 * inv1[g]
        gu2 = 2.0 * gm * u2 * inv2[g]
        ginv1[g] += gm * u1 * u1
        ginv2[g] += gm * u2 * u2
        r0 = rays[i, j, 0]
        r1 = rays[i, j, 1]
        r2 = rays[i, j, 2]
        gdx = gu1 * T1[g, 0] + gu2 * T2[g, 0]
        gdy = gu1 * T1[g, 1] + gu2 * T2[g, 1]
        gdz = gu1 * T1[g, 2] + gu2 * T2[g, 2]
        gT1[g, 0] += gu1 * dx
        gT1[g, 1] += gu1 * dy
        gT1[g, 2] += gu1 * dz
        gT2[g, 0] += gu2 * dx
        gT2[g, 1] += gu2 * dy
        gT2[g, 2] += gu2 * dz
        gdt = gd + gdx * r0 + gdy * r1 + gdz * r2
        ga = gdt / b
        gb = -gdt * d / b
        gn[g, 0] += w * gF[i, j, 5] + ga * p[g, 0] + gb * r0
        gn[g, 1] += w * gF[i, j, 6] + ga * p[g, 1] + gb * r1
        gn[g, 2] += w * gF[i, j, 7] + ga * p[g, 2] + gb * r2
        gp[g, 0] += ga * n[g, 0] - gdx
        gp[g, 1] += ga * n[g, 1] - gdy
        gp[g, 2] += ga * n[g, 2] - gdz
    return gp, gn, gT1, gT2, ginv1, ginv2, gop, gc


# Public API ------------------------------------------------------------------


@dataclass
class RenderContext:
    proj: Projection
    rays: np.ndarray
    acc: np.ndarray
    pairs: tuple


def _kernel_args(g: Gaussians, proj: Projection):
    return (proj.p, proj.n, proj.T1, proj.T2, 1.0 / proj.s1**2, 1.0 / proj.s2**2,
            np.ascontiguousarray(g.opacity), np.ascontiguousarray(g.colors))


def _output(acc: np.ndarray) -> RenderOutput:
    A = acc[..., 3]
    safe = np.where(A > 0, A, 1.0)
    depth = np.where(A > 0, acc[..., 4] / safe, 0.0)
    normal = np.where(A[..., None] > 0, acc[..., 5:8] / safe[..., None], 0.0)
    return RenderOutput(acc[..., 0:3].copy(), depth, normal, A.copy())


def rasterize(gaussians: Gaussians, cam: Camera, return_context: bool = False):
    """Render colour, plane-intersection depth, normals and alpha for one view."""
    proj = project_gaussians(gaussians, cam)
    rays = cam.pixel_rays()
    p, n, T1, T2, inv1, inv2, op, col = _kernel_args(gaussians, proj)
    acc, *pairs = _forward_kernel(proj.order, proj.bbox, rays, p, n, T1, T2, inv1, inv2, op, col,
                                  EPS_PERP, CUTOFF_SIGMA**2, return_context)
    out = _output(acc)
    if return_context:
        return out, RenderContext(proj, rays, acc, tuple(pairs))
    return out


def rasterize_backward(
    gaussians: Gaussians,
    cam: Camera,
    grad_rgb=None,
    grad_depth=None,
    grad_normal=None,
    grad_alpha=None,
    context: RenderContext | None = None,
) -> ParamGradients:
    """Gradients of ``sum(grad_rgb * rgb + grad_depth * depth + ...)`` w.r.t. all parameters."""
    if context is None:
        _, context = rasterize(gaussians, cam, return_context=True)
    proj, acc = context.proj, context.acc
    H, W = cam.height, cam.width
    A = acc[..., 3]
    safe = np.where(A > 0, A, 1.0)
    out = _output(acc)
    gF = np.zeros((H, W, 8))
    if grad_rgb is not None:
        gF[..., 0:3] = grad_rgb
    gA = np.zeros((H, W)) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64).copy()
    if grad_depth is not None:
        gdep = np.where(A > 0, grad_depth, 0.0)
        gF[..., 4] = gdep / safe
        gA -= gdep * out.depth / safe
    if grad_normal is not None:
        gnor = np.where(A[..., None] > 0, grad_normal, 0.0)
        gF[..., 5:8] = gnor / safe[..., None]
        gA -= np.sum(gnor * out.normal, axis=-1) / safe
    gF[..., 3] = gA

    p, n, T1, T2, inv1, inv2, op, col = _kernel_args(gaussians, proj)
    gp, gn, gT1, gT2, ginv1, ginv2, gop, gc = _backward_kernel(
        *context.pairs, gF, context.rays, p, n, T1, T2, inv1, inv2, op, col, EPS_PERP)

    N = len(gaussians)
    rows = np.arange(N)
    grads = ParamGradients.zeros(N)
    grads.means = gp @ cam.R
    grads.opacity = gop
    grads.colors = gc
    grads.scales[rows, proj.tangent_idx[:, 0]] = -2.0 * ginv1 / proj.s1**3
    grads.scales[rows, proj.tangent_idx[:, 1]] = -2.0 * ginv2 / proj.s2**3
    gR = np.zeros((N, 3, 3))
    gR[rows, proj.normal_idx] = (gn * proj.sign[:, None]) @ cam.R
    gR[rows, proj.tangent_idx[:, 0]] = gT1 @ cam.R
    gR[rows, proj.tangent_idx[:, 1]] = gT2 @ cam.R
    grads.quats = quat_to_rotmat_vjp(gaussians.quats, gR) if N else np.zeros((0, 4))
    return grads
