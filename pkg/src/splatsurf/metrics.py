"""Surface (precision / recall / F-score) and image (PSNR / SSIM) metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import convolve2d
from scipy.spatial import cKDTree

from .numerics import InvalidInputError

PSNR_CAP_DB = 99.0
DEFAULT_TAU = 0.025
MAX_SAMPLES = 1_000_000


@dataclass
class SurfaceScore:
    precision: float
    recall: float
    f1: float
    tau_m: float
    n_pred: int
    n_gt: int

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ImageScore:
    psnr_db: float
    ssim: float

    def to_json(self) -> dict:
        return asdict(self)


def sample_points(mesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on a mesh or a ``(vertices, faces)`` pair."""
    verts, faces = mesh if isinstance(mesh, tuple) else (mesh.vertices, mesh.faces)
    faces = np.asarray(faces)
    if len(faces) == 0:
        raise InvalidInputError("cannot sample an empty mesh")
    if n < 1:
        raise InvalidInputError("need at least one sample")
    v = np.asarray(verts)[faces]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)
    if area.sum() <= 0:
        raise InvalidInputError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(faces), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = v[tri, 0], v[tri, 1], v[tri, 2]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def nn_distances(src, dst) -> np.ndarray:
    """Distance from every point of ``src`` to its nearest neighbour in ``dst``."""
    return cKDTree(dst).query(src, k=1)[0]


def nn_distances_brute(src, dst, chunk: int = 512) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    out = np.empty(len(src))
    for s in range(0, len(src), chunk):
        d2 = np.sum((src[s:s + chunk, None, :] - dst[None]) ** 2, axis=-1)
        out[s:s + chunk] = np.sqrt(d2.min(1))
    return out


def fscore(pred, gt, tau: float = DEFAULT_TAU, brute_force: bool = False) -> SurfaceScore:
    """Precision / recall / F1 in percent at distance threshold ``tau`` metres."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise InvalidInputError("fscore needs two non-empty clouds")
    if not tau > 0:
        raise InvalidInputError("tau must be positive")
    nn = nn_distances_brute if brute_force else nn_distances
    precision = 100.0 * float(np.mean(nn(pred, gt) <= tau))
    recall = 100.0 * float(np.mean(nn(gt, pred) <= tau))
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return SurfaceScore(precision, recall, f1, float(tau), len(pred), len(gt))


def observed_mask(points, depths, cameras, tol: float = 0.02) -> np.ndarray:
    """Points seen by at least one camera: in front, inside the image, and
    within ``tol`` of the depth recorded at their nearest pixel."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = np.zeros(len(P), bool)
    for depth, cam in zip(depths, cameras):
        Xc = cam.world_to_cam(P)
        front = Xc[:, 2] > 1e-6
        u, v, _ = cam.project(np.where(front[:, None], Xc, [0.0, 0.0, 1.0]))
        i = np.round(v).astype(np.int64)
        j = np.round(u).astype(np.int64)
        inside = front & (i >= 0) & (i < cam.height) & (j >= 0) & (j < cam.width)
        d = np.zeros(len(P))
        d[inside] = depth[i[inside], j[inside]]
        keep |= inside & (d > 0) & (np.abs(d - Xc[:, 2]) <= tol)
    return keep


def mesh_area(mesh) -> float:
    verts, faces = mesh if isinstance(mesh, tuple) else (mesh.vertices, mesh.faces)
    v = np.asarray(verts)[np.asarray(faces)]
    return float(0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1).sum())


def score_mesh(mesh, gt_mesh, tau: float = DEFAULT_TAU, spacing: float | None = None, seed: int = 0,
               observed=None, max_samples: int = MAX_SAMPLES) -> SurfaceScore:
    """F-score between area-uniform samples of two meshes.

    Both meshes are sampled at one point per ``spacing**2`` of area
    (``spacing`` defaults to ``tau / 2``), so that sample gaps never decide
    whether a correct surface counts as within ``tau``. ``observed`` is an
    optional ``(depths, cameras)`` pair; ground-truth samples not seen by any
    of those views are dropped before scoring.
    """
    if not tau > 0:
        raise InvalidInputError("tau must be positive")
    spacing = tau / 2 if spacing is None else spacing
    if not spacing > 0:
        raise InvalidInputError("sample spacing must be positive")

    def count(m):
        return int(min(max_samples, max(1, np.ceil(mesh_area(m) / spacing**2))))

    pred = sample_points(mesh, count(mesh), seed)
    gt = sample_points(gt_mesh, count(gt_mesh), seed + 1)
    if observed is not None:
        gt = gt[observed_mask(gt, *observed)]
    return fscore(pred, gt, tau)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained Gaussian windows (unit dynamic range).

    Colour images are converted to grey by averaging channels.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 3:
        a, b = a.mean(-1), b.mean(-1)
    if a.shape[0] < window or a.shape[1] < window:
        raise InvalidInputError(f"image smaller than the {window}x{window} window")
    C1, C2 = 0.01**2, 0.03**2
    w = _gaussian_window(window, sigma)

    def filt(x):
        return convolve2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * sab + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (saa + sbb + C2)
    return float(np.mean(num / den))


def image_score(pred, gt) -> ImageScore:
    return ImageScore(psnr(pred, gt), ssim(pred, gt))
