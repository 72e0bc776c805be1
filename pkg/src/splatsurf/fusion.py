"""TSDF fusion of depth maps and marching-cubes meshing."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes

from .numerics import InvalidInputError
from .scene import Camera

DEFAULT_VOXEL = 0.02
DEFAULT_TRUNC = 0.08
REPROJECTION_TOL_PX = 1.0


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def __len__(self):
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


def pointmap_to_depth(P, cam: Camera, valid=None) -> np.ndarray:
    """Depth map from a camera-frame pointmap.

    A pixel keeps the z of its point only if the point reprojects within one
    pixel of that pixel; otherwise (or if not finite / behind the camera) it
    gets 0.
    """
    P = np.asarray(P, dtype=np.float64)
    H, W = P.shape[:2]
    ok = np.all(np.isfinite(P), axis=-1) & (P[..., 2] > 0)
    if valid is not None:
        ok &= np.asarray(valid, bool)
    Pz = np.where(ok[..., None], P, np.array([0.0, 0.0, 1.0]))
    u, v, z = cam.project(Pz)
    vv, uu = np.mgrid[0:H, 0:W]
    ok &= np.hypot(u - uu, v - vv) <= REPROJECTION_TOL_PX
    return np.where(ok, P[..., 2], 0.0)


@dataclass
class TsdfVolume:
    """Dense TSDF grid; values are in units of the truncation distance.

    Voxel ``(i, j, k)`` sits at ``origin + voxel * (i, j, k)``.
    """

    origin: np.ndarray
    voxel: float
    dims: tuple
    trunc: float
    tsdf: np.ndarray = None
    weight: np.ndarray = None

    def __post_init__(self):
        if self.voxel <= 0:
            raise InvalidInputError("voxel size must be positive")
        if self.trunc < 2 * self.voxel:
            raise InvalidInputError("truncation must be at least twice the voxel size")
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims)
        if self.weight is None:
            self.weight = np.zeros(self.dims)

    @classmethod
    def around(cls, bbox, voxel: float = DEFAULT_VOXEL, trunc: float = DEFAULT_TRUNC) -> "TsdfVolume":
        """Volume covering ``bbox`` (2x3) padded by the truncation distance."""
        bbox = np.asarray(bbox, dtype=np.float64)
        lo = bbox[0] - trunc - voxel
        hi = bbox[1] + trunc + voxel
        dims = np.ceil((hi - lo) / voxel).astype(int) + 1
        return cls(lo, voxel, tuple(dims), trunc)

    def points(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + self.voxel * idx

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel, self.dims, self.trunc,
                          self.tsdf.copy(), self.weight.copy())

    def save(self, stem) -> None:
        """Debug dump: ``<stem>.raw`` float32 tsdf and ``<stem>.json`` header."""
        stem = Path(stem)
        self.tsdf.astype("<f4").tofile(stem.with_suffix(".raw"))
        stem.with_suffix(".json").write_text(json.dumps({
            "origin": self.origin.tolist(), "voxel": self.voxel,
            "dims": list(self.dims), "trunc": self.trunc,
        }))


def _sample_depth(depth, u, v, max_jump):
    """Bilinear depth where the 2x2 neighbourhood is valid and smooth, else nearest."""
    H, W = depth.shape
    ni = np.clip(np.round(v).astype(np.int64), 0, H - 1)
    nj = np.clip(np.round(u).astype(np.int64), 0, W - 1)
    d = depth[ni, nj]
    i0 = np.clip(np.floor(v).astype(np.int64), 0, H - 2)
    j0 = np.clip(np.floor(u).astype(np.int64), 0, W - 2)
    fy = np.clip(v - i0, 0, 1)
    fx = np.clip(u - j0, 0, 1)
    q = np.stack([depth[i0, j0], depth[i0, j0 + 1], depth[i0 + 1, j0], depth[i0 + 1, j0 + 1]])
    smooth = (q.min(0) > 0) & (q.max(0) - q.min(0) <= max_jump)
    bil = (q[0] * (1 - fx) * (1 - fy) + q[1] * fx * (1 - fy)
           + q[2] * (1 - fx) * fy + q[3] * fx * fy)
    return np.where(smooth, bil, d)


def tsdf_integrate(vol: TsdfVolume, depth, cam: Camera) -> TsdfVolume:
    """Fuse one z-depth map into ``vol`` in place (and return it).

    Running average with unit observation weight; voxels more than one
    truncation distance behind the observed surface are left untouched.
    """
    depth = np.asarray(depth, dtype=np.float64)
    pts = vol.points()
    Xc = cam.world_to_cam(pts)
    z = Xc[:, 2]
    front = z > 1e-6
    if not front.any():
        return vol
    u, v, _ = cam.project(np.where(front[:, None], Xc, [0.0, 0.0, 1.0]))
    H, W = depth.shape
    inside = front & (u > -0.5) & (u < W - 0.5) & (v > -0.5) & (v < H - 0.5)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return vol
    d = _sample_depth(depth, u[idx], v[idx], vol.trunc)
    sdf = d - z[idx]
    use = (d > 0) & (sdf >= -vol.trunc)
    idx, sdf = idx[use], sdf[use]
    val = np.minimum(1.0, sdf / vol.trunc)
    ts = vol.tsdf.reshape(-1)
    wt = vol.weight.reshape(-1)
    w = wt[idx]
    ts[idx] = (w * ts[idx] + val) / (w + 1.0)
    wt[idx] = w + 1.0
    return vol


def extract_mesh(vol: TsdfVolume) -> TriangleMesh:
    """Zero level set of cubes whose eight corners are all observed."""
    obs = vol.weight > 0
    cube = (obs[:-1, :-1, :-1] & obs[1:, :-1, :-1] & obs[:-1, 1:, :-1] & obs[:-1, :-1, 1:]
            & obs[1:, 1:, :-1] & obs[1:, :-1, 1:] & obs[:-1, 1:, 1:] & obs[1:, 1:, 1:])
    # skimage indexes the cube mask by the cube's upper corner
    mask = np.zeros(vol.dims, bool)
    mask[1:, 1:, 1:] = cube
    field = np.where(obs, vol.tsdf, 1.0)
    if not mask.any() or field[obs].min() > 0 or field[obs].max() < 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    try:
        verts, faces, _, _ = marching_cubes(field, level=0.0, spacing=(vol.voxel,) * 3,
                                            mask=mask, allow_degenerate=False)
    except (RuntimeError, ValueError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    mesh = TriangleMesh(verts + vol.origin, faces)
    keep = mesh.face_areas() > 0
    return TriangleMesh(mesh.vertices, mesh.faces[keep])


def fuse_depths(depths, cameras, bbox, voxel: float = DEFAULT_VOXEL, trunc: float = DEFAULT_TRUNC) -> TsdfVolume:
    vol = TsdfVolume.around(bbox, voxel, trunc)
    for d, cam in zip(depths, cameras):
        tsdf_integrate(vol, d, cam)
    return vol


def rendered_depths(gaussians, cameras, alpha_min: float = 0.5) -> list:
    """Rendered depth per camera, zeroed where accumulated alpha is below ``alpha_min``."""
    from .rasterizer import rasterize

    out = []
    for cam in cameras:
        r = rasterize(gaussians, cam)
        out.append(np.where(r.alpha > alpha_min, r.depth, 0.0))
    return out


def reconstruct(depths, cameras, bbox, voxel: float = DEFAULT_VOXEL, trunc: float | None = None) -> TriangleMesh:
    """Fuse depth maps and mesh the result; ``trunc`` defaults to four voxels."""
    trunc = 4.0 * voxel if trunc is None else trunc
    return extract_mesh(fuse_depths(depths, cameras, bbox, voxel, trunc))
