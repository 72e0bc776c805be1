"""Procedural scenes with an exact ray-traced ground truth.

Scenes are unions of textured rectangles and spheres. A hollow ``box_room``
is six inward-facing rectangles. Every quantity the reconstruction is judged
against (RGB, z-depth, camera-frame normals, triangle mesh) comes from the
analytic surfaces here.

Pixel ``(i, j)`` (row, column) looks along the camera-frame ray
``((j - cx) / fx, (i - cy) / fy, 1)``; cameras follow the OpenCV axis
convention (x right, y down, z forward).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import InvalidInputError, axis_angle_to_rotmat

DEFAULT_OVERLAP_VOXEL = 0.05
MAX_ATTEMPTS_PER_VIEW = 500
MAX_ROT_DEG = 25.0
MAX_TRANS = 0.5


class SamplingExhaustedError(RuntimeError):
    def __init__(self, view_index: int, attempts: int):
        super().__init__(
            f"could not place view {view_index} within overlap bounds after {attempts} attempts"
        )
        self.view_index = view_index
        self.attempts = attempts


# Cameras ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")
        if not (np.allclose(R.T @ R, np.eye(3), atol=1e-9) and abs(np.linalg.det(R) - 1) < 1e-9):
            raise InvalidInputError("camera rotation is not a proper rotation")

    @classmethod
    def look_at(cls, eye, target, width=64, height=64, fov_deg=60.0, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        if abs(fwd @ up) > 0.999:
            up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(f, f, width / 2.0, height / 2.0, width, height, R, -R @ eye)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions with unit z, shape ``(H, W, 3)``."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1
        )

    def world_to_cam(self, X):
        return np.asarray(X, dtype=np.float64) @ self.R.T + self.t

    def cam_to_world(self, X):
        return (np.asarray(X, dtype=np.float64) - self.t) @ self.R

    def project(self, Xc):
        """Camera-frame points to ``(u, v, z)``."""
        Xc = np.asarray(Xc, dtype=np.float64)
        z = Xc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * Xc[..., 0] / z + self.cx
            v = self.fy * Xc[..., 1] / z + self.cy
        return u, v, z

    def backproject(self, depth) -> np.ndarray:
        """Camera-frame points of a z-depth map, ``(H, W, 3)``."""
        return self.pixel_rays() * np.asarray(depth, dtype=np.float64)[..., None]

    def with_pose(self, R, t) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, R, t)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": self.R.tolist(), "t": self.t.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        """Inverse of :meth:`to_dict`; ``R`` is snapped to the nearest rotation
        so that values rounded for JSON still validate."""
        U, _, Vt = np.linalg.svd(np.asarray(d["R"], dtype=np.float64))
        R = U @ Vt
        if np.linalg.det(R) < 0:
            raise InvalidInputError("camera rotation is a reflection")
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   R, np.array(d["t"], dtype=np.float64))


# Primitives ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Texture:
    base: np.ndarray
    checker: float
    phases: np.ndarray
    freqs: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Texture":
        return cls(
            base=rng.uniform(0.35, 0.95, 3),
            checker=float(rng.uniform(0.15, 0.35)),
            phases=rng.uniform(0, 2 * np.pi, (2, 3)),
            freqs=rng.uniform(4.0, 12.0, (2, 3)),
        )

    def __call__(self, s, t) -> np.ndarray:
        parity = (np.floor(s / self.checker) + np.floor(t / self.checker)) % 2
        shade = 0.6 + 0.4 * parity
        noise = 0.08 * (np.sin(s[..., None] * self.freqs[0] + self.phases[0])
                        + np.sin(t[..., None] * self.freqs[1] + self.phases[1]))
        return np.clip(self.base * shade[..., None] + noise, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Rect:
    """Finite rectangle ``center + a*u + b*v`` with ``|a| <= hu``, ``|b| <= hv``."""

    center: np.ndarray
    normal: np.ndarray
    u: np.ndarray
    v: np.ndarray
    hu: float
    hv: float
    texture: Texture

    def intersect(self, o, d):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            t = ((self.center - o) @ self.normal) / denom
            X = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        rel = X - self.center
        a, b = rel @ self.u, rel @ self.v
        hit = (np.abs(denom) > 1e-12) & (t > 1e-9) & (np.abs(a) <= self.hu) & (np.abs(b) <= self.hv)
        t = np.where(hit, t, np.inf)
        normal = np.broadcast_to(self.normal, X.shape)
        return t, normal, (a, b)

    def color(self, uv):
        return self.texture(*uv)

    def triangles(self):
        c, u, v = self.center, self.u * self.hu, self.v * self.hv
        verts = np.stack([c - u - v, c + u - v, c + u + v, c - u + v])
        faces = np.array([[0, 1, 2], [0, 2, 3]])
        e = np.cross(verts[1] - verts[0], verts[2] - verts[0])
        if e @ self.normal < 0:
            faces = faces[:, ::-1]
        return verts, faces

    def distance(self, P):
        rel = P - self.center
        a = np.clip(rel @ self.u, -self.hu, self.hu)
        b = np.clip(rel @ self.v, -self.hv, self.hv)
        closest = self.center + a[..., None] * self.u + b[..., None] * self.v
        return np.linalg.norm(P - closest, axis=-1)

    def contains(self, p) -> bool:
        return False


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture

    def intersect(self, o, d):
        oc = o - self.center
        a = np.sum(d * d, axis=-1)
        b = 2.0 * (d @ oc)
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = (-b - sq) / (2 * a)
        t2 = (-b + sq) / (2 * a)
        t = np.where(t1 > 1e-9, t1, t2)
        hit = (disc >= 0) & (t > 1e-9)
        t = np.where(hit, t, np.inf)
        X = o + np.where(hit, t, 0.0)[..., None] * d
        normal = (X - self.center) / self.radius
        lon = np.arctan2(normal[..., 1], normal[..., 0])
        lat = np.arcsin(np.clip(normal[..., 2], -1, 1))
        return t, normal, (lon * self.radius, lat * self.radius)

    def color(self, uv):
        return self.texture(*uv)

    def triangles(self, n_lat: int = 24, n_lon: int = 48):
        lat = np.linspace(-np.pi / 2, np.pi / 2, n_lat + 1)[1:-1]
        lon = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
        la, lo = np.meshgrid(lat, lon, indexing="ij")
        ring = np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], -1).reshape(-1, 3)
        verts = np.concatenate([[[0, 0, -1.0]], ring, [[0, 0, 1.0]]]) * self.radius + self.center
        faces = []
        nr = n_lat - 1

        def vid(r, c):
            return 1 + r * n_lon + (c % n_lon)

        for c in range(n_lon):
            faces.append([0, vid(0, c + 1), vid(0, c)])
            top = len(verts) - 1
            faces.append([top, vid(nr - 1, c), vid(nr - 1, c + 1)])
        for r in range(nr - 1):
            for c in range(n_lon):
                faces.append([vid(r, c), vid(r, c + 1), vid(r + 1, c + 1)])
                faces.append([vid(r, c), vid(r + 1, c + 1), vid(r + 1, c)])
        return verts, np.array(faces)

    def distance(self, P):
        return np.abs(np.linalg.norm(P - self.center, axis=-1) - self.radius)

    def contains(self, p) -> bool:
        return bool(np.linalg.norm(np.asarray(p) - self.center) <= self.radius)


def _frame_for_normal(n):
    n = n / np.linalg.norm(n)
    helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, n)
    u /= np.linalg.norm(u)
    return n, u, np.cross(n, u)


def _box_room(lo, hi, rng):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    if np.any(hi - lo <= 0):
        raise InvalidInputError("box_room needs positive extent on every axis")
    c = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    rects = []
    for axis in range(3):
        for side in (-1, 1):
            center = c.copy()
            center[axis] += side * half[axis]
            normal = np.zeros(3)
            normal[axis] = -side
            a1, a2 = [k for k in range(3) if k != axis]
            u = np.eye(3)[a1]
            v = np.eye(3)[a2]
            rects.append(Rect(center, normal, u, v, half[a1], half[a2], Texture.random(rng)))
    return rects


# Scene -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    scene_id: str
    primitives: tuple
    bbox: np.ndarray
    camera_region: np.ndarray
    target_region: np.ndarray
    spec: dict
    seed: int

    def mesh(self):
        """Ground-truth ``(vertices, faces)`` of the union of primitives."""
        verts, faces, off = [], [], 0
        for p in self.primitives:
            v, f = p.triangles()
            verts.append(v)
            faces.append(f + off)
            off += len(v)
        return np.concatenate(verts), np.concatenate(faces)

    def distance(self, P) -> np.ndarray:
        """Unsigned distance from points to the analytic surfaces."""
        P = np.asarray(P, dtype=np.float64)
        return np.min([p.distance(P) for p in self.primitives], axis=0)

    def inside_solid(self, p) -> bool:
        return any(prim.contains(p) for prim in self.primitives)


def _vec(d: dict, key: str, n: int = 3) -> np.ndarray:
    try:
        v = np.asarray(d[key], dtype=np.float64).reshape(n)
    except (KeyError, ValueError, TypeError) as exc:
        raise InvalidInputError(f"primitive field '{key}' missing or malformed") from exc
    return v


def generate_scene(spec: dict, seed: int) -> SyntheticScene:
    """Build a deterministic scene from a JSON-style primitive list.

    ``spec["primitives"]`` entries are one of::

        {"type": "box_room", "min": [..], "max": [..]}
        {"type": "plane", "center": [..], "normal": [..], "size": [w, h]}
        {"type": "sphere", "center": [..], "radius": r}

    Each primitive may carry a ``texture_seed``; textures are drawn from
    ``(seed, texture_seed)`` so the same pair always yields the same scene.
    """
    prims_spec = spec.get("primitives") if isinstance(spec, dict) else None
    if not prims_spec:
        raise InvalidInputError("scene spec needs a non-empty 'primitives' list")
    prims = []
    for i, p in enumerate(prims_spec):
        rng = np.random.default_rng([int(seed), int(p.get("texture_seed", i))])
        kind = p.get("type")
        if kind == "box_room":
            prims.extend(_box_room(_vec(p, "min"), _vec(p, "max"), rng))
        elif kind == "plane":
            size = _vec(p, "size", 2)
            if np.any(size <= 0):
                raise InvalidInputError(f"primitives[{i}].size must be positive (zero-area plane)")
            normal = _vec(p, "normal")
            if np.linalg.norm(normal) < 1e-12:
                raise InvalidInputError(f"primitives[{i}].normal must be non-zero")
            n, u, v = _frame_for_normal(normal)
            prims.append(Rect(_vec(p, "center"), n, u, v, size[0] / 2, size[1] / 2, Texture.random(rng)))
        elif kind == "sphere":
            r = float(p.get("radius", 0))
            if r <= 0:
                raise InvalidInputError(f"primitives[{i}].radius must be positive")
            prims.append(Sphere(_vec(p, "center"), r, Texture.random(rng)))
        else:
            raise InvalidInputError(f"primitives[{i}].type '{kind}' is unknown")

    pts = np.concatenate([pr.triangles()[0] for pr in prims])
    bbox = np.stack([pts.min(0), pts.max(0)])
    if np.any(bbox[1] - bbox[0] <= 0) and len(prims) > 1:
        raise InvalidInputError("scene bounding box has zero volume")
    cams = spec.get("cameras", {})
    camera_region = np.array([cams.get("region_min", bbox[0]), cams.get("region_max", bbox[1])], float)
    target_region = np.array([cams.get("target_min", bbox[0]), cams.get("target_max", bbox[1])], float)
    return SyntheticScene(
        scene_id=str(spec.get("name", "scene")),
        primitives=tuple(prims),
        bbox=bbox,
        camera_region=camera_region,
        target_region=target_region,
        spec=spec,
        seed=int(seed),
    )


def load_scene_spec(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def bundled_spec(name: str) -> dict:
    """One of the scene specs shipped with the package (``plane``, ``room``)."""
    return load_scene_spec(Path(__file__).parent / "scenes" / f"{name}.json")


# Rendering -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class View:
    image: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    camera: Camera


def render_gt(scene: SyntheticScene, cam: Camera):
    """Nearest-hit RGB, z-depth and camera-frame normals for every pixel.

    Normals face the camera. Pixels that hit nothing get depth 0, normal 0
    and colour 0.
    """
    if scene.inside_solid(cam.center):
        raise InvalidInputError("camera lies inside a solid primitive")
    o = cam.center
    d = cam.pixel_rays() @ cam.R  # world directions whose camera z is 1
    best_t = np.full(d.shape[:2], np.inf)
    normal = np.zeros(d.shape)
    rgb = np.zeros(d.shape)
    for prim in scene.primitives:
        t, n, uv = prim.intersect(o, d)
        closer = t < best_t
        if not closer.any():
            continue
        best_t = np.where(closer, t, best_t)
        normal = np.where(closer[..., None], n, normal)
        rgb = np.where(closer[..., None], prim.color(uv), rgb)
    hit = np.isfinite(best_t)
    depth = np.where(hit, best_t, 0.0)
    flip = np.sum(normal * d, axis=-1) > 0
    normal = np.where(flip[..., None], -normal, normal)
    normal_cam = normal @ cam.R.T
    normal_cam[~hit] = 0.0
    rgb[~hit] = 0.0
    return rgb, depth, normal_cam


def render_view(scene: SyntheticScene, cam: Camera) -> View:
    rgb, depth, normal = render_gt(scene, cam)
    return View(rgb, depth, normal, cam)


def view_cloud(depth: np.ndarray, cam: Camera) -> np.ndarray:
    """World-frame points of every pixel with positive depth."""
    valid = depth > 0
    return cam.cam_to_world(cam.backproject(depth)[valid])


# Overlap ---------------------------------------------------------------------


def voxel_keys(points, voxel: float) -> np.ndarray:
    """Sorted unique int64 keys of the voxels occupied by ``points``."""
    if voxel <= 0:
        raise InvalidInputError("voxel size must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    ijk = np.floor(pts / voxel).astype(np.int64) + (1 << 20)
    keys = (ijk[:, 0] << 42) | (ijk[:, 1] << 21) | ijk[:, 2]
    return np.unique(keys)


def overlap_ratio(a, b, voxel: float = DEFAULT_OVERLAP_VOXEL) -> float:
    """Fraction of voxels occupied by ``a`` that ``b`` also occupies."""
    ka = voxel_keys(a, voxel)
    if ka.size == 0:
        return 0.0
    kb = voxel_keys(b, voxel)
    return float(np.isin(ka, kb, assume_unique=True).mean())


def _overlap_keys(ka, kb) -> float:
    if ka.size == 0:
        return 0.0
    return float(np.isin(ka, kb, assume_unique=True).mean())


# Trajectories ----------------------------------------------------------------


@dataclass
class ViewBundle:
    views: list

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def __getitem__(self, i):
        return self.views[i]

    @property
    def cameras(self):
        return [v.camera for v in self.views]


def _camera_opts(scene, width, height, fov_deg):
    cams = scene.spec.get("cameras", {})
    return (
        int(width or cams.get("width", 64)),
        int(height or cams.get("height", 64)),
        float(fov_deg or cams.get("fov_deg", 60.0)),
    )


def _random_keyframe(scene, rng, width, height, fov_deg):
    for _ in range(MAX_ATTEMPTS_PER_VIEW):
        eye = rng.uniform(*scene.camera_region)
        target = rng.uniform(*scene.target_region)
        if np.linalg.norm(target - eye) < 1e-3 or scene.inside_solid(eye):
            continue
        cam = Camera.look_at(eye, target, width, height, fov_deg)
        view = render_view(scene, cam)
        if (view.depth > 0).mean() > 0.5:
            return view
    raise SamplingExhaustedError(0, MAX_ATTEMPTS_PER_VIEW)


def _perturb(cam: Camera, rng, max_rot_deg, max_trans):
    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(0, max_rot_deg))
    dR = axis_angle_to_rotmat(axis, angle)
    R = dR @ cam.R
    step = rng.normal(size=3)
    step *= rng.uniform(0, max_trans) / np.linalg.norm(step)
    eye = cam.center + step
    return cam.with_pose(R, -R @ eye), eye


def sample_trajectory(
    scene: SyntheticScene,
    n_views: int,
    bounds=(0.3, 0.7),
    seed: int = 0,
    width: int | None = None,
    height: int | None = None,
    fov_deg: float | None = None,
    voxel: float = DEFAULT_OVERLAP_VOXEL,
    max_attempts: int = MAX_ATTEMPTS_PER_VIEW,
    max_rot_deg: float = MAX_ROT_DEG,
    max_trans: float = MAX_TRANS,
) -> ViewBundle:
    """Greedy overlap-constrained view sequence.

    Starts from a random keyframe; each candidate is a bounded perturbation of
    the last accepted camera and is kept only if the voxel overlap between its
    back-projected cloud and everything accepted so far lies in ``bounds``.
    Once half of a view's attempts are spent, candidates perturb a randomly
    chosen earlier camera instead, so a trajectory can leave a dead end.

    Raises:
        SamplingExhaustedError: a view could not be placed in ``max_attempts``.
    """
    lo, hi = bounds
    if not (0 <= lo < hi <= 1):
        raise InvalidInputError("overlap bounds must satisfy 0 <= lo < hi <= 1")
    if n_views < 2:
        raise InvalidInputError("a trajectory needs at least two views")
    width, height, fov_deg = _camera_opts(scene, width, height, fov_deg)
    rng = np.random.default_rng(seed)
    views = [_random_keyframe(scene, rng, width, height, fov_deg)]
    acc = voxel_keys(view_cloud(views[0].depth, views[0].camera), voxel)
    region = scene.camera_region
    for k in range(1, n_views):
        for attempt in range(max_attempts):
            base = views[-1] if attempt < max_attempts // 2 else views[rng.integers(len(views))]
            cam, eye = _perturb(base.camera, rng, max_rot_deg, max_trans)
            if np.any(eye < region[0]) or np.any(eye > region[1]) or scene.inside_solid(eye):
                continue
            view = render_view(scene, cam)
            keys = voxel_keys(view_cloud(view.depth, cam), voxel)
            if lo <= _overlap_keys(keys, acc) <= hi:
                views.append(view)
                acc = np.union1d(acc, keys)
                break
        else:
            raise SamplingExhaustedError(k, max_attempts)
    return ViewBundle(views)


def trajectory_overlaps(bundle: ViewBundle, voxel: float = DEFAULT_OVERLAP_VOXEL) -> list[float]:
    """Re-measure each view's overlap with the union of the views before it."""
    clouds = [view_cloud(v.depth, v.camera) for v in bundle]
    return [overlap_ratio(clouds[k], np.concatenate(clouds[:k]), voxel) for k in range(1, len(clouds))]


def random_views(scene: SyntheticScene, n_views: int, seed: int = 0,
                 width=None, height=None, fov_deg=None) -> ViewBundle:
    """Independent keyframe-style views, used for dense ground-truth fusion."""
    width, height, fov_deg = _camera_opts(scene, width, height, fov_deg)
    rng = np.random.default_rng(seed)
    return ViewBundle([_random_keyframe(scene, rng, width, height, fov_deg) for _ in range(n_views)])
