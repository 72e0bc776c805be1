"""Finite-difference verification of every hand-written gradient.

Each component builds a small random problem from a seed, evaluates its
analytic gradient and compares it against central differences. Inputs are
drawn away from the non-smooth points of the L1 terms and from ties in the
smallest-scale selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import (
    confidence_pointmap_loss,
    dnormal_loss,
    normal_loss,
    rgb_loss,
    scale_flatten_loss,
)
from .numerics import GradCheckReport, finite_diff_check
from .rasterizer import (
    CUTOFF_SIGMA,
    Gaussians,
    _ray_mahalanobis,
    project_gaussians,
    rasterize,
    rasterize_backward,
)
from .scene import Camera

RTOL = 1e-4
STEP = 1e-6
MIN_PASS_FRACTION = 0.99
SABOTAGE_FACTOR = 1.01
CUTOFF_MARGIN = 1e-4  # relative distance of any pixel from the footprint cutoff
DEPTH_GAP = 1e-4  # minimum separation of centre depths (sort-order stability)
MAX_REDRAWS = 100
COMPONENTS = ("raster_rgb", "raster_depth", "raster_normal",
              "loss_c", "loss_r", "loss_s", "loss_n", "loss_dn")


@dataclass
class ComponentResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.pass_fraction >= MIN_PASS_FRACTION

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<14} {status}  worst rel err {self.report.max_rel_error:.3e}  "
                f"passing {100 * self.report.pass_fraction:.1f}% of {self.report.index.size}")


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_gaussians(rng, n: int = 20) -> Gaussians:
    """Thin Gaussians spread in front of :func:`gradcheck_camera`."""
    means = np.c_[rng.uniform(-1, 1, (n, 2)), rng.uniform(2.5, 4, n)]
    scales = np.c_[rng.uniform(0.2, 0.5, (n, 2)), rng.uniform(0.005, 0.02, n)]
    q = rng.normal(size=(n, 4))
    q[:, 0] += 3.0  # keep normals roughly facing the camera
    return Gaussians(means, scales, q, rng.uniform(0.3, 0.9, n), rng.uniform(0, 1, (n, 3)))


def gradcheck_camera(size: int = 24) -> Camera:
    return Camera(40.0, 40.0, size / 2, size / 2, size, size)


def is_smooth_configuration(g: Gaussians, cam: Camera) -> bool:
    """False when a small perturbation could move a pixel across a footprint
    cutoff or swap two Gaussians in the depth order."""
    proj = project_gaussians(g, cam)
    z = np.sort(proj.p[:, 2])
    if np.any(np.diff(z) < DEPTH_GAP):
        return False
    rays = cam.pixel_rays().reshape(-1, 3)
    cut = CUTOFF_SIGMA**2
    for i in range(len(g)):
        m, ok = _ray_mahalanobis(rays, proj, i)
        if np.any(ok & (np.abs(m - cut) < CUTOFF_MARGIN * cut)):
            return False
    return True


def _raster(path: str, rng, scale: float) -> GradCheckReport:
    cam = gradcheck_camera()
    for _ in range(MAX_REDRAWS):
        g = random_gaussians(rng)
        if is_smooth_configuration(g, cam):
            break
    else:
        raise RuntimeError("no smooth random configuration found")
    H, W = cam.shape
    shapes = {"rgb": (H, W, 3), "depth": (H, W), "normal": (H, W, 3)}
    weight = rng.normal(size=shapes[path])

    def f(x):
        out = rasterize(Gaussians.from_flat(x, len(g)), cam)
        return float(np.sum(weight * getattr(out, path)))

    grads = rasterize_backward(g, cam, **{f"grad_{path}": weight})
    return finite_diff_check(f, g.flat(), scale * grads.flat(), h=STEP, rtol=RTOL)


def _depth_field(rng, size: int = 16):
    v, u = np.mgrid[0:size, 0:size]
    return (3.0 + 0.3 * np.sin(u / 4 + rng.uniform(0, 2 * np.pi)) + 0.2 * np.cos(v / 5)
            + 0.1 * rng.uniform(-1, 1) * u / size)


def _losses(name: str, rng, scale: float) -> GradCheckReport:
    if name == "loss_c":
        shape = (8, 8)
        P_gt = rng.normal(size=shape + (3,))
        P = P_gt + rng.choice([-1, 1], size=shape + (3,)) * rng.uniform(0.05, 0.5, shape + (3,))
        Q = rng.uniform(1.5, 3.0, shape)
        res = confidence_pointmap_loss(P, Q, P_gt)
        x = np.concatenate([P.ravel(), Q.ravel()])
        g = np.concatenate([res.grad[0].ravel(), res.grad[1].ravel()])

        def f(z):
            return confidence_pointmap_loss(z[:P.size].reshape(P.shape), z[P.size:].reshape(Q.shape), P_gt).value

    elif name == "loss_r":
        gt = rng.uniform(0, 1, (8, 8, 3))
        x = gt + rng.choice([-1, 1], size=gt.shape) * rng.uniform(0.02, 0.3, gt.shape)
        g = rgb_loss(x, gt).grad

        def f(z):
            return rgb_loss(z, gt).value

    elif name == "loss_s":
        x = rng.uniform(0.01, 1.0, (30, 3))
        g = scale_flatten_loss(x).grad

        def f(z):
            return scale_flatten_loss(z).value

    elif name == "loss_n":
        N_gt = _unit(rng.normal(size=(8, 8, 3)))
        x = N_gt + rng.choice([-1, 1], size=N_gt.shape) * rng.uniform(0.05, 0.5, N_gt.shape)
        g = normal_loss(x, N_gt).grad

        def f(z):
            return normal_loss(z, N_gt).value

    elif name == "loss_dn":
        cam = Camera(30.0, 30.0, 8.0, 8.0, 16, 16)
        x = _depth_field(rng)
        N_gt = _unit(rng.normal(size=(16, 16, 3)))
        g = dnormal_loss(x, cam, N_gt).grad

        def f(z):
            return dnormal_loss(z, cam, N_gt).value

    else:
        raise KeyError(name)
    return finite_diff_check(f, x, scale * np.asarray(g), h=STEP, rtol=RTOL)


def run_suite(seed: int = 0, sabotage: bool = False, components=COMPONENTS) -> list:
    """Check every component; ``sabotage`` scales each analytic gradient by 1.01."""
    scale = SABOTAGE_FACTOR if sabotage else 1.0
    results = []
    for k, name in enumerate(components):
        rng = np.random.default_rng([seed, k])
        if name.startswith("raster_"):
            rep = _raster(name.removeprefix("raster_"), rng, scale)
        else:
            rep = _losses(name, rng, scale)
        results.append(ComponentResult(name, rep))
    return results
