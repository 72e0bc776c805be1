"""Per-scene gradient-descent fitting of a Gaussian set to posed views."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .losses import (
    LossBreakdown,
    LossWeights,
    confidence_pointmap_loss,
    dnormal_from_depth,
    dnormal_loss,
    normal_loss,
    rgb_loss,
    scale_flatten_loss,
    total_loss,
)
from .numerics import EPS_SCALE, InvalidInputError, angle_between_deg, image_gradients, rotmat_to_quat
from .rasterizer import Gaussians, ParamGradients, rasterize, rasterize_backward
from .scene import ViewBundle

ABLATIONS = ("none", "scale", "normal", "dnormal")
GROUPS = ("means", "scales", "quats", "opacity", "colors")
DEFAULT_LR = {"means": 1e-3, "scales": 5e-3, "quats": 1e-3, "opacity": 5e-2, "colors": 1e-2}


class NumericalFailure(RuntimeError):
    def __init__(self, step: int, term: str):
        super().__init__(f"non-finite value in term '{term}' at step {step}")
        self.step = step
        self.term = term


@dataclass
class FitConfig:
    steps: int = 300
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    weights: LossWeights = field(default_factory=LossWeights)
    use_scale: bool = True
    use_normal: bool = True
    use_dnormal: bool = True
    # Gaussians are not per-pixel predictions here, so the pointmap term is
    # only used when explicitly requested (anchors = init positions' GT points)
    use_pointmap: bool = False
    seed: int = 0
    init_noise: float = 0.05
    init_stride: int = 4
    init_thickness: float = EPS_SCALE
    alpha_valid: float = 0.5
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        unknown = set(self.lr) - set(GROUPS)
        if unknown:
            raise InvalidInputError(f"unknown learning-rate group(s): {', '.join(sorted(unknown))}")
        self.lr = {**DEFAULT_LR, **self.lr}
        if self.steps < 1:
            raise InvalidInputError("steps must be >= 1")
        if any(v <= 0 for v in self.lr.values()):
            raise InvalidInputError("learning rates must be positive")

    def ablate(self, term: str) -> "FitConfig":
        if term not in ABLATIONS:
            raise InvalidInputError(f"unknown ablation '{term}' (choose from {', '.join(ABLATIONS)})")
        return replace(self, use_scale=self.use_scale and term != "scale",
                       use_normal=self.use_normal and term != "normal",
                       use_dnormal=self.use_dnormal and term != "dnormal")

    def effective_weights(self) -> LossWeights:
        w = self.weights
        return replace(
            w,
            lambda_c=w.lambda_c if self.use_pointmap else 0.0,
            lambda_s=w.lambda_s if self.use_scale else 0.0,
            lambda_n=w.lambda_n if self.use_normal else 0.0,
            lambda_dn=w.lambda_dn if self.use_dnormal else 0.0,
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["effective_lambdas"] = self.effective_weights().as_dict()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "FitConfig":
        d = {k: v for k, v in d.items() if k != "effective_lambdas"}
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown fit config field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class FitTrace:
    losses: list
    step_seconds: list
    gaussians: Gaussians
    anchors: np.ndarray | None = None

    def __len__(self):
        return len(self.losses)


# Initialization --------------------------------------------------------------


def _frame_from_normal(n: np.ndarray) -> np.ndarray:
    """Rotation whose third row is ``n``."""
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=1)


def init_gaussians(views: ViewBundle, noise: float = 0.0, stride: int = 4, seed: int = 0,
                   thickness: float = EPS_SCALE, return_anchors: bool = False):
    """Seed Gaussians from every ``stride``-th valid depth pixel of every view.

    Positions get isotropic Gaussian noise of std ``noise``. The orientation
    follows the normal estimated from the (noised) neighbouring samples on the
    stride grid, falling back to the ground-truth normal at grid borders.
    Tangent scales are twice the pixel footprint; the normal scale is
    ``thickness``.
    """
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    rng = np.random.default_rng(seed)
    means, scales, quats, colors, anchors = [], [], [], [], []
    for view in views:
        cam = view.camera
        sl = (slice(0, None, stride), slice(0, None, stride))
        depth = view.depth[sl]
        valid = depth > 0
        pts_cam = cam.backproject(view.depth)[sl]
        noisy = pts_cam + rng.normal(0.0, noise, pts_cam.shape) if noise > 0 else pts_cam.copy()
        if not valid.any():
            continue
        gv, gh = image_gradients(noisy)
        n_est = np.cross(gv, gh)
        ok = valid.copy()
        for shift in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ok &= np.roll(valid, shift, axis=(0, 1))
        ok[0, :] = ok[-1, :] = ok[:, 0] = ok[:, -1] = False
        nrm = np.linalg.norm(n_est, axis=-1)
        ok &= nrm > 1e-12
        n_gt = view.normal[sl]
        n_cam = np.where(ok[..., None], n_est / np.where(nrm > 1e-12, nrm, 1.0)[..., None], n_gt)
        flip = np.sum(n_cam * noisy, -1) > 0
        n_cam = np.where(flip[..., None], -n_cam, n_cam)

        foot = depth[valid] / min(cam.fx, cam.fy)
        means.append(cam.cam_to_world(noisy[valid]))
        anchors.append(cam.cam_to_world(pts_cam[valid]))
        s = np.empty((len(foot), 3))
        s[:, 0] = s[:, 1] = 2.0 * foot
        s[:, 2] = thickness
        scales.append(s)
        R = _frame_from_normal(n_cam[valid] @ cam.R)
        quats.append(np.array([rotmat_to_quat(r) for r in R]))
        colors.append(view.image[sl][valid])
    if not means:
        raise InvalidInputError("no valid depth pixels to initialize from")
    g = Gaussians(np.concatenate(means), np.maximum(np.concatenate(scales), EPS_SCALE),
                  np.concatenate(quats), np.full(sum(len(m) for m in means), 0.5),
                  np.clip(np.concatenate(colors), 0, 1))
    if return_anchors:
        return g, np.concatenate(anchors)
    return g


# Optimizer -------------------------------------------------------------------


class Adam:
    def __init__(self, params: Gaussians, lr: dict, betas=(0.9, 0.999), eps=1e-8):
        self.lr = dict(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(getattr(params, k)) for k in GROUPS}
        self.v = {k: np.zeros_like(getattr(params, k)) for k in GROUPS}

    def step(self, params: Gaussians, grads: ParamGradients) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k in GROUPS:
            g = getattr(grads, k)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = self.lr[k] * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            setattr(params, k, getattr(params, k) - update)


def project_constraints(g: Gaussians) -> None:
    g.quats /= np.linalg.norm(g.quats, axis=-1, keepdims=True)
    np.maximum(g.scales, EPS_SCALE, out=g.scales)
    np.clip(g.opacity, 0.0, 1.0, out=g.opacity)
    np.clip(g.colors, 0.0, 1.0, out=g.colors)


# Objective -------------------------------------------------------------------


def _reference_normals(views: ViewBundle) -> list:
    return [dnormal_from_depth(v.depth, v.camera) for v in views]


def evaluate(g: Gaussians, views: ViewBundle, cfg: FitConfig, n_ref=None, anchors=None,
             with_grad: bool = True):
    """Loss breakdown (and parameter gradients) of the enabled objective."""
    if n_ref is None:
        n_ref = _reference_normals(views)
    lam = cfg.effective_weights()
    V = len(views)
    parts = {"r": 0.0, "n": 0.0, "dn": 0.0}
    grads = ParamGradients.zeros(len(g))
    for view, N_gt in zip(views, n_ref):
        out, ctx = rasterize(g, view.camera, return_context=True)
        lr_ = rgb_loss(out.rgb, view.image)
        parts["r"] += lr_.value / V
        g_rgb = lam.lambda_r * lr_.grad / V
        g_nrm = g_dep = None
        if cfg.use_normal:
            ln = normal_loss(out.normal, N_gt, np.linalg.norm(N_gt, axis=-1) > 0.5)
            parts["n"] += ln.value / V
            g_nrm = lam.lambda_n * ln.grad / V
        if cfg.use_dnormal:
            ok = out.alpha > cfg.alpha_valid
            ld = dnormal_loss(np.where(ok, out.depth, 0.0), view.camera, N_gt)
            parts["dn"] += ld.value / V
            g_dep = np.where(ok, lam.lambda_dn * ld.grad / V, 0.0)
        if with_grad:
            grads += rasterize_backward(g, view.camera, g_rgb, g_dep, g_nrm, context=ctx)
    if cfg.use_scale:
        ls = scale_flatten_loss(g.scales)
        parts["s"] = ls.value
        grads.scales += lam.lambda_s * ls.grad
    if cfg.use_pointmap and anchors is not None:
        P = g.means[None]
        lc = confidence_pointmap_loss(P, np.ones(P.shape[:2]), anchors[None], beta=lam.beta)
        parts["c"] = lc.value
        grads.means += lam.lambda_c * lc.grad[0][0]
    return total_loss(parts, lam), grads


def fit_scene(views: ViewBundle, init: Gaussians, cfg: FitConfig, anchors=None, callback=None) -> FitTrace:
    """Adam on the weighted objective; constraints re-imposed after each step.

    Raises:
        NumericalFailure: a loss term or gradient became non-finite.
    """
    if len(views) == 0:
        raise InvalidInputError("no views to fit")
    g = init.copy()
    n_ref = _reference_normals(views)
    opt = Adam(g, cfg.lr, cfg.adam_betas, cfg.adam_eps)
    losses, times = [], []
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        bd, grads = evaluate(g, views, cfg, n_ref, anchors)
        for term in ("l_c", "l_r", "l_s", "l_n", "l_dn", "total"):
            if not np.isfinite(getattr(bd, term)):
                raise NumericalFailure(step, term)
        if not np.all(np.isfinite(grads.flat())):
            raise NumericalFailure(step, "gradient")
        opt.step(g, grads)
        project_constraints(g)
        losses.append(bd)
        times.append(time.perf_counter() - t0)
        if callback is not None:
            callback(step, bd, g)
    return FitTrace(losses, times, g, anchors)


# Diagnostics -----------------------------------------------------------------


def depth_mae(g: Gaussians, views: ViewBundle, alpha_min: float = 0.5) -> float:
    """Mean |rendered depth - true depth| over covered pixels of all views."""
    errs = []
    for v in views:
        out = rasterize(g, v.camera)
        ok = (v.depth > 0) & (out.alpha > alpha_min)
        errs.append(np.abs(out.depth - v.depth)[ok])
    e = np.concatenate(errs)
    return float(e.mean()) if e.size else float("nan")


def normal_angle_error(g: Gaussians, views: ViewBundle, alpha_min: float = 0.9) -> float:
    """Mean angle (deg) between rendered and analytic normals where alpha > alpha_min."""
    errs = []
    for v in views:
        out = rasterize(g, v.camera)
        ok = (np.linalg.norm(v.normal, axis=-1) > 0.5) & (out.alpha > alpha_min)
        errs.append(angle_between_deg(out.normal[ok], v.normal[ok]))
    e = np.concatenate(errs)
    return float(e.mean()) if e.size else float("nan")


def min_scale_mean(g: Gaussians) -> float:
    return float(g.scales.min(axis=1).mean())


def breakdown_json(bd: LossBreakdown) -> dict:
    return bd.to_json()
