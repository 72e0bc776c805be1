import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from splatsurf.gradcheck import random_gaussians
from splatsurf.rasterizer import (
    CUTOFF_SIGMA,
    EPS_PERP,
    NEAR_PLANE,
    Gaussians,
    composite_ray,
    project_gaussian,
    rasterize,
    rasterize_backward,
    ray_plane_depth,
)
from splatsurf.scene import Camera


def reference_render(g: Gaussians, cam: Camera):
    """Slow per-pixel renderer written in the world frame.

    Independent of the kernel: it uses scipy rotations, intersects world-space
    rays with each Gaussian's plane and composites with an explicit loop.
    """
    H, W = cam.height, cam.width
    rays_cam = cam.pixel_rays()
    rays_w = rays_cam @ cam.R  # R^T r for each pixel
    c = cam.center
    axes = Rotation.from_quat(g.quats[:, [1, 2, 3, 0]]).as_matrix()  # rows are local axes
    zc = (g.means @ cam.R.T + cam.t)[:, 2]
    order = [i for i in np.argsort(zc, kind="stable") if zc[i] > NEAR_PLANE]
    rgb = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    normal = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            r = rays_w[i, j]
            T, acc_c, acc_d, acc_n, acc_a = 1.0, np.zeros(3), 0.0, np.zeros(3), 0.0
            for k in order:
                kn = int(np.argmin(g.scales[k]))
                t1, t2 = [a for a in range(3) if a != kn]
                nw = axes[k][kn]
                if nw @ (g.means[k] - c) > 0:
                    nw = -nw
                nr = nw @ r
                if abs(nr) <= EPS_PERP * np.linalg.norm(r):
                    continue
                lam = nw @ (g.means[k] - c) / nr
                if lam <= 0:
                    continue
                off = c + lam * r - g.means[k]
                m = (off @ axes[k][t1] / g.scales[k, t1]) ** 2 + (off @ axes[k][t2] / g.scales[k, t2]) ** 2
                if m > CUTOFF_SIGMA**2:
                    continue
                a = g.opacity[k] * np.exp(-0.5 * m)
                w = a * T
                acc_c += w * g.colors[k]
                acc_d += w * lam
                acc_n += w * (cam.R @ nw)
                acc_a += w
                T *= 1 - a
            rgb[i, j] = acc_c
            alpha[i, j] = acc_a
            if acc_a > 0:
                depth[i, j] = acc_d / acc_a
                normal[i, j] = acc_n / acc_a
    return rgb, depth, normal, alpha


def small_camera():
    return Camera.look_at([0.1, -0.2, -0.3], [0.0, 0.0, 2.0], 20, 16, 60.0)


def fronto(mu, s=(0.3, 0.3, 0.001), opacity=1.0, color=(0.5, 0.5, 0.5)):
    return Gaussians([mu], [s], [[1.0, 0, 0, 0]], [opacity], [color])


def concat(*gs):
    return Gaussians(*(np.concatenate([getattr(g, k) for g in gs]) for k in
                       ("means", "scales", "quats", "opacity", "colors")))


class TestRayPlaneDepth:
    def test_fronto_parallel(self):
        assert ray_plane_depth([0, 0, 1], [0, 0, 5], [0, 0, 1]) == 5.0

    def test_oblique_ray_keeps_z_depth(self):
        assert ray_plane_depth([0, 0, 1], [0, 0, 5], [0, 0.6, 0.8]) == pytest.approx(5.0, abs=1e-15)

    def test_tilted_plane(self):
        h = np.sqrt(2) / 2
        # plane x + z = 2 meets the optical axis at z = 2
        assert ray_plane_depth([h, 0, h], [1, 0, 1], [0, 0, 1]) == pytest.approx(2.0, abs=1e-15)

    def test_grazing_is_nan(self):
        assert np.isnan(ray_plane_depth([1, 0, 0], [0, 0, 5], [0, 0, 1]))
        assert np.isnan(ray_plane_depth([1, 0, 0], [0, 0, 5], [5e-7, 0, 1.0]))

    def test_batched(self):
        r = np.array([[0, 0, 1.0], [0, 0.6, 0.8]])
        np.testing.assert_allclose(ray_plane_depth([0, 0, 1.0], [0, 0, 2.0], r), [2, 2])


class TestProjectGaussian:
    def test_fronto_parallel_footprint(self, origin_camera):
        fp = project_gaussian(fronto([0, 0, 5]), origin_camera)
        np.testing.assert_array_equal(fp.normal, [0, 0, -1])
        np.testing.assert_allclose(fp.center_px, [origin_camera.cx, origin_camera.cy])
        assert fp.depth == 5.0
        assert [32, 32] in fp.pixels.tolist()

    def test_behind_camera_culled(self, origin_camera):
        assert project_gaussian(fronto([0, 0, -1]), origin_camera).culled
        out = rasterize(fronto([0, 0, -1]), origin_camera)
        assert not out.alpha.any() and not out.rgb.any() and not out.depth.any()

    def test_normal_faces_camera(self, origin_camera):
        g = Gaussians([[0.1, 0, 4]], [[0.2, 0.2, 0.01]], [[0.0, 1.0, 0, 0]], [0.5], [[1, 1, 1]])
        fp = project_gaussian(g, origin_camera)
        assert fp.normal @ fp.point < 0

    @staticmethod
    def brute_force_count(g, cam):
        # whole-image threshold of the tangent-frame density, no bbox
        rays = cam.pixel_rays().reshape(-1, 3)
        p = g.means[0] @ cam.R.T + cam.t
        n = np.array([0, 0, 1.0])
        lam = (n @ p) / (rays @ n)
        off = lam[:, None] * rays - p
        dens = np.exp(-0.5 * ((off[:, 0] / g.scales[0, 0]) ** 2 + (off[:, 1] / g.scales[0, 1]) ** 2))
        return int(np.sum(dens >= np.exp(-0.5 * CUTOFF_SIGMA**2)))

    def test_footprint_grows_with_scale(self, origin_camera):
        counts = []
        for s1 in np.linspace(0.02, 0.6, 15):
            g = fronto([0.05, -0.03, 4], s=(s1, 0.1, 0.001))
            n = len(project_gaussian(g, origin_camera).pixels)
            assert n == self.brute_force_count(g, origin_camera)
            counts.append(n)
        assert all(b >= a for a, b in zip(counts, counts[1:]))
        assert counts[-1] > counts[0]


class TestCompositing:
    def test_two_gaussian_closed_form(self):
        rgb, depth, normal, A, w = composite_ray([0.5, 1.0], [[1, 0, 0], [0, 1, 0]], [2.0, 4.0],
                                                 [[0, 0, 1], [1, 0, 0]])
        np.testing.assert_array_equal(w, [0.5, 0.5])
        np.testing.assert_array_equal(normal, [0.5, 0, 0.5])
        assert depth == 3.0
        assert A == 1.0

    def test_two_fronto_gaussians_rendered(self, origin_camera):
        g = concat(fronto([0, 0, 2], opacity=0.5, color=(1, 0, 0)),
                   fronto([0, 0, 4], opacity=1.0, color=(0, 1, 0)))
        out = rasterize(g, origin_camera)
        np.testing.assert_array_equal(out.rgb[32, 32], [0.5, 0.5, 0])
        assert out.depth[32, 32] == 3.0
        assert out.alpha[32, 32] == 1.0
        np.testing.assert_array_equal(out.normal[32, 32], [0, 0, -1])

    def test_single_gaussian_exact(self, origin_camera):
        out = rasterize(fronto([0, 0, 3], opacity=1.0), origin_camera)
        assert out.alpha[32, 32] == 1.0
        assert out.depth[32, 32] == 3.0
        np.testing.assert_array_equal(out.normal[32, 32], [0, 0, -1])

    def test_empty_alpha_is_zero(self):
        rgb, depth, normal, A, _ = composite_ray([0.0], [[1, 1, 1]], [2.0], [[0, 0, 1]])
        assert A == 0 and depth == 0 and not normal.any()


@pytest.mark.parametrize("seed", range(4))
def test_matches_reference_renderer(seed):
    g = random_gaussians(np.random.default_rng(seed), 12)
    cam = small_camera()
    out = rasterize(g, cam)
    rgb, depth, normal, alpha = reference_render(g, cam)
    assert alpha.max() > 0.1
    np.testing.assert_allclose(out.rgb, rgb, atol=1e-12)
    np.testing.assert_allclose(out.alpha, alpha, atol=1e-12)
    np.testing.assert_allclose(out.depth, depth, atol=1e-10)
    np.testing.assert_allclose(out.normal, normal, atol=1e-10)


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1))
def test_weights_normalize(seed):
    g = random_gaussians(np.random.default_rng(seed), 20)
    cam = small_camera()
    out, ctx = rasterize(g, cam, return_context=True)
    pg, pi, pj, pa, pt = ctx.pairs
    wsum = np.zeros((cam.height, cam.width))
    np.add.at(wsum, (pi, pj), pa * pt)
    hit = out.alpha > 0
    assert np.all(np.abs(wsum[hit] / out.alpha[hit] - 1) < 1e-9)
    assert np.all(out.alpha <= 1 + 1e-12)


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1), st.randoms(use_true_random=False))
def test_permutation_invariant(seed, rnd):
    g = random_gaussians(np.random.default_rng(seed), 15)
    perm = list(range(len(g)))
    rnd.shuffle(perm)
    cam = small_camera()
    a, b = rasterize(g, cam), rasterize(g.subset(perm), cam)
    for k in ("rgb", "depth", "normal", "alpha"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def test_opaque_occluder_dominates():
    cam = small_camera()
    g = random_gaussians(np.random.default_rng(5), 20)
    occ_z = cam.center + 0.3 * cam.R[2]
    occ = Gaussians([occ_z], [[1e4, 1e4, 1e-6]], [Rotation.from_matrix(cam.R).as_quat()[[3, 0, 1, 2]]],
                    [1.0], [[0.2, 0.4, 0.6]])
    out = rasterize(concat(g, occ), cam)
    np.testing.assert_allclose(out.depth, 0.3, atol=1e-8)
    np.testing.assert_allclose(out.normal, np.broadcast_to([0, 0, -1.0], out.normal.shape), atol=1e-8)
    np.testing.assert_allclose(out.rgb, np.broadcast_to([0.2, 0.4, 0.6], out.rgb.shape), atol=1e-8)


def test_plane_tiling_depth(origin_camera):
    z0 = 3.0
    xs = np.arange(-2.0, 2.0 + 1e-9, 0.1)
    X, Y = np.meshgrid(xs, xs)
    n = X.size
    g = Gaussians(np.stack([X.ravel(), Y.ravel(), np.full(n, z0)], -1), np.tile([0.08, 0.08, 1e-6], (n, 1)),
                  np.tile([1.0, 0, 0, 0], (n, 1)), np.full(n, 0.7), np.full((n, 3), 0.5))
    out = rasterize(g, origin_camera)
    covered = out.alpha > 0.9
    assert covered.mean() > 0.9
    assert np.abs(out.depth[covered] - z0).max() < 1e-4


class TestBackward:
    def test_zero_opacity_gives_zero_gradients(self):
        rng = np.random.default_rng(1)
        g = random_gaussians(rng, 10)
        g.opacity[:] = 0
        cam = small_camera()
        H, W = cam.height, cam.width
        grads = rasterize_backward(g, cam, rng.normal(size=(H, W, 3)), rng.normal(size=(H, W)),
                                   rng.normal(size=(H, W, 3)), rng.normal(size=(H, W)))
        assert not grads.flat().any()

    def test_depth_gradient_along_optical_axis(self, origin_camera):
        g = fronto([0, 0, 5], opacity=0.8)
        gd = np.zeros((64, 64))
        gd[32, 32] = 1.0
        grads = rasterize_backward(g, origin_camera, grad_depth=gd)
        assert grads.means[0, 2] == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(grads.means[0, :2], 0, atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        g = random_gaussians(rng, 20)
        cam = small_camera()
        up = rng.normal(size=(cam.height, cam.width, 3))
        a = rasterize_backward(g, cam, grad_rgb=up, grad_normal=up)
        b = rasterize_backward(g, cam, grad_rgb=up, grad_normal=up)
        assert a.flat().tobytes() == b.flat().tobytes()

    def test_shapes_and_finite(self):
        rng = np.random.default_rng(3)
        g = random_gaussians(rng, 7)
        cam = small_camera()
        grads = rasterize_backward(g, cam, grad_depth=rng.normal(size=(cam.height, cam.width)))
        assert grads.means.shape == (7, 3) and grads.quats.shape == (7, 4) and grads.opacity.shape == (7,)
        assert np.all(np.isfinite(grads.flat()))
