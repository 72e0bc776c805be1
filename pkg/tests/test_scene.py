import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import plane_spec, sphere_spec
from splatsurf.losses import dnormal_from_depth
from splatsurf.numerics import InvalidInputError, angle_between_deg
from splatsurf.scene import (
    Camera,
    SamplingExhaustedError,
    bundled_spec,
    generate_scene,
    overlap_ratio,
    render_gt,
    render_view,
    sample_trajectory,
    trajectory_overlaps,
    view_cloud,
)


class TestCamera:
    def test_rejects_bad_intrinsics(self):
        with pytest.raises(InvalidInputError):
            Camera(0.0, 10.0, 5, 5, 10, 10)
        with pytest.raises(InvalidInputError):
            Camera(10.0, 10.0, 10.0, 5, 10, 10)

    def test_rejects_improper_rotation(self):
        with pytest.raises(InvalidInputError):
            Camera(10.0, 10.0, 5, 5, 10, 10, R=np.diag([1.0, 1.0, -1.0]))

    def test_center_pixel_ray_is_optical_axis(self, origin_camera):
        np.testing.assert_array_equal(origin_camera.pixel_rays()[32, 32], [0, 0, 1])

    def test_project_backproject_round_trip(self, origin_camera):
        rng = np.random.default_rng(0)
        depth = rng.uniform(1, 5, (64, 64))
        X = origin_camera.backproject(depth)
        u, v, z = origin_camera.project(X)
        vv, uu = np.mgrid[0:64, 0:64]
        np.testing.assert_allclose(u, uu, atol=1e-9)
        np.testing.assert_allclose(v, vv, atol=1e-9)
        np.testing.assert_allclose(z, depth)

    def test_look_at_centre_sees_target(self):
        cam = Camera.look_at([1.0, -2.0, 0.5], [0.2, 0.3, 1.0])
        u, v, z = cam.project(cam.world_to_cam(np.array([0.2, 0.3, 1.0])))
        assert (u, v) == pytest.approx((cam.cx, cam.cy))
        assert z > 0
        np.testing.assert_allclose(cam.center, [1.0, -2.0, 0.5], atol=1e-12)

    def test_dict_round_trip(self):
        cam = Camera.look_at([0.3, 0.1, 0.2], [0.0, 1.0, 1.0], 32, 48, 70.0)
        back = Camera.from_dict(cam.to_dict())
        np.testing.assert_allclose(back.R, cam.R, atol=1e-15)
        np.testing.assert_array_equal(back.t, cam.t)
        assert (back.width, back.height) == (32, 48)

    def test_from_dict_accepts_rounded_rotation(self):
        cam = Camera.look_at([0.3, 0.1, 0.2], [0.0, 1.0, 1.0])
        d = cam.to_dict()
        d["R"] = [[float(f"{x:.6g}") for x in row] for row in d["R"]]
        back = Camera.from_dict(d)
        np.testing.assert_allclose(back.R, cam.R, atol=1e-5)


class TestGenerateScene:
    def test_box_room_has_twelve_triangles(self):
        scene = generate_scene({"primitives": [{"type": "box_room", "min": [0, 0, 0], "max": [2, 2, 2]}]}, 7)
        verts, faces = scene.mesh()
        assert len(faces) == 12
        np.testing.assert_allclose(scene.bbox, [[0, 0, 0], [2, 2, 2]])
        # analytic distance: room centre is 1 m from every wall
        assert scene.distance(np.array([[1.0, 1.0, 1.0]]))[0] == pytest.approx(1.0)

    def test_fronto_parallel_plane_normals(self):
        scene = generate_scene(plane_spec([0, 0, 5], [0, 0, -1], (4, 4)), 0)
        verts, faces = scene.mesh()
        v = verts[faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        np.testing.assert_allclose(n, np.tile([0, 0, -1.0], (len(n), 1)), atol=1e-12)

    def test_deterministic(self):
        a = generate_scene(bundled_spec("room"), 3)
        b = generate_scene(bundled_spec("room"), 3)
        for x, y in zip(a.mesh(), b.mesh()):
            assert x.tobytes() == y.tobytes()
        cam = Camera.look_at([0.0, 0.0, 1.0], [1.0, 0.5, 1.0])
        for x, y in zip(render_gt(a, cam), render_gt(b, cam)):
            assert x.tobytes() == y.tobytes()

    def test_seed_changes_texture(self):
        cam = Camera.look_at([0.0, 0.0, 1.0], [1.0, 0.5, 1.0])
        a = render_gt(generate_scene(bundled_spec("room"), 0), cam)[0]
        b = render_gt(generate_scene(bundled_spec("room"), 1), cam)[0]
        assert not np.array_equal(a, b)

    def test_mesh_on_analytic_surfaces(self):
        scene = generate_scene(bundled_spec("room"), 0)
        verts, _ = scene.mesh()
        assert scene.distance(verts).max() < 1e-6

    @pytest.mark.parametrize("spec", [
        {},
        {"primitives": []},
        plane_spec([0, 0, 1], [0, 0, 1], (0.0, 1.0)),
        plane_spec([0, 0, 1], [0, 0, 0], (1.0, 1.0)),
        sphere_spec([0, 0, 1], 0.0),
        {"primitives": [{"type": "torus"}]},
    ])
    def test_invalid_specs(self, spec):
        with pytest.raises(InvalidInputError):
            generate_scene(spec, 0)


class TestRenderGt:
    def test_plane_center_depth(self, origin_camera):
        scene = generate_scene(plane_spec([0, 0, 5], [0, 0, -1]), 0)
        rgb, depth, normal = render_gt(scene, origin_camera)
        assert depth[32, 32] == 5.0
        np.testing.assert_allclose(depth, 5.0, atol=1e-12)
        np.testing.assert_allclose(normal[32, 32], [0, 0, -1])

    def test_sphere_center_depth(self, origin_camera):
        scene = generate_scene(sphere_spec([0, 0, 4], 1.0), 0)
        _, depth, normal = render_gt(scene, origin_camera)
        assert depth[32, 32] == pytest.approx(3.0, abs=1e-12)
        np.testing.assert_allclose(normal[32, 32], [0, 0, -1], atol=1e-12)
        assert depth[0, 0] == 0.0
        np.testing.assert_array_equal(normal[0, 0], 0.0)

    def test_normals_unit_and_facing_camera(self, room_scene):
        cam = Camera.look_at([0.2, -0.3, 1.0], [0.35, 0.3, 0.6])
        rgb, depth, normal = render_gt(room_scene, cam)
        hit = depth > 0
        assert hit.all()
        assert np.abs(np.linalg.norm(normal[hit], axis=-1) - 1).max() < 1e-9
        assert np.all(np.sum(normal * cam.pixel_rays(), -1)[hit] < 0)
        assert rgb.min() >= 0 and rgb.max() <= 1

    def test_camera_inside_solid_rejected(self, room_scene):
        with pytest.raises(InvalidInputError):
            render_gt(room_scene, Camera.look_at([0.35, 0.3, 0.6], [0, 0, 0]))

    def test_depth_and_normals_agree(self, room_views):
        # finite-difference normals of the rendered depth match the analytic ones
        errs = []
        for v in room_views:
            n_fd = dnormal_from_depth(v.depth, v.camera)
            ok = np.linalg.norm(n_fd, axis=-1) > 0.5
            errs.append(angle_between_deg(n_fd[ok], v.normal[ok]))
        e = np.concatenate(errs)
        # mean over pixels away from depth edges (the worst 2 % sit on
        # creases where the central difference straddles two walls)
        assert np.mean(np.sort(e)[: int(0.98 * e.size)]) < 1.0


class TestOverlap:
    def test_identical(self):
        pts = np.random.default_rng(0).uniform(0, 1, (500, 3))
        assert overlap_ratio(pts, pts) == 1.0

    def test_disjoint(self):
        rng = np.random.default_rng(1)
        assert overlap_ratio(rng.uniform(0, 1, (200, 3)), rng.uniform(2, 3, (200, 3))) == 0.0

    def test_subset(self):
        g = np.stack(np.meshgrid(np.arange(10), np.arange(4), np.arange(4), indexing="ij"), -1).reshape(-1, 3)
        b = (g + 0.5) * 0.05
        a = b[b[:, 0] < 0.25]
        assert overlap_ratio(a, b, 0.05) == 1.0
        assert overlap_ratio(b, a, 0.05) == pytest.approx(0.5)

    def test_empty_a(self):
        assert overlap_ratio(np.zeros((0, 3)), np.ones((3, 3))) == 0.0

    def test_rejects_bad_voxel(self):
        with pytest.raises(InvalidInputError):
            overlap_ratio(np.ones((3, 3)), np.ones((3, 3)), 0.0)

    @given(hnp.arrays(np.float64, (30, 3), elements=st.floats(-2, 2)), st.randoms(use_true_random=False))
    def test_order_invariant_and_self_one(self, pts, rnd):
        perm = list(range(len(pts)))
        rnd.shuffle(perm)
        assert overlap_ratio(pts, pts) == 1.0
        half = pts[:15]
        assert overlap_ratio(half, pts) == overlap_ratio(half[::-1], pts[perm])


class TestSampleTrajectory:
    def test_room_ten_views_within_bounds(self, room_scene):
        views = sample_trajectory(room_scene, 10, (0.3, 0.7), seed=4)
        assert len(views) == 10
        shapes = {v.depth.shape for v in views}
        assert shapes == {(64, 64)}
        for o in trajectory_overlaps(views):
            assert 0.3 <= o <= 0.7

    def test_infeasible_bounds_exhaust(self, room_scene):
        with pytest.raises(SamplingExhaustedError) as info:
            sample_trajectory(room_scene, 3, (0.999, 1.0), seed=0, max_attempts=40, max_rot_deg=60, max_trans=1.0)
        assert info.value.view_index == 1

    def test_deterministic(self, plane_scene):
        a = sample_trajectory(plane_scene, 4, seed=11)
        b = sample_trajectory(plane_scene, 4, seed=11)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.camera.R, y.camera.R)
            np.testing.assert_array_equal(x.camera.t, y.camera.t)

    @pytest.mark.parametrize("bounds,n", [((0.7, 0.3), 4), ((-0.1, 0.5), 4), ((0.3, 0.7), 1)])
    def test_invalid_arguments(self, plane_scene, bounds, n):
        with pytest.raises(InvalidInputError):
            sample_trajectory(plane_scene, n, bounds)

    def test_views_have_valid_depth(self, room_views):
        for v in room_views:
            assert np.all(v.depth >= 0)
            hit = v.depth > 0
            assert np.all(np.linalg.norm(v.normal[hit], axis=-1) > 0.99)
            assert len(view_cloud(v.depth, v.camera)) == hit.sum()


def test_render_view_bundles_camera(origin_camera):
    scene = generate_scene(plane_spec([0, 0, 3], [0, 0, -1]), 0)
    v = render_view(scene, origin_camera)
    assert v.camera is origin_camera
    assert v.image.shape == (64, 64, 3)
