import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import plane_spec, unit
from splatsurf.losses import (
    LossWeights,
    confidence_pointmap_loss,
    dnormal_from_depth,
    dnormal_loss,
    normal_loss,
    rgb_loss,
    scale_flatten_loss,
    total_loss,
)
from splatsurf.numerics import InvalidInputError, angle_between_deg, finite_diff_check
from splatsurf.scene import Camera, generate_scene, render_gt


def small_cam(size=16):
    return Camera(20.0, 20.0, size / 2, size / 2, size, size)


def smooth_depth(rng, size=16):
    v, u = np.mgrid[0:size, 0:size] / size
    a = rng.uniform(-0.3, 0.3, 4)
    return 2.0 + a[0] * u + a[1] * v + a[2] * np.sin(3 * u) * np.cos(2 * v) + a[3] * u * v


class TestScaleFlatten:
    def test_single(self):
        assert scale_flatten_loss([[0.3, 0.2, 0.05]]).value == 0.05

    def test_tie_break(self):
        res = scale_flatten_loss([[1.0, 1.0, 1.0]])
        assert res.value == 1.0
        np.testing.assert_array_equal(res.grad, [[1, 0, 0]])

    def test_mean(self):
        assert scale_flatten_loss([[0.3, 0.2, 0.05], [0.1, 0.4, 0.2]]).value == pytest.approx(0.075)

    def test_empty(self):
        assert scale_flatten_loss(np.zeros((0, 3))).value == 0.0

    def test_non_positive(self):
        with pytest.raises(InvalidInputError):
            scale_flatten_loss([[0.1, 0.0, 0.2]])


class TestConfidencePointmap:
    def test_unit_confidence_is_l1(self):
        P = np.zeros((4, 5, 3))
        gt = P.copy()
        gt[..., 0] = 0.2
        assert confidence_pointmap_loss(P, np.ones((4, 5)), gt).value == pytest.approx(0.2)

    def test_zero_error_prior_only(self):
        P = np.ones((3, 3, 3))
        assert confidence_pointmap_loss(P, np.full((3, 3), np.e), P).value == pytest.approx(-0.2)

    def test_one_pixel(self):
        res = confidence_pointmap_loss([[[0.1, 0, 0]]], [[np.e]], [[[0, 0, 0]]])
        assert res.value == pytest.approx(np.e * 0.1 - 0.2)
        assert res.value == pytest.approx(0.07183, abs=1e-5)

    def test_empty_mask_warns(self):
        with pytest.warns(RuntimeWarning):
            res = confidence_pointmap_loss(np.zeros((2, 2, 3)), np.ones((2, 2)), np.zeros((2, 2, 3)),
                                           mask=np.zeros((2, 2), bool))
        assert res.value == 0.0 and res.empty

    def test_rejects_low_confidence_and_negative_beta(self):
        with pytest.raises(InvalidInputError):
            confidence_pointmap_loss(np.zeros((1, 1, 3)), [[0.5]], np.zeros((1, 1, 3)))
        with pytest.raises(InvalidInputError):
            confidence_pointmap_loss(np.zeros((1, 1, 3)), [[1.0]], np.zeros((1, 1, 3)), beta=-1)

    def test_gradients(self):
        rng = np.random.default_rng(0)
        P, gt = rng.normal(size=(5, 6, 3)), rng.normal(size=(5, 6, 3))
        Q = 1 + rng.uniform(0, 2, (5, 6))
        mask = rng.uniform(size=(5, 6)) > 0.3
        gP, gQ = confidence_pointmap_loss(P, Q, gt, mask).grad
        assert finite_diff_check(lambda x: confidence_pointmap_loss(x, Q, gt, mask).value, P, gP).passed
        assert finite_diff_check(lambda x: confidence_pointmap_loss(P, x, gt, mask).value, Q, gQ).passed

    @given(st.floats(1.0, 50.0), st.floats(0.0, 1.0))
    def test_lower_bound(self, q, beta):
        P = np.random.default_rng(1).normal(size=(3, 3, 3))
        val = confidence_pointmap_loss(P, np.full((3, 3), q), P + 0.01, beta=beta).value
        assert val >= -beta * np.log(q) - 1e-12


class TestRgb:
    def test_identical(self):
        img = np.random.default_rng(0).uniform(size=(4, 4, 3))
        assert rgb_loss(img, img).value == 0.0

    def test_zeros_vs_ones(self):
        assert rgb_loss(np.zeros((4, 5, 3)), np.ones((4, 5, 3))).value == 1.0

    def test_gradient_is_sign_over_size(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(4, 5, 3)), rng.uniform(size=(4, 5, 3))
        res = rgb_loss(a, b)
        np.testing.assert_array_equal(res.grad, np.sign(a - b) / (3 * 4 * 5))
        assert finite_diff_check(lambda x: rgb_loss(x, b).value, a, res.grad).passed

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            rgb_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


class TestNormalLoss:
    @pytest.mark.parametrize("n_hat,n_gt,expected", [
        ([0, 0, 1], [0, 0, 1], 0.0),
        ([0, 0, -1], [0, 0, 1], 4.0),
        ([1, 0, 0], [0, 1, 0], 3.0),
    ])
    def test_closed_forms(self, n_hat, n_gt, expected):
        a = np.broadcast_to(np.array(n_hat, float), (3, 3, 3))
        b = np.broadcast_to(np.array(n_gt, float), (3, 3, 3))
        assert normal_loss(a, b).value == pytest.approx(expected)

    def test_not_renormalized(self):
        gt = np.broadcast_to([0, 0, 1.0], (2, 2, 3))
        assert normal_loss(0.5 * gt, gt).value == pytest.approx(0.5 + 0.5)

    def test_zero_reference_pixels_ignored(self):
        gt = np.zeros((2, 2, 3))
        gt[0, 0] = [0, 0, 1]
        pred = np.zeros((2, 2, 3))
        pred[0, 0] = [0, 0, 1]
        assert normal_loss(pred, gt).value == 0.0

    def test_empty_warns(self):
        with pytest.warns(RuntimeWarning):
            assert normal_loss(np.ones((2, 2, 3)), np.zeros((2, 2, 3))).empty

    def test_gradient(self):
        rng = np.random.default_rng(2)
        gt = unit(rng.normal(size=(5, 5, 3)))
        pred = rng.normal(size=(5, 5, 3))
        res = normal_loss(pred, gt)
        assert finite_diff_check(lambda x: normal_loss(x, gt).value, pred, res.grad).passed

    @given(hnp.arrays(np.float64, (4, 3), elements=st.floats(-2, 2)),
           hnp.arrays(np.float64, (4, 3), elements=st.floats(-1, 1)).filter(
               lambda a: np.all(np.linalg.norm(a, axis=-1) > 0.6)))
    def test_non_negative_for_unit_reference(self, pred, gt):
        gt = unit(gt)
        # |n - g|_1 >= |n - g|_2 >= n.g - 1 for unit g
        assert normal_loss(pred[None], gt[None]).value >= -1e-12


class TestDNormal:
    def test_fronto_plane(self, origin_camera):
        N = dnormal_from_depth(np.full((64, 64), 5.0), origin_camera)
        np.testing.assert_allclose(N, np.broadcast_to([0, 0, -1.0], N.shape), atol=1e-12)

    def test_tilted_plane_matches_analytic(self, origin_camera):
        n = unit(np.array([0.3, -0.2, -1.0]))
        scene = generate_scene(plane_spec([0, 0, 4], n), 0)
        _, depth, normal = render_gt(scene, origin_camera)
        N = dnormal_from_depth(depth, origin_camera)
        err = angle_between_deg(N[1:-1, 1:-1], normal[1:-1, 1:-1])
        assert err.max() < 0.5

    def test_unit_norm_where_nonzero(self, room_views):
        for v in room_views:
            N = dnormal_from_depth(v.depth, v.camera)
            norm = np.linalg.norm(N, axis=-1)
            assert np.all((norm == 0) | (np.abs(norm - 1) < 1e-12))

    def test_step_discontinuity_masked(self, origin_camera):
        D = np.full((64, 64), 2.0)
        D[:, 32:] = 4.0
        N = dnormal_from_depth(D, origin_camera)
        assert not N[:, 31].any() and not N[:, 32].any()
        np.testing.assert_allclose(N[1:-1, 10], [[0, 0, -1]] * 62, atol=1e-12)

    def test_missing_depth_propagates(self, origin_camera):
        D = np.full((64, 64), 3.0)
        D[20, 20] = 0
        N = dnormal_from_depth(D, origin_camera)
        for i, j in [(20, 20), (19, 20), (21, 20), (20, 19), (20, 21)]:
            assert not N[i, j].any()
        assert N[22, 20].any()

    def test_rejects_tiny_map(self, origin_camera):
        with pytest.raises(InvalidInputError):
            dnormal_from_depth(np.ones((1, 5)), origin_camera)

    def test_loss_zero_on_true_depth(self, origin_camera):
        n = unit(np.array([0.1, 0.2, -1.0]))
        scene = generate_scene(plane_spec([0, 0, 3], n), 0)
        _, depth, normal = render_gt(scene, origin_camera)
        assert dnormal_loss(depth, origin_camera, normal).value < 1e-6

    def test_loss_antipodal(self, origin_camera):
        D = np.full((64, 64), 5.0)
        gt = np.broadcast_to([0, 0, 1.0], (64, 64, 3))
        assert dnormal_loss(D, origin_camera, gt).value == pytest.approx(4.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        cam = small_cam()
        D = smooth_depth(rng)
        gt = unit(rng.normal(size=(16, 16, 3)) + [0, 0, -2])
        res = dnormal_loss(D, cam, gt)
        rep = finite_diff_check(lambda x: dnormal_loss(x, cam, gt).value, D, res.grad, rtol=1e-4)
        assert rep.pass_fraction >= 0.99, rep.max_rel_error


class TestTotal:
    def test_all_zero_weights(self):
        parts = dict.fromkeys("c r s n dn".split(), 3.0)
        assert total_loss(parts, dict.fromkeys(parts, 0.0)).total == 0.0

    def test_single_term(self):
        bd = total_loss({"n": 1.0}, {"n": 2.0})
        assert bd.total == 2.0 and bd.l_n == 1.0

    def test_defaults(self):
        w = LossWeights()
        bd = total_loss(dict.fromkeys("c r s n dn".split(), 1.0))
        assert bd.total == pytest.approx(w.lambda_c + w.lambda_r + w.lambda_s + w.lambda_n + w.lambda_dn)

    def test_negative_weight(self):
        with pytest.raises(InvalidInputError):
            total_loss({"c": 1.0}, LossWeights(lambda_dn=-1))

    def test_json_keys(self):
        d = total_loss({"r": 0.5}).to_json()
        assert set(d) == {"l_c", "l_r", "l_s", "l_n", "l_dn", "lambdas", "total"}
        json.dumps(d)

    @given(st.lists(st.floats(0, 10), min_size=5, max_size=5), st.lists(st.floats(0, 100), min_size=5, max_size=5))
    def test_bookkeeping(self, vals, lams):
        keys = "c r s n dn".split()
        bd = total_loss(dict(zip(keys, vals)), dict(zip(keys, lams)))
        assert abs(bd.total - sum(a * b for a, b in zip(vals, lams))) < 1e-9
