import math

import numpy as np
import pytest

from pillarnet.geom import Box3D, iou_3d, rasterize_iou3d_oracle
from pillarnet.harness import (LOSSCHECK_SPEC, assemble_targets, generate_scene,
                               oracle_head_output, perturbed_prediction, regression_near_kink)
from pillarnet.head import HeadOutput, encode_iou_target
from pillarnet.losses import (combine, draw_gaussian, focal_heatmap, gaussian_radius,
                              gradient_check, iou_pred_loss, l1_term, l1_terms, od_iou_loss,
                              total_loss, with_cells)

from conftest import random_box3d

CAR = Box3D(0, 0, 0, 3.9, 1.6, 1.5, 0)


def _scene_targets(seed, n=3):
    return assemble_targets(generate_scene(seed, LOSSCHECK_SPEC, n, clutter_density=0.0))


def _perfect(targets):
    """Oracle maps with a one-hot heatmap at the centres."""
    out = oracle_head_output(targets)
    hm = (targets.heatmap == 1.0).astype(float)
    return HeadOutput(hm, out.offset, out.z, out.size, out.rot, out.iou)


def _kink_free(seed):
    rng = np.random.default_rng(seed)
    while True:
        t = _scene_targets(int(rng.integers(1 << 31)))
        pred = perturbed_prediction(t, rng)
        if t.num_objects and not regression_near_kink(pred, t):
            return pred, t


class TestGaussian:
    def test_min_radius_and_center(self):
        hm = np.zeros((20, 20))
        draw_gaussian(hm, 5, 7, 2)
        assert hm[5, 7] == 1.0
        assert np.count_nonzero(hm == 1.0) == 1
        assert hm[5, 9] > 0 and hm[5, 10] == 0

    def test_border_clipping(self):
        hm = np.zeros((6, 6))
        draw_gaussian(hm, 0, 5, 3)
        assert hm[0, 5] == 1.0 and hm.max() == 1.0

    def test_max_splat(self):
        hm = np.zeros((9, 9))
        draw_gaussian(hm, 4, 2, 2)
        a = hm.copy()
        draw_gaussian(hm, 4, 6, 2)
        assert np.all(hm >= a)

    def test_radius_grows_with_box(self):
        assert gaussian_radius(10, 4) > gaussian_radius(5, 2) > 0


class TestFocal:
    def test_single_centre_half_everywhere(self):
        t = np.zeros((5, 5, 1))
        draw_gaussian(t[:, :, 0], 2, 2, 2)
        pred = np.full_like(t, 0.5)
        expect = 0.0
        for v in t.ravel():
            if v == 1.0:
                expect += -math.log(0.5) * 0.5 ** 2
            else:
                expect += -math.log(0.5) * 0.5 ** 2 * (1 - v) ** 4
        assert focal_heatmap(pred, t) == pytest.approx(expect, rel=1e-12)

    def test_zero_objects(self):
        pred = np.full((4, 4, 2), 0.3)
        v = focal_heatmap(pred, np.zeros_like(pred))
        assert v == pytest.approx(32 * -math.log(0.7) * 0.09, rel=1e-12)

    def test_perfect_is_near_zero(self):
        t = np.zeros((6, 6, 1))
        t[2, 3, 0] = 1.0
        assert focal_heatmap(t.copy(), t) < 1e-6

    def test_clamps_extremes(self):
        t = np.zeros((3, 3, 1))
        t[1, 1, 0] = 1.0
        assert np.isfinite(focal_heatmap(1.0 - t, t))


class TestL1:
    def test_values(self):
        assert l1_term(np.zeros(3), np.zeros(3))[0] == 0.0
        v, g = l1_term(np.array([0.3]), np.array([0.0]))
        assert v == pytest.approx(0.3) and g[0] == 1.0

    def test_matches_loop(self, rng):
        a, b = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
        v, g = l1_term(a, b)
        assert v == pytest.approx(sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / 21)
        np.testing.assert_array_equal(g, np.sign(a - b) / 21)

    def test_empty(self):
        v, g = l1_term(np.zeros((0, 2)), np.zeros((0, 2)))
        assert v == 0.0 and g.shape == (0, 2)

    def test_terms_use_masked_cells(self):
        t = _scene_targets(2)
        out = oracle_head_output(t)
        losses, _ = l1_terms(out, t)
        assert all(v == 0.0 for v in losses.values())


class TestIoUPredLoss:
    def test_perfect_box(self):
        b = CAR.as_array()[None]
        v, _ = iou_pred_loss(np.array([0.4]), b, b)
        assert v == pytest.approx(0.6, abs=1e-12)

    def test_target_against_voxel_oracle(self, rng):
        for _ in range(10):
            g = random_box3d(rng)
            p = random_box3d(rng, near=g, spread=0.8)
            t = encode_iou_target(iou_3d(p, g))
            o = encode_iou_target(rasterize_iou3d_oracle(p, g, 0.01))
            assert abs(t - o) < 2e-2
            v, _ = iou_pred_loss(np.array([t]), p.as_array()[None], g.as_array()[None])
            assert v == 0.0

    def test_mask(self):
        b = np.stack([CAR.as_array(), CAR.replace(cx=1.0).as_array()])
        v, _ = iou_pred_loss(np.array([1.0, 0.0]), b, b, mask=np.array([True, False]))
        assert v == 0.0


class TestODLoss:
    def test_identical_and_theta_only(self):
        b = CAR.as_array()[None]
        assert od_iou_loss(b, b)[0] == 0.0
        rot = CAR.replace(theta=1.1).as_array()[None]
        for kind in ("IoU", "GIoU", "DIoU", "OD-DIoU"):
            v, g = od_iou_loss(rot, b, kind=kind)
            assert v == 0.0 and np.all(g == 0)

    def test_forward_shift(self):
        p = CAR.replace(cx=2.0).as_array()[None]
        v, g = od_iou_loss(p, CAR.as_array()[None], kind="IoU")
        assert v == pytest.approx(1 - 4.56 / 14.16, abs=1e-12)
        assert g[0, 0] == pytest.approx(2.4 * 18.72 / 14.16 ** 2, rel=1e-12)
        assert g[0, 6] == 0.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            od_iou_loss(CAR.as_array()[None], CAR.as_array()[None], kind="CIoU")

    def test_ranges(self, rng):
        for _ in range(300):
            g = random_box3d(rng)
            p = random_box3d(rng, near=g, spread=4.0)
            pa, ga = p.as_array()[None], g.as_array()[None]
            assert 0.0 <= od_iou_loss(pa, ga, kind="IoU")[0] <= 1.0
            assert 0.0 <= od_iou_loss(pa, ga, kind="GIoU")[0] < 2.0
            assert 0.0 <= od_iou_loss(pa, ga, kind="DIoU")[0] < 2.0


class TestTotal:
    def test_weighted_sum_identity_bitwise(self, rng):
        for i in range(100):
            t = _scene_targets(int(rng.integers(1 << 20)), int(rng.integers(0, 4)))
            pred = perturbed_prediction(t, rng, sigma=float(rng.uniform(0.01, 0.5)))
            lam = float(rng.uniform(0, 1))
            kind = ("IoU", "GIoU", "DIoU")[i % 3]
            rep = total_loss(pred, t, lam, kind)
            assert rep.total == rep.cls + rep.iou + lam * (rep.od_iou + rep.off + rep.z + rep.size
                                                           + rep.ori)
            assert rep.total == combine(rep.cls, rep.iou, rep.od_iou, rep.off, rep.z, rep.size,
                                        rep.ori, lam)
            assert all(v >= 0 for v in rep.terms().values())

    def test_lambda_zero(self, rng):
        t = _scene_targets(4)
        rep = total_loss(perturbed_prediction(t, rng), t, lam=0.0)
        assert rep.total == rep.cls + rep.iou

    def test_all_perfect(self):
        t = _scene_targets(7, 4)
        assert t.num_objects == 4
        rep = total_loss(_perfect(t), t)
        for name, v in rep.terms().items():
            assert v <= 1e-6, name

    def test_zero_objects(self):
        t = _scene_targets(3, 0)
        rep = total_loss(oracle_head_output(t), t)
        assert t.num_objects == 0
        assert np.isfinite(rep.total)
        assert rep.od_iou == rep.off == rep.iou == 0.0

    def test_theta_decoupling(self, rng):
        t = _scene_targets(9)
        pred = perturbed_prediction(t, rng)
        r, c = t.cells
        a = total_loss(pred, t)
        rot = pred.rot[r, c] + rng.normal(0, 0.3, (len(r), 2))
        b = total_loss(with_cells(pred, r, c, {"rot": rot}), t)
        assert b.od_iou == a.od_iou
        assert b.ori != a.ori

    def test_grad_keys_and_shapes(self, rng):
        t = _scene_targets(5)
        rep = total_loss(perturbed_prediction(t, rng), t)
        n = t.num_objects
        assert {k: v.shape for k, v in rep.grads.items()} == {
            "offset": (n, 2), "z": (n, 1), "size": (n, 3), "rot": (n, 2), "iou": (n, 1)}


class TestGradientCheck:
    @pytest.mark.parametrize("kind", ["IoU", "GIoU", "DIoU"])
    def test_matches_finite_differences(self, kind):
        for seed in range(3):
            pred, t = _kink_free(seed)
            errs = gradient_check(pred, t, 0.25, kind)
            assert max(errs.values()) < 1e-4, errs

    def test_other_lambda(self):
        pred, t = _kink_free(11)
        assert max(gradient_check(pred, t, 0.7, "GIoU").values()) < 1e-4
