import math

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exprcl.data import EYES, MOUTH, Landmarks68
from exprcl.faceops import (
    CropError,
    FaceSwapError,
    GeometryError,
    MaskTarget,
    SimilarityTransform,
    as_float,
    color_correct,
    crop_regions,
    estimate_alignment,
    face_swap,
    landmark_hull,
    mask_regions,
    polygon_area,
    polygon_mask,
    region_boxes,
)
from exprcl.synthetic import Expression, FaceLatents, Identity, render_face, sample_expression, sample_identity

SMILE = Expression(1.0, 0.3, 0.8)
FROWN = Expression(-1.0, 0.3, 0.8)


def face(hue=0.05, expr=SMILE, aspect=1.0, spacing=0.4, seed=0, size=64, masks=False):
    return render_face(FaceLatents(Identity(hue, aspect, spacing), expr), size, seed=seed, return_masks=masks)


def random_face(seed):
    rng = np.random.default_rng(seed)
    return render_face(FaceLatents(sample_identity(rng), sample_expression(rng)), 64, seed=seed, return_masks=True)


def skin_hue(img, lm):
    """Circular mean hue (in [0, 1)) of the cheek area between eyes and mouth."""
    hsv = cv2.cvtColor(as_float(img), cv2.COLOR_RGB2HSV)
    cx = lm.points[:, 0].mean()
    y_eye, y_mouth = lm.subset(EYES)[:, 1].max(), lm.subset(MOUTH)[:, 1].min()
    patch = hsv[int(y_eye) + 2:int(y_mouth) - 1, int(cx) - 14:int(cx) - 6, 0] / 360.0
    ang = 2 * np.pi * patch.ravel()
    return (np.arctan2(np.sin(ang).mean(), np.cos(ang).mean()) / (2 * np.pi)) % 1.0


def hue_gap(a, b):
    d = abs(a - b) % 1.0
    return min(d, 1 - d)


class TestHull:
    def test_circle_extreme_points(self):
        ang = np.linspace(0, 2 * np.pi, 60, endpoint=False)
        circle = np.c_[50 + 20 * np.cos(ang), 50 + 20 * np.sin(ang)]
        inner = np.c_[50 + 5 * np.cos(ang[:8]), 50 + 5 * np.sin(ang[:8])]
        hull = landmark_hull(Landmarks68(np.vstack([circle, inner])))
        assert len(hull) == 60
        assert {tuple(p) for p in hull.round(9)} == {tuple(p) for p in circle.round(9)}

    def test_counterclockwise(self):
        _, lm = face()
        hull = landmark_hull(lm)
        x, y = hull[:, 0], hull[:, 1]
        signed = 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
        assert signed > 0

    def test_idempotent(self):
        _, lm = face()
        hull = landmark_hull(lm)
        again = landmark_hull(hull)
        assert {tuple(p) for p in again} == {tuple(p) for p in hull}

    def test_collinear_is_geometry_error(self):
        pts = np.c_[np.arange(68.0), 2 * np.arange(68.0)]
        with pytest.raises(GeometryError):
            landmark_hull(Landmarks68(pts))

    @pytest.mark.parametrize("seed", range(10))
    def test_hull_area_exceeds_region_boxes(self, seed):
        _, lm, _ = random_face(seed)
        boxes = region_boxes(lm, (64, 64))
        ex0, ey0, ex1, ey1 = boxes.eyes_box
        mx0, my0, mx1, my1 = boxes.mouth_box
        union = np.zeros((64, 64), bool)
        union[ey0:ey1, ex0:ex1] = True
        union[my0:my1, mx0:mx1] = True
        assert polygon_area(landmark_hull(lm)) >= union.sum()


class TestAlignment:
    def test_identity(self):
        _, lm = face()
        tf = estimate_alignment(lm, lm)
        assert tf.scale == pytest.approx(1, abs=1e-9)
        assert tf.rotation == pytest.approx(0, abs=1e-9)
        assert (tf.tx, tf.ty) == pytest.approx((0, 0), abs=1e-9)
        assert tf.residual_rms == pytest.approx(0, abs=1e-9)

    def test_translation(self):
        _, lm = face()
        tf = estimate_alignment(lm, lm.translated(5, -3))
        assert (tf.scale, tf.rotation, tf.tx, tf.ty) == pytest.approx((1, 0, 5, -3), abs=1e-9)

    def test_rotation_scale_about_centroid(self):
        _, lm = face()
        c = lm.subset(range(27, 48)).mean(axis=0)
        theta = math.radians(10)
        rot = 1.2 * np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        m = np.c_[rot, c - rot @ c]
        tf = estimate_alignment(lm, lm.transformed(m))
        assert tf.scale == pytest.approx(1.2, abs=1e-6)
        assert math.degrees(tf.rotation) == pytest.approx(10, abs=1e-6)

    def test_round_trip_random_transforms(self):
        _, lm = face()
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            t = SimilarityTransform(rng.uniform(0.5, 2), rng.uniform(-np.pi + 0.01, np.pi - 0.01),
                                    rng.uniform(-20, 20), rng.uniform(-20, 20))
            est = estimate_alignment(lm, lm.transformed(t.matrix))
            got = np.array([est.scale, est.rotation, est.tx, est.ty])
            worst = max(worst, np.abs(got - [t.scale, t.rotation, t.tx, t.ty]).max())
        assert worst <= 1e-6

    def test_zero_variance_source(self):
        pts = np.full((68, 2), 10.0)
        with pytest.raises(GeometryError):
            estimate_alignment(Landmarks68(pts), Landmarks68(pts + 1))


class TestColorCorrect:
    def test_fixed_point(self):
        img, lm = face()
        out, fallback = color_correct(img, img, landmark_hull(lm))
        assert np.abs(out - as_float(img)).max() < 1e-5 and not fallback

    def test_uniform_gray_mean_shift(self):
        src = np.full((32, 32, 3), 0.2, np.float32)
        dst = np.full((32, 32, 3), 0.8, np.float32)
        poly = np.array([[4, 4], [28, 4], [28, 28], [4, 28]], float)
        out, fallback = color_correct(src, dst, poly)
        mask = polygon_mask(poly, (32, 32))
        assert fallback
        assert np.allclose(out[mask], 0.8, atol=1e-6)
        assert np.array_equal(out[~mask], src[~mask])

    def test_moments_match_on_noise(self, rng):
        src = np.clip(rng.normal(0.45, 0.08, (48, 48, 3)), 0, 1).astype(np.float32)
        dst = np.clip(rng.normal(0.55, 0.06, (48, 48, 3)), 0, 1).astype(np.float32)
        mask = np.zeros((48, 48), bool)
        mask[8:40, 10:38] = True
        out, _ = color_correct(src, dst, mask)
        assert np.abs(out[mask].mean(axis=0) - dst[mask].mean(axis=0)).max() < 1e-3
        assert np.array_equal(out[~mask], src[~mask])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            color_correct(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)), np.ones((4, 4), bool))


class TestFaceSwap:
    def test_identity_swap(self):
        img, lm = face()
        res = face_swap((img, lm), (img, lm))
        assert np.abs(res.image.astype(int) - img.astype(int)).max() <= 2

    def test_outside_hull_bit_identical(self):
        a, la = face(hue=0.0, expr=SMILE, seed=1)
        b, lb = face(hue=0.6, expr=FROWN, aspect=1.1, spacing=0.35, seed=2)
        res = face_swap((a, la), (b, lb))
        outside = ~polygon_mask(landmark_hull(lb), b.shape)
        assert outside.any()
        assert np.array_equal(res.image[outside], b[outside])
        assert res.image.shape == b.shape
        # nothing changes where the feather weight is zero either
        assert np.array_equal(res.image[res.alpha == 0], b[res.alpha == 0])

    def test_swap_keeps_identity_hue_and_expression_geometry(self):
        a, la = face(hue=0.0, expr=SMILE, seed=1)  # red-ish, smiling
        b, lb = face(hue=0.62, expr=FROWN, seed=2)  # blue-ish, frowning
        res = face_swap((a, la), (b, lb))
        assert hue_gap(skin_hue(res.image, lb), skin_hue(b, lb)) < 0.05
        mouth = res.landmarks.subset(MOUTH)
        sag = mouth[:, 1].mean() - res.landmarks.points[[48, 54], 1].mean()
        assert sag > 0  # smile geometry from the expression source

    def test_large_residual_skipped(self):
        img, lm = face()
        pts = lm.points.copy()
        pts[36:48] = pts[36:48][::-1]  # scramble the eyes
        pts[27:36] += np.random.default_rng(0).normal(0, 15, (9, 2))
        with pytest.raises(FaceSwapError, match="residual"):
            face_swap((img, Landmarks68(pts)), (img, lm))

    def test_output_depends_only_on_inputs(self):
        a, la = face(hue=0.1, seed=1)
        b, lb = face(hue=0.5, expr=FROWN, seed=2)
        r1 = face_swap((a, la), (b, lb))
        face(hue=0.9, seed=5)  # unrelated work in between
        r2 = face_swap((a.copy(), la), (b.copy(), lb))
        assert np.array_equal(r1.image, r2.image)


class TestCropAndMask:
    @pytest.mark.parametrize("seed", range(5))
    def test_eye_crop_covers_both_eyes(self, seed):
        img, lm, masks = random_face(seed)
        eye, mouth, boxes = crop_regions(img, lm, 0.15)
        assert eye.shape == mouth.shape == (56, 56, 3)
        x0, y0, x1, y1 = boxes.eyes_box
        ys, xs = np.nonzero(masks["eyes"])
        assert ((xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)).mean() >= 0.95
        # both eyes, not just one
        mid = lm.points[27, 0]
        assert (xs < mid).any() and (xs > mid).any() and x0 < xs.min() and x1 > xs.max()

    def test_margin_monotone(self):
        _, lm = face()
        tight = region_boxes(lm, None, 0.0)
        loose = region_boxes(lm, None, 0.15)
        for t, l in ((tight.eyes_box, loose.eyes_box), (tight.mouth_box, loose.mouth_box)):
            assert l[0] < t[0] and l[1] < t[1] and l[2] > t[2] and l[3] > t[3]

    def test_translation_equivariance(self):
        _, lm = face()
        a = region_boxes(lm, None)
        b = region_boxes(lm.translated(10, 10), None)
        assert np.array_equal(np.array(b.eyes_box) - a.eyes_box, [10, 10, 10, 10])
        assert np.array_equal(np.array(b.mouth_box) - a.mouth_box, [10, 10, 10, 10])

    def test_degenerate_box_names_region(self):
        img, lm = face()
        pts = lm.points.copy()
        pts[48:68] = pts[48]
        with pytest.raises(CropError, match="mouth"):
            crop_regions(img, Landmarks68(pts))

    def test_mask_eyes_leaves_mouth(self, rng):
        img, lm = face()
        out = mask_regions(img, lm, MaskTarget.EYES, rng, fill=(0.3, 0.4, 0.5))
        boxes = region_boxes(lm, img.shape)
        x0, y0, x1, y1 = boxes.mouth_box
        assert np.array_equal(out[y0:y1, x0:x1], as_float(img)[y0:y1, x0:x1])
        ex0, ey0, ex1, ey1 = boxes.eyes_box
        region = out[ey0:ey1, ex0:ex1]
        assert np.ptp(region.reshape(-1, 3), axis=0).max() == 0
        assert np.allclose(region[0, 0], (0.3, 0.4, 0.5))
        keep = np.ones(img.shape[:2], bool)
        keep[ey0:ey1, ex0:ex1] = False
        assert np.array_equal(out[keep], as_float(img)[keep])

    def test_mask_idempotent(self, rng):
        img, lm = face()
        once = mask_regions(img, lm, MaskTarget.BOTH, rng)
        twice = mask_regions(once, lm, MaskTarget.BOTH, rng)
        assert np.array_equal(once, twice)

    def test_random_target_picks_each_region(self):
        img, lm = face()
        boxes = region_boxes(lm, img.shape)
        ex0, ey0 = boxes.eyes_box[:2]
        hits = set()
        rng = np.random.default_rng(0)
        for _ in range(40):
            out = mask_regions(img, lm, MaskTarget.RANDOM, rng, fill=(0, 0, 0))
            hits.add("eyes" if np.all(out[ey0, ex0] == 0) else "mouth")
        assert hits == {"eyes", "mouth"}


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(0.5, 2.0), theta=st.floats(-3.0, 3.0), tx=st.floats(-30, 30), ty=st.floats(-30, 30))
def test_alignment_recovers_any_similarity(scale, theta, tx, ty):
    _, lm = face()
    t = SimilarityTransform(scale, theta, tx, ty)
    est = estimate_alignment(lm, lm.transformed(t.matrix))
    assert np.allclose([est.scale, est.rotation, est.tx, est.ty], [scale, theta, tx, ty], atol=1e-6)
