import math

import numpy as np
import pytest

from salon.errors import EmptyRegionError, InvalidKeypointsError
from salon.evaluation import (
    MIRROR_68,
    MetricReport,
    ScenarioLabel,
    canonical_landmarks_3d,
    classify_scenario,
    face_shape_rmse,
    hair_region_metrics,
    masked_psnr,
    mirror_keypoints,
    project_landmarks,
    psnr,
    scenario_config_id,
    ssim,
    summarize_by_scenario,
    yaw_from_keypoints,
)
from salon.semantics import Region, SemanticMap

from conftest import make_keypoints


class TestFaceShapeRmse:
    def test_identical_is_zero(self):
        kp = make_keypoints(64)
        assert face_shape_rmse(kp, kp.copy()) == 0.0

    def test_three_four_five_offset(self):
        kp = make_keypoints(64)
        moved = kp.copy()
        moved[:17] += np.array([3.0, 4.0])
        assert face_shape_rmse(kp, moved) == pytest.approx(5.0)

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(0)
        a = make_keypoints(64)
        b = a + rng.normal(size=a.shape)
        expected = math.sqrt(np.mean(np.sum((a[:17] - b[:17]) ** 2, axis=1)))
        assert face_shape_rmse(a, b) == pytest.approx(expected, rel=1e-12)

    def test_symmetric_and_translation_covariant(self):
        rng = np.random.default_rng(1)
        a = make_keypoints(64)
        b = a + rng.normal(size=a.shape)
        assert face_shape_rmse(a, b) == pytest.approx(face_shape_rmse(b, a))
        t = np.array([7.0, -2.0])
        assert face_shape_rmse(a + t, b + t) == pytest.approx(face_shape_rmse(a, b))


class TestImageMetrics:
    def test_identity_triple(self, extractor):
        rng = np.random.default_rng(2)
        img = rng.random((32, 32, 3))
        mask = np.zeros((32, 32), dtype=bool)
        mask[8:20, 8:20] = True
        report = hair_region_metrics(img.copy(), img, mask, extractor)
        assert report.psnr == math.inf
        assert report.ssim == pytest.approx(1.0)
        assert report.lpips_like == 0.0

    def test_uniform_offset_psnr_closed_form(self, extractor):
        base = np.full((32, 32, 3), 0.3)
        out = base + 16.0 / 255.0
        mask = np.ones((32, 32), dtype=bool)
        report = hair_region_metrics(out, base, mask, extractor)
        assert report.psnr == pytest.approx(20.0 * math.log10(255.0 / 16.0), rel=1e-9)

    def test_blend_limits_difference_to_hair_region(self, extractor):
        rng = np.random.default_rng(3)
        ref = rng.random((32, 32, 3))
        out = rng.random((32, 32, 3))
        mask = np.zeros((32, 32), dtype=bool)
        mask[:4, :4] = True
        report = hair_region_metrics(out, ref, mask, extractor)
        blended = np.where(mask[..., None], out, ref)
        assert report.psnr == pytest.approx(psnr(blended, ref))

    def test_empty_hair_mask_rejected(self, extractor):
        img = np.zeros((32, 32, 3))
        with pytest.raises(EmptyRegionError):
            hair_region_metrics(img, img, np.zeros((32, 32), dtype=bool), extractor)

    def test_ssim_constant_offset_closed_form(self):
        a = np.full((24, 24), 0.4)
        b = np.full((24, 24), 0.6)
        c1 = (0.01 * 1.0) ** 2
        expected = (2 * 0.4 * 0.6 + c1) / (0.4 ** 2 + 0.6 ** 2 + c1)
        assert ssim(a, b) == pytest.approx(expected, rel=1e-9)

    def test_ssim_matches_windowed_oracle(self):
        rng = np.random.default_rng(4)
        a = rng.random((16, 16))
        b = np.clip(a + rng.normal(scale=0.05, size=a.shape), 0, 1)

        from salon.evaluation import _ssim_kernel

        k = _ssim_kernel()
        c1, c2 = (0.01) ** 2, (0.03) ** 2
        vals = []
        for i in range(16 - 10):
            for j in range(16 - 10):
                wa = a[i : i + 11, j : j + 11]
                wb = b[i : i + 11, j : j + 11]
                mx = (k * wa).sum()
                my = (k * wb).sum()
                vx = (k * wa * wa).sum() - mx ** 2
                vy = (k * wb * wb).sum() - my ** 2
                cov = (k * wa * wb).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
        assert ssim(a, b) == pytest.approx(float(np.mean(vals)), rel=1e-10)

    def test_masked_psnr_restricts_to_mask(self):
        ref = np.zeros((16, 16, 3))
        out = ref.copy()
        mask = np.zeros((16, 16), dtype=bool)
        mask[:8] = True
        out[:8] += 0.1
        out[8:] += 0.7  # outside the mask, must not count
        assert masked_psnr(out, ref, mask) == pytest.approx(20.0 * math.log10(1.0 / 0.1), rel=1e-9)


def sem_with_fractions(res, hair=0.0, hat=0.0, face=0.0):
    """Labels painted as row bands with exact pixel fractions."""
    labels = np.zeros((res, res), dtype=np.uint8)
    total = res * res
    cursor = 0

    def paint(count, value):
        nonlocal cursor
        flat = labels.reshape(-1)
        flat[cursor : cursor + count] = value
        cursor += count

    paint(int(round(hair * total)), Region.HAIR)
    paint(int(round(hat * total)), Region.HAT)
    paint(int(round(face * total)), Region.FACE)
    return SemanticMap.full(labels)


class TestScenarioClassifier:
    def _kp(self, res=64):
        kp = make_keypoints(res)
        return kp

    def test_hat_above_threshold(self):
        res = 64
        hair_sem = sem_with_fractions(res, hair=0.2, hat=0.06)
        face_sem = sem_with_fractions(res, hair=0.2)
        label = classify_scenario(face_sem, hair_sem, self._kp(), self._kp(), 0.0, 0.0)
        assert label.has_hat

    def test_hat_exactly_at_threshold_is_false(self):
        res = 40  # 5% of 1600 pixels is exactly 80
        hair_sem = sem_with_fractions(res, hair=0.2, hat=0.05)
        face_sem = sem_with_fractions(res, hair=0.2)
        label = classify_scenario(face_sem, hair_sem, self._kp(res), self._kp(res), 0.0, 0.0)
        assert hair_sem.region(Region.HAT).sum() == 80
        assert not label.has_hat

    def test_pose_bands(self):
        res = 64
        sem = sem_with_fractions(res, hair=0.2)
        for diff, band in ((0.0, "aligned"), (14.9, "aligned"), (20.0, "mis15"), (30.0, "mis30"), (44.9, "mis30"), (45.0, "beyond")):
            label = classify_scenario(sem, sem, self._kp(), self._kp(), 0.0, diff)
            assert label.pose_band == band, diff

    def test_small_hair_skip_strict(self):
        res = 40
        just_under = sem_with_fractions(res, hair=0.0494)  # 79 of 1600 pixels
        exactly = sem_with_fractions(res, hair=0.05)
        face_sem = sem_with_fractions(res, hair=0.2)
        assert classify_scenario(face_sem, just_under, self._kp(res), self._kp(res), 0, 0).skipped_small_hair
        assert not classify_scenario(face_sem, exactly, self._kp(res), self._kp(res), 0, 0).skipped_small_hair

    def test_empty_hair_map_skipped(self):
        res = 64
        label = classify_scenario(
            sem_with_fractions(res, hair=0.2), sem_with_fractions(res), self._kp(), self._kp(), 0, 0
        )
        assert label.skipped_small_hair

    def test_bg_inpaint_threshold(self):
        res = 64
        face_sem = sem_with_fractions(res)  # no hair in the face source
        hair_sem = sem_with_fractions(res, hair=0.16)
        label = classify_scenario(face_sem, hair_sem, self._kp(), self._kp(), 0, 0)
        assert label.needs_bg_inpaint
        hair_small = sem_with_fractions(res, hair=0.15)
        assert not classify_scenario(face_sem, hair_small, self._kp(), self._kp(), 0, 0).needs_bg_inpaint

    def test_hat_growth_is_monotone(self):
        res = 64
        face_sem = sem_with_fractions(res, hair=0.2)
        flags = [
            classify_scenario(face_sem, sem_with_fractions(res, hair=0.2, hat=f), self._kp(), self._kp(), 0, 0).has_hat
            for f in (0.01, 0.04, 0.06, 0.2)
        ]
        assert flags == sorted(flags)

    def test_config_table_covers_twelve(self):
        seen = set()
        for band in ("aligned", "mis15", "mis30"):
            for face in (False, True):
                for bg in (False, True):
                    for hat in (False, True):
                        label = ScenarioLabel(band, face, bg, hat, False)
                        cid = scenario_config_id(label)
                        if cid is not None:
                            seen.add(cid)
        assert seen == set(range(1, 13))


class TestYaw:
    def test_frontal_projection_is_zero(self):
        kp = project_landmarks(canonical_landmarks_3d(), 0.0)
        assert abs(yaw_from_keypoints(kp)) <= 0.5

    def test_rotated_projection_recovers_angle(self):
        for target in (-35.0, -20.0, 10.0, 20.0, 40.0):
            kp = project_landmarks(canonical_landmarks_3d(), target)
            assert yaw_from_keypoints(kp) == pytest.approx(target, abs=1.0)

    def test_mirror_negates_yaw(self):
        kp = project_landmarks(canonical_landmarks_3d(), 20.0)
        mirrored = mirror_keypoints(kp, width=256.0)
        assert yaw_from_keypoints(mirrored) == pytest.approx(-20.0, abs=1.0)

    def test_scale_translation_invariant(self):
        kp = project_landmarks(canonical_landmarks_3d(), 15.0, scale=37.0, offset=(300.0, 12.0))
        assert yaw_from_keypoints(kp) == pytest.approx(15.0, abs=1.0)

    def test_degenerate_rejected(self):
        kp = np.zeros((68, 2))
        with pytest.raises(InvalidKeypointsError):
            yaw_from_keypoints(kp)

    def test_mirror_permutation_is_involution(self):
        assert (MIRROR_68[MIRROR_68] == np.arange(68)).all()

    def test_template_is_bilaterally_symmetric(self):
        pts = canonical_landmarks_3d()
        mirrored = pts[MIRROR_68].copy()
        mirrored[:, 0] = -mirrored[:, 0]
        np.testing.assert_allclose(pts, mirrored, atol=1e-12)


class TestSummary:
    def test_groups_and_means(self):
        rows = [
            {"config": 1, "psnr": 30.0, "ssim": 0.9, "lpips_like": 0.1, "face_rmse": 1.0},
            {"config": 1, "psnr": 20.0, "ssim": 0.8, "lpips_like": 0.3, "face_rmse": 3.0},
            {"config": "other", "psnr": 10.0, "ssim": 0.5, "lpips_like": 0.7, "face_rmse": 9.0},
        ]
        summary = summarize_by_scenario(rows)
        by_key = {row["config"]: row for row in summary}
        assert by_key["1"]["count"] == 2
        assert by_key["1"]["mean_psnr"] == pytest.approx(25.0)
        assert by_key["other"]["mean_ssim"] == pytest.approx(0.5)

    def test_empty_rows(self):
        assert summarize_by_scenario([]) == []
