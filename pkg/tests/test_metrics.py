"""Metric tests against brute-force oracles and closed-form cases."""

import numpy as np
import pytest
from scipy import ndimage

from mindreg.grids import GridGeometry, LabelVolume, VectorField
from mindreg.metrics import LandmarkSet, dice, hd95, ndv_metric, tre, warp_labels

from oracles import hd95_oracle, tre_oracle


def label_volume(data, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data)
    return LabelVolume(GridGeometry(data.shape, spacing), data.astype(np.int32))


def random_mask(seed, n=10, threshold=70):
    rng = np.random.default_rng(seed)
    data = ndimage.gaussian_filter(rng.normal(size=(n, n, n)), 1.5)
    mask = data > np.percentile(data, threshold)
    assert mask.any()
    return mask


class TestLandmarkSet:
    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError, match="equal length"):
            LandmarkSet(((1.0, 2.0, 3.0),), ("a", "b"))

    def test_rejects_duplicate_identifiers(self):
        with pytest.raises(ValueError, match="unique"):
            LandmarkSet(((1.0, 2.0, 3.0), (4.0, 5.0, 6.0)), ("a", "a"))

    def test_rejects_non_finite_points(self):
        with pytest.raises(ValueError, match="finite"):
            LandmarkSet(((1.0, np.nan, 3.0),), ("a",))


class TestDice:
    def test_identical_labels_score_one(self):
        data = np.zeros((8, 8, 8), dtype=np.int32)
        data[1:4, 1:4, 1:4] = 1
        data[5:7, 5:7, 5:7] = 4
        vol = label_volume(data)
        per_label, mean = dice(vol, vol)
        assert per_label == {1: 1.0, 4: 1.0}
        assert mean == 1.0

    def test_disjoint_supports_score_zero(self):
        a = np.zeros((8, 8, 8), dtype=np.int32)
        b = np.zeros((8, 8, 8), dtype=np.int32)
        a[:2], b[6:] = 3, 3
        per_label, mean = dice(label_volume(a), label_volume(b))
        assert per_label == {3: 0.0}
        assert mean == 0.0

    def test_counting_formula(self):
        a = np.zeros((10, 10, 10), dtype=np.int32)
        b = np.zeros((10, 10, 10), dtype=np.int32)
        a.ravel()[:100] = 1
        b.ravel()[75:125] = 1
        per_label, _ = dice(label_volume(a), label_volume(b))
        assert per_label[1] == pytest.approx(2 * 25 / 150, abs=1e-15)

    def test_union_of_present_labels_only(self):
        a = np.zeros((8, 8, 8), dtype=np.int32)
        b = np.zeros((8, 8, 8), dtype=np.int32)
        a[0, 0, 0] = 1
        b[0, 0, 0] = 1
        b[1, 1, 1] = 2
        per_label, _ = dice(label_volume(a), label_volume(b))
        assert set(per_label) == {1, 2}
        assert per_label[2] == 0.0

    def test_symmetry(self):
        a = label_volume(random_mask(1).astype(np.int32) * 3)
        b = label_volume(random_mask(2).astype(np.int32) * 3)
        assert dice(a, b) == dice(b, a)

    def test_no_labels_gives_nan_mean(self):
        empty = label_volume(np.zeros((8, 8, 8), dtype=np.int32))
        per_label, mean = dice(empty, empty)
        assert per_label == {}
        assert np.isnan(mean)

    def test_rejects_geometry_mismatch(self):
        a = label_volume(np.zeros((8, 8, 8), dtype=np.int32))
        b = label_volume(np.zeros((10, 8, 8), dtype=np.int32))
        with pytest.raises(ValueError, match="geometry"):
            dice(a, b)


class TestHd95:
    def test_identical_masks_score_zero(self):
        vol = label_volume(random_mask(3).astype(np.int32))
        assert hd95(vol, vol, 1) == 0.0

    def test_face_offset_cubes(self):
        a = np.zeros((10, 10, 10), dtype=np.int32)
        b = np.zeros((10, 10, 10), dtype=np.int32)
        a[2:5, 2:5, 2:5] = 1
        b[5:8, 2:5, 2:5] = 1
        assert hd95(label_volume(a), label_volume(b), 1) == pytest.approx(3.0, abs=1e-12)

    @pytest.mark.parametrize("seed", [10, 11, 12, 13])
    def test_matches_all_pairs_oracle(self, seed):
        mask_a = random_mask(seed, n=10)
        mask_b = random_mask(seed + 100, n=10)
        got = hd95(label_volume(mask_a.astype(np.int32)), label_volume(mask_b.astype(np.int32)), 1)
        want = hd95_oracle(mask_a, mask_b, (1.0, 1.0, 1.0))
        assert got == pytest.approx(want, abs=1e-9)

    def test_matches_oracle_with_anisotropic_spacing(self):
        spacing = (1.0, 1.5, 2.0)
        mask_a = random_mask(20, n=9)
        mask_b = random_mask(21, n=9)
        got = hd95(
            label_volume(mask_a.astype(np.int32), spacing),
            label_volume(mask_b.astype(np.int32), spacing),
            1,
        )
        assert got == pytest.approx(hd95_oracle(mask_a, mask_b, spacing), abs=1e-9)

    def test_symmetry(self):
        a = label_volume(random_mask(30).astype(np.int32))
        b = label_volume(random_mask(31).astype(np.int32))
        assert hd95(a, b, 1) == hd95(b, a, 1)

    def test_rejects_empty_label(self):
        a = label_volume(random_mask(32).astype(np.int32))
        empty = label_volume(np.zeros((10, 10, 10), dtype=np.int32))
        with pytest.raises(ValueError, match="empty"):
            hd95(a, empty, 1)


class TestTre:
    def geometry(self, n=12):
        return GridGeometry((n, n, n))

    def test_zero_field_identical_landmarks(self):
        geom = self.geometry()
        lm = LandmarkSet(((2.0, 3.0, 4.0), (5.5, 6.25, 7.0)), ("a", "b"))
        mean, per = tre(lm, lm, VectorField(geom, np.zeros(geom.shape + (3,))))
        assert mean == 0.0 and per == (0.0, 0.0)

    def test_translation_compensates_exactly(self):
        geom = self.geometry()
        t = np.array([1.25, -0.5, 2.0])
        u = np.broadcast_to(t, geom.shape + (3,)).copy()
        fixed = LandmarkSet(((3.0, 4.0, 5.0), (6.0, 7.0, 3.5)), ("a", "b"))
        moving = LandmarkSet(tuple(tuple(np.add(p, t)) for p in fixed.points), ("a", "b"))
        mean, _ = tre(fixed, moving, VectorField(geom, u))
        assert mean == pytest.approx(0.0, abs=1e-12)

    def test_matches_pointwise_oracle(self):
        rng = np.random.default_rng(40)
        geom = self.geometry()
        u = rng.normal(0.0, 0.8, geom.shape + (3,))
        pts_f = [tuple(rng.uniform(1.0, 10.0, 3)) for _ in range(7)]
        pts_m = [tuple(rng.uniform(1.0, 10.0, 3)) for _ in range(7)]
        ids = tuple(f"p{i}" for i in range(7))
        mean, per = tre(LandmarkSet(pts_f, ids), LandmarkSet(pts_m, ids), VectorField(geom, u))
        want_mean, want_per = tre_oracle(pts_f, pts_m, u, (1.0, 1.0, 1.0))
        assert mean == pytest.approx(want_mean, abs=1e-9)
        np.testing.assert_allclose(per, want_per, atol=1e-9)

    def test_matching_is_by_identifier_not_order(self):
        geom = self.geometry()
        u = np.zeros(geom.shape + (3,))
        fixed = LandmarkSet(((2.0, 2.0, 2.0), (8.0, 8.0, 8.0)), ("a", "b"))
        moving = LandmarkSet(((8.0, 8.0, 8.0), (2.0, 2.0, 2.0)), ("b", "a"))
        mean, _ = tre(fixed, moving, VectorField(geom, u))
        assert mean == 0.0

    def test_physical_spacing_scales_distances(self):
        geom = GridGeometry((12, 12, 12), spacing=(2.0, 1.0, 1.0))
        u = np.zeros((12, 12, 12, 3))
        fixed = LandmarkSet(((3.0, 3.0, 3.0),), ("a",))
        moving = LandmarkSet(((4.0, 3.0, 3.0),), ("a",))
        mean, _ = tre(fixed, moving, VectorField(geom, u))
        assert mean == pytest.approx(2.0, abs=1e-12)

    def test_rejects_identifier_mismatch(self):
        geom = self.geometry()
        u = VectorField(geom, np.zeros(geom.shape + (3,)))
        a = LandmarkSet(((2.0, 2.0, 2.0),), ("a",))
        b = LandmarkSet(((2.0, 2.0, 2.0),), ("c",))
        with pytest.raises(ValueError, match="identifiers"):
            tre(a, b, u)

    def test_rejects_out_of_domain_points(self):
        geom = self.geometry()
        u = VectorField(geom, np.zeros(geom.shape + (3,)))
        inside = LandmarkSet(((2.0, 2.0, 2.0),), ("a",))
        outside = LandmarkSet(((2.0, 2.0, 14.0),), ("a",))
        with pytest.raises(ValueError, match="domain"):
            tre(inside, outside, u)


class TestWarpLabels:
    def test_identity_reproduces_labels(self):
        vol = label_volume(random_mask(50).astype(np.int32) * 7)
        u = VectorField(vol.geometry, np.zeros(vol.geometry.shape + (3,)))
        assert np.array_equal(warp_labels(vol, u).data, vol.data)

    def test_integer_translation_shifts_labels(self):
        data = np.zeros((8, 8, 8), dtype=np.int32)
        data[4, 4, 4] = 9
        vol = label_volume(data)
        u = np.zeros((8, 8, 8, 3))
        u[..., 0] = 1.0
        warped = warp_labels(vol, VectorField(vol.geometry, u))
        assert warped.data[3, 4, 4] == 9
        assert warped.data[4, 4, 4] == 0

    def test_rejects_geometry_mismatch(self):
        vol = label_volume(np.zeros((8, 8, 8), dtype=np.int32))
        u = VectorField(GridGeometry((10, 8, 8)), np.zeros((10, 8, 8, 3)))
        with pytest.raises(ValueError, match="geometry"):
            warp_labels(vol, u)


class TestNdvMetric:
    def test_zero_field_has_no_folding(self):
        geom = GridGeometry((8, 8, 8))
        assert ndv_metric(VectorField(geom, np.zeros((8, 8, 8, 3)))) == 0.0

    def test_delegates_to_deformation_module(self):
        from mindreg.bspline import non_diffeomorphic_volume
        geom = GridGeometry((9, 9, 9))
        u = np.zeros((9, 9, 9, 3))
        u[3, 4, 4, 0], u[5, 4, 4, 0] = 1.5, -1.5
        field = VectorField(geom, u)
        assert ndv_metric(field) == non_diffeomorphic_volume(field)
