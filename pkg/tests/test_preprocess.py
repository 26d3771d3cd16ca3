"""Target-generation behaviour against independent geometric oracles."""

import numpy as np
import pytest

from nucleidet.preprocess import (DilationKernel, build_target_set, centroid_from_instance,
                                  contour_from_instance, dilate_centroids,
                                  kernel_diameter_for_mpp, load_target_npz, save_target_npz)
from nucleidet.testkit import SynthSpec, oracle_boundary, oracle_disk_mask, synth_patch
from nucleidet.types import AnnotationSet, ClassSpec, ImagePatch


def patch(h=64, w=64, mpp=0.5):
    return ImagePatch(pixels=np.zeros((h, w, 3), dtype=np.uint8), mpp=mpp)


class TestCentroidFromInstance:
    def test_single_pixel_instance(self):
        m = np.zeros((10, 10), dtype=np.int64)
        m[7, 4] = 1
        assert centroid_from_instance(m) == [(4, 7, 1)]

    def test_square_instance_symmetry(self):
        m = np.zeros((10, 10), dtype=np.int64)
        m[2:5, 2:5] = 1
        assert centroid_from_instance(m) == [(3, 3, 1)]

    def test_l_shape_rounds_mean(self):
        # pixels (x, y): (0,0), (1,0), (0,1) -> mean (1/3, 1/3) -> (0, 0)
        m = np.zeros((5, 5), dtype=np.int64)
        m[0, 0] = m[0, 1] = m[1, 0] = 1
        assert centroid_from_instance(m) == [(0, 0, 1)]

    def test_empty_mask(self):
        assert centroid_from_instance(np.zeros((5, 5), dtype=np.int64)) == []


class TestContourFromInstance:
    def test_all_zero(self):
        out = contour_from_instance(np.zeros((8, 8), dtype=np.int64))
        assert out.sum() == 0

    def test_interior_square_equals_boundary_oracle(self):
        m = np.zeros((11, 11), dtype=np.int64)
        m[3:8, 3:8] = 1
        np.testing.assert_array_equal(contour_from_instance(m), oracle_boundary(m))

    def test_adjacent_instances_share_a_border(self):
        m = np.zeros((8, 8), dtype=np.int64)
        m[2:6, 1:4] = 1
        m[2:6, 4:7] = 2
        c = contour_from_instance(m)
        # the separating columns must fire on at least one side
        assert (c[2:6, 3] | c[2:6, 4]).all()

    def test_subset_of_oracle_on_random_maps(self):
        spec = SynthSpec(size=48, n_classes=2, count_range=(2, 4), min_gap=1.0)
        for seed in range(25):
            _, ann = synth_patch(spec, seed)
            lab = np.asarray(ann.instance_mask)
            c = contour_from_instance(lab)
            o = oracle_boundary(lab)
            assert not ((c == 1) & (o == 0)).any()


class TestDilateCentroids:
    def test_no_points(self):
        assert dilate_centroids(np.zeros((0, 2)), DilationKernel(5), 8, 8).sum() == 0

    def test_diameter_one_is_single_pixel(self):
        mask = dilate_centroids(np.array([[3.0, 4.0]]), DilationKernel(1), 8, 8)
        assert mask.sum() == 1 and mask[4, 3] == 1

    def test_diameter_five_matches_rasterisation_oracle(self):
        mask = dilate_centroids(np.array([[7.0, 7.0]]), DilationKernel(5), 15, 15)
        np.testing.assert_array_equal(mask, oracle_disk_mask(7, 7, 5, 15, 15))
        assert mask.sum() == 21

    def test_random_points_match_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            pts = rng.uniform(0, 31, size=(4, 2))
            d = int(rng.choice([3, 5, 9]))
            got = dilate_centroids(pts, DilationKernel(d), 32, 32)
            want = np.zeros((32, 32), dtype=np.uint8)
            for x, y in pts:
                want |= oracle_disk_mask(x, y, d, 32, 32)
            np.testing.assert_array_equal(got, want)

    def test_border_clipping(self):
        mask = dilate_centroids(np.array([[0.0, 0.0]]), DilationKernel(5), 10, 10)
        assert mask[0, 0] == 1 and mask.sum() < 21

    def test_pixel_count_bound(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(5, 26, size=(6, 2))
        mask = dilate_centroids(pts, DilationKernel(5), 32, 32)
        assert mask.sum() <= 6 * 21

    @pytest.mark.parametrize("d", [3, 5, 9, 11, 21])
    def test_footprint_symmetric_under_rotation(self, d):
        fp = DilationKernel(d).footprint()
        np.testing.assert_array_equal(fp, np.rot90(fp))

    def test_even_diameter_rejected(self):
        with pytest.raises(ValueError):
            DilationKernel(4)


class TestKernelSelection:
    @pytest.mark.parametrize("mpp,expected", [(0.5, 5), (0.4, 5), (0.6, 5),
                                              (0.25, 11), (0.24, 11), (0.3, 11)])
    def test_defaults_by_resolution(self, mpp, expected):
        assert kernel_diameter_for_mpp(mpp) == expected

    def test_unknown_resolution_requires_explicit_choice(self):
        with pytest.raises(ValueError):
            kernel_diameter_for_mpp(1.0)


class TestBuildTargetSet:
    SPEC = ClassSpec(classes=("a", "b"), dilation_diameters=(5, 5), matching_radii=(6, 6))

    def test_det_mode_from_centroids_only(self):
        a = AnnotationSet(xy=[[10.0, 10.0]], class_indices=[0])
        t = build_target_set(a, self.SPEC, patch(), tasks="det")
        assert t.nucleus is None and t.contour is None
        assert t.centroid.shape == (2, 64, 64)
        assert t.centroid[0].sum() == 21 and t.centroid[1].sum() == 0

    def test_full_mode_requires_instance_mask(self):
        a = AnnotationSet(xy=[[10.0, 10.0]], class_indices=[0])
        with pytest.raises(ValueError):
            build_target_set(a, self.SPEC, patch(), tasks="full")

    def test_single_instance_nucleus_footprint(self):
        mask = np.zeros((64, 64), dtype=np.int64)
        mask[10:14, 10:14] = 1
        a = AnnotationSet(xy=[[11.0, 11.0]], class_indices=[0],
                          instance_mask=mask, instance_classes=[0])
        t = build_target_set(a, self.SPEC, patch(), tasks="full")
        np.testing.assert_array_equal(t.nucleus[0], (mask > 0).astype(np.uint8))

    def test_per_class_partition(self):
        mask = np.zeros((64, 64), dtype=np.int64)
        mask[5:9, 5:9] = 1      # class a
        mask[40:44, 40:44] = 2  # class b
        a = AnnotationSet(xy=[[6.0, 6.0], [41.0, 41.0]], class_indices=[0, 1],
                          instance_mask=mask, instance_classes=[0, 1])
        t = build_target_set(a, self.SPEC, patch(), tasks="full")
        footprint_b = mask == 2
        for layer in (t.centroid[0], t.nucleus[0], t.contour[0]):
            assert not (layer.astype(bool) & footprint_b).any()

    def test_overall_targets_are_unions(self):
        mask = np.zeros((64, 64), dtype=np.int64)
        mask[5:9, 5:9] = 1
        mask[40:44, 40:44] = 2
        a = AnnotationSet(xy=[[6.0, 6.0], [41.0, 41.0]], class_indices=[0, 1],
                          instance_mask=mask, instance_classes=[0, 1])
        t = build_target_set(a, self.SPEC, patch(), tasks="full", include_overall=True)
        np.testing.assert_array_equal(t.overall_centroid, t.centroid.max(axis=0))
        np.testing.assert_array_equal(t.overall_nucleus, (mask > 0).astype(np.uint8))

    def test_npz_round_trip(self, tmp_path):
        mask = np.zeros((64, 64), dtype=np.int64)
        mask[10:14, 10:14] = 1
        a = AnnotationSet(xy=[[11.0, 11.0]], class_indices=[0],
                          instance_mask=mask, instance_classes=[0])
        t = build_target_set(a, self.SPEC, patch(), tasks="full", include_overall=True)
        save_target_npz(tmp_path / "t.npz", t)
        t2 = load_target_npz(tmp_path / "t.npz")
        np.testing.assert_array_equal(t.centroid, t2.centroid)
        np.testing.assert_array_equal(t.contour, t2.contour)
        np.testing.assert_array_equal(t.overall_centroid, t2.overall_centroid)
