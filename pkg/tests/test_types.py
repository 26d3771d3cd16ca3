"""Core type invariants, validation, and annotation round-trips."""

import numpy as np
import pytest

from nucleidet.types import (AnnotationSet, ClassSpec, Detection, ImagePatch,
                             PredictionMaps, TargetMaskSet, read_annotation_csv,
                             read_instance_npz, validate_annotation,
                             write_annotation_csv, write_instance_npz)


def make_patch(h=64, w=64, mpp=0.5):
    return ImagePatch(pixels=np.zeros((h, w, 3), dtype=np.uint8), mpp=mpp, id="p0")


SPEC = ClassSpec(classes=("lymphocyte", "monocyte"),
                 dilation_diameters=(5, 5), matching_radii=(8.0, 10.0))


class TestImagePatch:
    def test_valid(self):
        p = make_patch()
        assert p.height == 64 and p.width == 64

    @pytest.mark.parametrize("shape", [(16, 64, 3), (64, 16, 3), (64, 64, 1), (64, 64)])
    def test_rejects_bad_shapes(self, shape):
        with pytest.raises(ValueError):
            ImagePatch(pixels=np.zeros(shape, dtype=np.uint8), mpp=0.5)

    def test_rejects_nonpositive_mpp(self):
        with pytest.raises(ValueError):
            ImagePatch(pixels=np.zeros((64, 64, 3)), mpp=0.0)

    def test_pixels_are_readonly(self):
        p = make_patch()
        with pytest.raises(ValueError):
            p.pixels[0, 0, 0] = 1


class TestClassSpec:
    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            ClassSpec(classes=("a", "a"), dilation_diameters=(5, 5), matching_radii=(6, 6))

    @pytest.mark.parametrize("d", [0, -3, 4])
    def test_diameters_must_be_odd_positive(self, d):
        with pytest.raises(ValueError):
            ClassSpec(classes=("a",), dilation_diameters=(d,), matching_radii=(6,))

    def test_index_of_preserves_order(self):
        assert SPEC.index_of("monocyte") == 1


class TestValidateAnnotation:
    def test_out_of_bounds_centroid(self):
        a = AnnotationSet(xy=[[300.0, 10.0]], class_indices=[0])
        report = validate_annotation(a, make_patch(256, 256))
        assert [v.code for v in report] == ["out_of_bounds"]

    def test_empty_annotation_is_valid(self):
        report = validate_annotation(AnnotationSet.empty(), make_patch())
        assert report == []

    def test_non_contiguous_labels(self):
        mask = np.zeros((64, 64), dtype=np.int64)
        mask[0, 0], mask[5, 5], mask[9, 9] = 1, 2, 4
        a = AnnotationSet(xy=np.zeros((0, 2)), class_indices=[], instance_mask=mask)
        assert "non_contiguous_labels" in [v.code for v in validate_annotation(a, make_patch())]

    def test_unknown_class_index(self):
        a = AnnotationSet(xy=[[1.0, 1.0]], class_indices=[7])
        assert "unknown_class" in [v.code for v in validate_annotation(a, make_patch(), n_classes=2)]

    def test_pure_function(self):
        a = AnnotationSet(xy=[[300.0, 10.0], [1.0, 1.0]], class_indices=[0, 5])
        first = validate_annotation(a, make_patch(), n_classes=2)
        second = validate_annotation(a, make_patch(), n_classes=2)
        assert first == second


class TestSerialisationRoundTrip:
    def test_csv_round_trip(self, tmp_path):
        a = AnnotationSet(xy=[[3.0, 4.0], [10.0, 20.0]], class_indices=[0, 1],
                          ids=("n1", "n2"), confidences=[0.5, 1.0])
        path = tmp_path / "ann.csv"
        write_annotation_csv(path, a, SPEC)
        b = read_annotation_csv(path, SPEC)
        np.testing.assert_array_equal(a.xy, b.xy)
        np.testing.assert_array_equal(a.class_indices, b.class_indices)
        np.testing.assert_array_equal(a.confidences, b.confidences)
        assert a.ids == b.ids

    def test_csv_round_trip_without_confidence(self, tmp_path):
        a = AnnotationSet(xy=[[3.0, 4.0]], class_indices=[1], ids=("x",))
        path = tmp_path / "ann.csv"
        write_annotation_csv(path, a, SPEC)
        b = read_annotation_csv(path, SPEC)
        assert b.confidences is None
        np.testing.assert_array_equal(a.xy, b.xy)

    def test_instance_npz_round_trip(self, tmp_path):
        mask = np.zeros((64, 64), dtype=np.int64)
        mask[2:6, 2:6] = 1
        mask[10:14, 10:14] = 2
        a = AnnotationSet(xy=[[3.0, 3.0], [11.0, 11.0]], class_indices=[0, 1],
                          instance_mask=mask, instance_classes=[0, 1])
        path = tmp_path / "mask.npz"
        write_instance_npz(path, a)
        mask2, classes2 = read_instance_npz(path)
        np.testing.assert_array_equal(mask, mask2)
        np.testing.assert_array_equal(a.instance_classes, classes2)


class TestMaskAndMapContainers:
    def test_target_masks_must_be_binary(self):
        with pytest.raises(ValueError):
            TargetMaskSet(centroid=np.full((1, 4, 4), 2, dtype=np.uint8))

    def test_prediction_maps_must_be_probabilities(self):
        with pytest.raises(ValueError):
            PredictionMaps(centroid=np.full((1, 4, 4), 1.5))

    def test_detection_confidence_bounds(self):
        with pytest.raises(ValueError):
            Detection(x=0, y=0, class_index=0, confidence=1.2)
