"""Sampler weight formulas and draw-frequency behaviour."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nucleidet.sampler import (SamplerState, build_sampler_state, class_weights,
                               default_avg_nucleus_area, estimate_area_mask_free,
                               export_weights_csv, patch_weight, patch_weights,
                               sample_indices)
from nucleidet.types import AnnotationSet, ClassSpec


class TestAreaEstimate:
    def test_zero_nuclei(self):
        assert estimate_area_mask_free(0, 95.0) == 0.0

    def test_product(self):
        assert estimate_area_mask_free(10, 95.0) == 950.0

    def test_background_clamped_at_zero(self):
        spec = ClassSpec(classes=("a",), dilation_diameters=(5,), matching_radii=(6,))
        a = AnnotationSet(xy=[[1.0, 1.0]] * 10, class_indices=[0] * 10)
        state = build_sampler_state([a], spec, patch_area=100.0,
                                    avg_nucleus_area=[50.0])
        assert state.areas[0, 1] == 500.0
        assert state.areas[0, 0] == 0.0

    def test_default_avg_area_is_disk_pixel_count(self):
        assert default_avg_nucleus_area(5) == 21.0


class TestClassWeights:
    def test_two_equal_classes(self):
        state = SamplerState(areas=np.array([[100.0, 100.0]]), patch_area=200.0)
        np.testing.assert_allclose(class_weights(state), [math.log(2)] * 2, rtol=0, atol=0)

    def test_single_class_owning_everything(self):
        state = SamplerState(areas=np.array([[300.0]]), patch_area=300.0)
        assert class_weights(state)[0] == 0.0

    def test_one_tenth_share(self):
        state = SamplerState(areas=np.array([[900.0, 100.0]]), patch_area=1000.0)
        assert class_weights(state)[1] == math.log(10)

    def test_degenerate_class_is_an_error(self):
        state = SamplerState(areas=np.array([[100.0, 0.0]]), patch_area=100.0)
        with pytest.raises(ValueError, match="degenerate"):
            class_weights(state)


class TestPatchWeight:
    def test_pure_single_class_patch(self):
        w = patch_weight(np.array([0.0, 200.0]), np.array([0.0, math.log(2)]), 200.0)
        assert w == pytest.approx(math.log(2), abs=0)

    def test_all_zero_class_weights(self):
        assert patch_weight(np.array([50.0, 150.0]), np.zeros(2), 200.0) == 0.0

    def test_half_class_half_background(self):
        w = patch_weight(np.array([100.0, 100.0]), np.array([0.0, math.log(2)]), 200.0)
        assert w == pytest.approx(0.5 * math.log(2), rel=0, abs=1e-15)

    def test_monotone_in_rare_class_area(self):
        w_c = np.array([0.1, 2.0])
        low = patch_weight(np.array([190.0, 10.0]), w_c, 200.0)
        high = patch_weight(np.array([150.0, 50.0]), w_c, 200.0)
        assert high > low

    @given(st.integers(min_value=-10, max_value=10))
    @settings(max_examples=20, deadline=None)
    def test_power_of_two_scaling_is_bitwise_invariant(self, k):
        scale = 2.0 ** k
        areas = np.array([[120.0, 40.0, 40.0], [10.0, 100.0, 90.0]])
        state = SamplerState(areas=areas, patch_area=200.0)
        scaled = SamplerState(areas=areas * scale, patch_area=200.0 * scale)
        w1, w2 = class_weights(state), class_weights(scaled)
        np.testing.assert_array_equal(w1, w2)
        np.testing.assert_array_equal(patch_weights(state, w1), patch_weights(scaled, w2))


class TestSampleIndices:
    def test_all_mass_on_one_index(self):
        idx = sample_indices(np.array([1.0, 0.0, 0.0]), 50, rng_seed=0)
        assert (idx == 0).all()

    def test_even_weights_frequencies(self):
        idx = sample_indices(np.array([1.0, 1.0]), 100_000, rng_seed=1)
        freq = (idx == 0).mean()
        assert abs(freq - 0.5) < 0.02

    def test_one_to_three_weights(self):
        idx = sample_indices(np.array([1.0, 3.0]), 100_000, rng_seed=2)
        assert abs((idx == 1).mean() - 0.75) < 0.02

    def test_deterministic_given_seed(self):
        a = sample_indices(np.array([0.5, 0.5, 1.0]), 1000, rng_seed=3)
        b = sample_indices(np.array([0.5, 0.5, 1.0]), 1000, rng_seed=3)
        np.testing.assert_array_equal(a, b)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            sample_indices(np.array([1.0, -0.1]), 5, rng_seed=0)

    def test_all_zero_falls_back_to_uniform_with_warning(self, caplog):
        with caplog.at_level("WARNING"):
            idx = sample_indices(np.zeros(4), 2000, rng_seed=4)
        assert "uniform" in caplog.text
        assert set(np.unique(idx)) == {0, 1, 2, 3}


class TestBuildStateAndExport:
    def test_instance_mask_areas_preferred(self):
        spec = ClassSpec(classes=("a",), dilation_diameters=(5,), matching_radii=(6,))
        mask = np.zeros((64, 64), dtype=np.int64)
        mask[0:4, 0:4] = 1
        a = AnnotationSet(xy=[[1.0, 1.0]], class_indices=[0],
                          instance_mask=mask, instance_classes=[0])
        state = build_sampler_state([a], spec, patch_area=64 * 64)
        assert state.areas[0, 1] == 16.0

    def test_csv_export(self, tmp_path):
        path = tmp_path / "weights.csv"
        export_weights_csv(path, ["p0", "p1"], np.array([0.25, 1.5]))
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "patch_id,weight"
        assert lines[1].startswith("p0,0.25")
