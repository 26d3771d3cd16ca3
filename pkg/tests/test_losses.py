"""Loss components against closed forms, the summation oracle, and autograd checks."""

import math

import numpy as np
import pytest
import torch

from nucleidet.losses import (LossConfig, UncertaintyParams, bce, centroid_loss,
                              class_loss, dice_loss, focal_loss, interclass_exclusion,
                              jaccard_loss, multi_task_loss, total_loss)
from nucleidet.testkit import oracle_scalar_losses


def t(*vals):
    return torch.tensor(vals, dtype=torch.float64)


def random_pair(rng, shape=(8, 8)):
    p = torch.tensor(rng.random(shape), dtype=torch.float64)
    g = torch.tensor((rng.random(shape) < 0.3).astype(float), dtype=torch.float64)
    return p, g


class TestScalarFixtures:
    def test_bce_perfect_prediction(self):
        g = t(1, 0, 1)
        assert float(bce(g.clone(), g)) <= 1e-6

    def test_bce_uniform_half(self):
        assert float(bce(t(.5, .5, .5, .5), t(1, 0, 1, 0))) == pytest.approx(math.log(2), abs=1e-12)

    def test_bce_single_pixel(self):
        assert float(bce(t(.9), t(1.))) == pytest.approx(-math.log(0.9), abs=1e-12)

    def test_dice_all_ones(self):
        assert float(dice_loss(t(1, 1, 1, 1), t(1, 1, 1, 1), eps=1.0)) == 0.0

    def test_dice_empty_rescued_by_eps(self):
        assert float(dice_loss(t(0, 0), t(0, 0), eps=1.0)) == 0.0

    def test_dice_disjoint_halves(self):
        assert float(dice_loss(t(1, 1, 0, 0), t(0, 0, 1, 1), eps=1.0)) == pytest.approx(0.8)

    def test_jaccard_perfect_binary(self):
        assert float(jaccard_loss(t(1, 0, 1), t(1, 0, 1), eps=1.0)) == 0.0

    def test_jaccard_disjoint(self):
        assert float(jaccard_loss(t(1, 1, 0, 0), t(0, 0, 1, 1), eps=1.0)) == pytest.approx(0.8)

    def test_jaccard_half_scaled_target(self):
        assert float(jaccard_loss(t(.5, .5), t(1, 1), eps=0.0)) == pytest.approx(1 / 3)

    def test_focal_single_pixel(self):
        expected = 0.25 * 0.25 * math.log(2)
        assert float(focal_loss(t(.5), t(1.))) == pytest.approx(expected, abs=1e-12)

    def test_focal_perfect(self):
        g = t(1, 0)
        assert float(focal_loss(g.clone(), g)) <= 1e-6

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            bce(t(0.5, 0.5), t(1.0))


class TestOracleAgreement:
    def test_components_match_summation_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            p, g = random_pair(rng)
            want = oracle_scalar_losses(p.numpy(), g.numpy())
            assert float(bce(p, g)) == pytest.approx(want["bce"], rel=1e-12)
            assert float(dice_loss(p, g)) == pytest.approx(want["dice"], rel=1e-12)
            assert float(jaccard_loss(p, g)) == pytest.approx(want["jaccard"], rel=1e-12)
            assert float(focal_loss(p, g)) == pytest.approx(want["focal"], rel=1e-12)

    def test_focal_gamma_zero_is_alpha_weighted_bce(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            p, g = random_pair(rng)
            want = oracle_scalar_losses(p.numpy(), g.numpy())["weighted_bce"]
            assert float(focal_loss(p, g, gamma=0.0)) == pytest.approx(want, rel=1e-12)


class TestCentroidAndClassLoss:
    def test_perfect_binary_prediction(self):
        g = t(1, 0, 1, 0)
        assert float(centroid_loss(g.clone(), g)) <= 1e-5

    def test_compositional_sum(self):
        rng = np.random.default_rng(13)
        p, g = random_pair(rng)
        total = float(centroid_loss(p, g))
        parts = float(jaccard_loss(p, g)) + float(dice_loss(p, g)) + float(focal_loss(p, g))
        assert total == pytest.approx(parts, rel=1e-12)

    def test_monotone_towards_target(self):
        rng = np.random.default_rng(14)
        g = torch.tensor((rng.random((8, 8)) < 0.3).astype(float), dtype=torch.float64)
        values = []
        for lam in np.linspace(0.0, 1.0, 6):
            p = 0.5 * g + lam * (g - 0.5 * g)
            values.append(float(centroid_loss(p, g)))
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_all_tasks_perfect(self):
        g = t(1, 0, 1, 0)
        assert float(class_loss(g.clone(), g, g.clone(), g, g.clone(), g)) <= 1e-4

    def test_contour_error_at_half_weight(self):
        g = t(1, 0, 1, 0)
        bad = t(.7, .3, .7, .3)
        on_seg = float(class_loss(g.clone(), g, bad, g, g.clone(), g))
        on_contour = float(class_loss(g.clone(), g, g.clone(), g, bad, g))
        base = float(class_loss(g.clone(), g, g.clone(), g, g.clone(), g))
        assert (on_contour - base) == pytest.approx(0.5 * (on_seg - base), rel=1e-9)

    def test_det_mode_ignores_aux_maps(self):
        g = t(1, 0)
        assert float(class_loss(g.clone(), g)) == float(
            class_loss(g.clone(), g, None, None, None, None))

    def test_missing_targets_rejected(self):
        g = t(1, 0)
        with pytest.raises(ValueError):
            class_loss(g.clone(), g, p_seg=g.clone(), g_seg=None, p_contour=g.clone(), g_contour=None)


class TestInterclassExclusion:
    def test_annihilated_by_zero_map(self):
        maps = [t(0, 0, 0), t(.9, .9, .9)]
        assert float(interclass_exclusion(maps)) == 0.0

    def test_all_ones_two_classes(self):
        assert float(interclass_exclusion([t(1, 1), t(1, 1)])) == 1.0

    def test_two_half_maps(self):
        assert float(interclass_exclusion([t(.5, .5), t(.5, .5)])) == 0.25

    def test_single_class_is_zero_with_warning(self, caplog):
        with caplog.at_level("WARNING"):
            v = interclass_exclusion([t(.5, .5)])
        assert float(v) == 0.0 and "exclusion" in caplog.text

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(15)
        a = torch.tensor(rng.random(16), dtype=torch.float64)
        b = torch.tensor(rng.random(16), dtype=torch.float64)
        c = torch.tensor(rng.random(16), dtype=torch.float64)
        assert float(interclass_exclusion([a, b, c])) == pytest.approx(
            float(interclass_exclusion([c, a, b])), rel=1e-12)

    def test_monotone_in_each_map(self):
        a, b = t(.2, .4), t(.5, .5)
        low = float(interclass_exclusion([a, b]))
        high = float(interclass_exclusion([a + 0.1, b]))
        assert high > low


class TestTotalLoss:
    def test_fixed_equal_single_class(self):
        lk = t(0.7)[0]
        inter = torch.zeros((), dtype=torch.float64)
        assert float(total_loss([lk], inter)) == pytest.approx(0.7)

    def test_uncertainty_at_zero_equals_fixed(self):
        rng = np.random.default_rng(16)
        losses = [torch.tensor(v) for v in rng.random(3)]
        inter = torch.tensor(0.05)
        fixed = float(total_loss(losses, inter, LossConfig()))
        unc = UncertaintyParams(3)
        dynamic = float(total_loss(losses, inter, LossConfig(weighting="uncertainty"), unc))
        assert dynamic == pytest.approx(fixed, rel=1e-12)

    def test_uncertainty_gradient_matches_finite_differences(self):
        losses = [torch.tensor(0.8, dtype=torch.float64), torch.tensor(0.3, dtype=torch.float64)]
        inter = torch.tensor(0.1, dtype=torch.float64)
        cfg = LossConfig(weighting="uncertainty")
        unc = UncertaintyParams(2)
        with torch.no_grad():
            unc.s.copy_(torch.tensor([0.4, -0.2], dtype=torch.float64))
        out = total_loss(losses, inter, cfg, unc)
        out.backward()
        h = 1e-6
        for k in range(2):
            analytic = float(unc.s.grad[k])
            expected = -math.exp(-float(unc.s[k])) * float(losses[k]) + 1.0
            with torch.no_grad():
                unc.s[k] += h
                up = float(total_loss(losses, inter, cfg, unc))
                unc.s[k] -= 2 * h
                down = float(total_loss(losses, inter, cfg, unc))
                unc.s[k] += h
            fd = (up - down) / (2 * h)
            assert analytic == pytest.approx(expected, rel=1e-9)
            assert analytic == pytest.approx(fd, rel=1e-5)

    def test_nan_component_is_named(self):
        with pytest.raises(RuntimeError, match="class_1"):
            total_loss([torch.tensor(0.1), torch.tensor(float("nan"))], torch.tensor(0.0))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(17)
        losses = [torch.tensor(v) for v in rng.random(4)]
        inter = torch.tensor(0.2)
        a = float(total_loss(losses, inter))
        b = float(total_loss(losses[::-1], inter))
        assert a == pytest.approx(b, rel=1e-12)


class TestGradientsAndProperties:
    LOSSES = [
        ("bce", lambda p, g: bce(p, g)),
        ("dice", lambda p, g: dice_loss(p, g)),
        ("jaccard", lambda p, g: jaccard_loss(p, g)),
        ("focal", lambda p, g: focal_loss(p, g)),
        ("centroid", lambda p, g: centroid_loss(p, g)),
    ]

    @pytest.mark.parametrize("name,fn", LOSSES, ids=[n for n, _ in LOSSES])
    def test_gradient_matches_central_differences(self, name, fn):
        rng = np.random.default_rng(18)
        p_np = rng.uniform(0.05, 0.95, size=(8, 8))
        g = torch.tensor((rng.random((8, 8)) < 0.4).astype(float), dtype=torch.float64)
        p = torch.tensor(p_np, dtype=torch.float64, requires_grad=True)
        fn(p, g).backward()
        h = 1e-6
        for idx in [(0, 0), (3, 4), (7, 7), (2, 6), (5, 1)]:
            base = p_np.copy()
            base[idx] += h
            up = float(fn(torch.tensor(base, dtype=torch.float64), g))
            base[idx] -= 2 * h
            down = float(fn(torch.tensor(base, dtype=torch.float64), g))
            fd = (up - down) / (2 * h)
            an = float(p.grad[idx])
            assert abs(an - fd) <= 1e-3 * max(abs(an), abs(fd), 1e-6), (name, idx)

    def test_nonnegative_and_finite_everywhere(self):
        rng = np.random.default_rng(19)
        for _ in range(30):
            p, g = random_pair(rng)
            # include exact endpoints
            p = torch.where(torch.rand_like(p) < 0.2, torch.round(p), p)
            for name, fn in self.LOSSES:
                v = float(fn(p, g))
                assert math.isfinite(v) and v >= 0.0, name


class TestMultiTaskComposition:
    def test_breakdown_keys_and_total(self):
        rng = np.random.default_rng(20)
        B, C, H, W = 2, 3, 8, 8
        outputs = {k: torch.tensor(rng.uniform(0.1, 0.9, (B, C, H, W)))
                   for k in ("centroid", "seg", "contour")}
        targets = {k: torch.tensor((rng.random((B, C, H, W)) < 0.3).astype(float))
                   for k in ("centroid", "seg", "contour")}
        total, parts = multi_task_loss(outputs, targets)
        assert "class0_centroid" in parts and "interclass" in parts and "total" in parts
        recomputed = sum(parts[f"class{k}_centroid"] + parts[f"class{k}_seg"]
                         + 0.5 * parts[f"class{k}_contour"] for k in range(C))
        assert float(total) == pytest.approx(recomputed + parts["interclass"], rel=1e-9)
