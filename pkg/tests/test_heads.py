"""Prediction heads, target assignment, box codec, loss arithmetic."""

import math

import numpy as np
import pytest

from cftrack.errors import NonFiniteLossError, ShapeError
from cftrack.gradcheck import finite_diff_check
from cftrack.heads import (
    LossWeights,
    PredictionHeads,
    assign_targets,
    box_is_valid,
    decode_box,
    smooth_l1,
    total_loss,
    weighted_bce,
)
from cftrack.tensor import Tensor


def _fused(seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-1, 1, (81, 17, 17)).astype(np.float32))


class TestRunHeads:
    def test_output_shapes(self):
        heads = PredictionHeads(seed=0)
        out = heads(_fused())
        assert out.cls_map.shape == (1, 17, 17)
        assert out.box_map.shape == (4, 17, 17)

    def test_cls_in_open_unit_interval(self):
        heads = PredictionHeads(seed=1)
        cls = heads(_fused(seed=2)).cls_map.data
        assert np.all(cls > 0.0) and np.all(cls < 1.0)

    def test_box_offsets_nonnegative(self):
        heads = PredictionHeads(seed=1)
        assert np.all(heads(_fused(seed=3)).box_map.data >= 0.0)

    def test_wrong_input_shape_rejected(self):
        heads = PredictionHeads(seed=0)
        with pytest.raises(ShapeError):
            heads(Tensor(np.zeros((64, 17, 17), dtype=np.float32)))

    def test_gradient_of_mean_cls(self):
        heads = PredictionHeads(seed=4)
        fused = _fused(seed=5)

        def loss():
            return heads(fused).cls_map.mean()

        params = list(heads.named_parameters())
        report = finite_diff_check(loss, params, h=1e-5, max_coords_per_tensor=2)
        assert report.passed, report.summary()


class TestAssignTargets:
    def test_centered_box_marks_center_cell(self):
        # 64x64 box centered in the 272 crop: center cell (8, 8) is positive.
        a = assign_targets((136 - 32, 136 - 32, 64, 64))
        assert a.target_present
        assert a.labels[8, 8]
        assert a.positive_count >= 1

    def test_absent_target_all_negative(self):
        a = assign_targets(None)
        assert not a.target_present
        assert a.positive_count == 0
        assert not a.labels.any()

    def test_box_outside_crop_flagged_absent(self):
        a = assign_targets((-200, -200, 50, 50))
        assert not a.target_present
        assert a.positive_count == 0

    def test_positive_targets_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            w, h = rng.uniform(24, 150, size=2)
            x = rng.uniform(0, 272 - w)
            y = rng.uniform(0, 272 - h)
            a = assign_targets((x, y, w, h))
            if a.positive_count:
                assert np.all(a.targets[:, a.labels] >= 0.0)

    def test_positive_cells_inside_central_region(self):
        # Enumerate cell centers directly as an oracle.
        box = (100.0, 60.0, 80.0, 96.0)
        a = assign_targets(box)
        x, y, w, h = box
        for i in range(17):
            for j in range(17):
                cx, cy = (j + 0.5) * 16, (i + 0.5) * 16
                inside = (
                    x + w * 0.25 <= cx < x + w * 0.75
                    and y + h * 0.25 <= cy < y + h * 0.75
                )
                assert a.labels[i, j] == inside

    def test_positive_weight_balances_classes(self):
        a = assign_targets((120, 120, 48, 48))
        assert a.positive_weight == (289 - a.positive_count) / a.positive_count


class TestDecodeBox:
    def test_unit_offsets_at_center_cell(self):
        box_map = np.zeros((4, 17, 17), dtype=np.float32)
        box_map[:, 8, 8] = 1.0
        x, y, w, h = decode_box(box_map, (8, 8), stride=16)
        # Cell center is (136, 136); one stride each way gives a 32x32 box.
        assert (x, y, w, h) == (120.0, 120.0, 32.0, 32.0)

    def test_round_trip_within_half_pixel(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            w, h = rng.uniform(30, 140, size=2)
            x = rng.uniform(0, 272 - w)
            y = rng.uniform(0, 272 - h)
            a = assign_targets((x, y, w, h))
            if not a.positive_count:
                continue
            i, j = np.argwhere(a.labels)[0]
            decoded = decode_box(a.targets, (int(i), int(j)))
            for got, want in zip(decoded, (x, y, w, h)):
                assert abs(got - want) <= 0.5

    def test_zero_offsets_flagged_invalid(self):
        box_map = np.zeros((4, 17, 17), dtype=np.float32)
        box = decode_box(box_map, (3, 3))
        assert not box_is_valid(box)


class TestWeightedBCE:
    def _assignment_with_one_positive(self):
        a = assign_targets((128, 128, 40, 40))
        assert a.positive_count == 1
        return a

    def test_uniform_half_gives_ln2(self):
        a = self._assignment_with_one_positive()
        p = Tensor(np.full((1, 17, 17), 0.5, dtype=np.float32))
        loss = weighted_bce(p, a, positive_weight=1.0).item()
        assert loss == pytest.approx(math.log(2.0), rel=1e-6)

    def test_perfect_predictions_drive_loss_to_zero(self):
        a = self._assignment_with_one_positive()
        p = np.full((1, 17, 17), 1e-7, dtype=np.float32)
        p[0][a.labels] = 1.0 - 1e-7
        loss = weighted_bce(Tensor(p), a, positive_weight=1.0).item()
        assert loss < 1e-5

    def test_positive_weight_scales_positive_term_linearly(self):
        a = self._assignment_with_one_positive()
        rng = np.random.default_rng(8)
        p = Tensor(rng.uniform(0.2, 0.8, (1, 17, 17)).astype(np.float32))
        l1 = weighted_bce(p, a, positive_weight=1.0).item()
        l2 = weighted_bce(p, a, positive_weight=2.0).item()
        # Differencing two float32 losses to extract the small positive term
        # amplifies rounding; the relation itself is exact.
        pos_contrib = -math.log(p.data[0][a.labels][0]) / a.labels.size
        assert l2 - l1 == pytest.approx(pos_contrib, rel=1e-3)

    def test_nonnegative(self):
        a = assign_targets((60, 60, 90, 90))
        rng = np.random.default_rng(9)
        for _ in range(20):
            p = Tensor(rng.uniform(1e-4, 1 - 1e-4, (1, 17, 17)).astype(np.float32))
            assert weighted_bce(p, a, a.positive_weight).item() >= 0.0


class TestSmoothL1:
    def test_scalar_values(self):
        x = Tensor(np.array([0.5], dtype=np.float32))
        assert x.smooth_l1().item() == pytest.approx(0.125)
        x = Tensor(np.array([2.0], dtype=np.float32))
        assert x.smooth_l1().item() == pytest.approx(1.5)

    def test_zero_positive_cells_contribute_zero(self):
        a = assign_targets(None)
        box_map = Tensor(np.ones((4, 17, 17), dtype=np.float32))
        assert smooth_l1(box_map, a).item() == 0.0

    def test_mean_over_positive_cells_and_offsets(self):
        a = assign_targets((120, 120, 64, 64))
        pred = a.targets.copy()
        pred[:, a.labels] += 0.5  # uniform error of 0.5 on every positive offset
        loss = smooth_l1(Tensor(pred), a).item()
        assert loss == pytest.approx(0.125, rel=1e-5)

    def test_gradient_away_from_joint(self):
        a = assign_targets((120, 120, 64, 64))
        rng = np.random.default_rng(10)
        pred = Tensor(
            (a.targets + rng.uniform(0.1, 0.4, a.targets.shape)).astype(np.float32),
            requires_grad=True,
        )

        def loss():
            return smooth_l1(pred, a)

        report = finite_diff_check(loss, [("pred", pred)], h=1e-4,
                                   tolerance=1e-4, max_coords_per_tensor=20)
        assert report.passed, report.summary()


class TestTotalLoss:
    def test_weighted_sum_with_defaults(self):
        w = LossWeights()
        total = total_loss(0.5, 0.2, 0.1, w).item()
        assert total == pytest.approx(0.9)

    def test_all_zero(self):
        assert total_loss(0.0, 0.0, 0.0, LossWeights()).item() == 0.0

    def test_lambda3_zero_removes_matching_term(self):
        w = LossWeights(lambda3=0.0)
        assert total_loss(0.3, 0.4, 123.0, w).item() == pytest.approx(0.7)

    def test_linear_in_each_component(self):
        w = LossWeights(lambda1=1.5, lambda2=0.5, lambda3=2.5)
        base = total_loss(1.0, 1.0, 1.0, w).item()
        assert total_loss(2.0, 1.0, 1.0, w).item() - base == pytest.approx(1.5)
        assert total_loss(1.0, 2.0, 1.0, w).item() - base == pytest.approx(0.5)
        assert total_loss(1.0, 1.0, 2.0, w).item() - base == pytest.approx(2.5)

    def test_nonfinite_component_named(self):
        with pytest.raises(NonFiniteLossError) as exc:
            total_loss(0.1, float("nan"), 0.2, LossWeights())
        assert "L_1" in str(exc.value)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-1.0)
