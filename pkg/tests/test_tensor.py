"""Tensor engine: forward oracles, gradient checks, optimizer arithmetic."""

import math

import numpy as np
import pytest

from cftrack.errors import NonFiniteGradientError, ShapeError
from cftrack.gradcheck import finite_diff_check, relative_error
from cftrack.optim import AdamW
from cftrack.tensor import (
    Tensor,
    conv2d,
    depthwise_conv2d,
    depthwise_separable_conv,
    fully_connected,
    global_avg_pool,
    no_grad,
    pixelwise_correlation,
    scale_channels,
    uniform_param,
)


def _rand_tensor(rng, shape, requires_grad=True):
    return Tensor(rng.uniform(-1, 1, size=shape).astype(np.float32), requires_grad=requires_grad)


class TestConv2d:
    def test_scalar_scaling(self):
        x = Tensor(np.ones((1, 2, 2), dtype=np.float32))
        k = Tensor(np.full((1, 1, 1, 1), 3.0, dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = conv2d(x, k, b)
        assert out.shape == (1, 2, 2)
        assert np.allclose(out.data, 3.0)

    def test_sum_of_ones(self):
        x = Tensor(np.ones((1, 3, 3), dtype=np.float32))
        k = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = conv2d(x, k, b)
        assert out.shape == (1, 1, 1)
        assert np.allclose(out.data, 9.0)

    def test_output_size_formula(self):
        rng = np.random.default_rng(0)
        x = _rand_tensor(rng, (2, 11, 13), requires_grad=False)
        k = _rand_tensor(rng, (4, 2, 3, 3), requires_grad=False)
        b = _rand_tensor(rng, (4,), requires_grad=False)
        out = conv2d(x, k, b, stride=2, padding=1)
        assert out.shape == (4, (11 + 2 - 3) // 2 + 1, (13 + 2 - 3) // 2 + 1)

    def test_channel_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((3, 5, 5), dtype=np.float32))
        k = Tensor(np.zeros((4, 2, 3, 3), dtype=np.float32))
        b = Tensor(np.zeros(4, dtype=np.float32))
        with pytest.raises(ShapeError) as exc:
            conv2d(x, k, b)
        assert "(3, 5, 5)" in str(exc.value) and "(4, 2, 3, 3)" in str(exc.value)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = _rand_tensor(rng, (2, 5, 5))
        k = _rand_tensor(rng, (3, 2, 3, 3))
        b = _rand_tensor(rng, (3,))

        def loss():
            return conv2d(x, k, b, stride=1, padding=1).sum()

        report = finite_diff_check(
            loss, [("x", x), ("k", k), ("b", b)], h=1e-3, max_coords_per_tensor=40
        )
        assert report.passed, report.summary()
        assert report.max_rel_error < 1e-3

    def test_linearity_in_input(self):
        rng = np.random.default_rng(3)
        for alpha in rng.uniform(-3, 3, size=4):
            x = rng.uniform(-1, 1, size=(2, 6, 6)).astype(np.float32)
            k = _rand_tensor(rng, (3, 2, 3, 3), requires_grad=False)
            zero_b = Tensor(np.zeros(3, dtype=np.float32))
            base = conv2d(Tensor(x), k, zero_b, padding=1).data
            scaled = conv2d(Tensor(alpha * x), k, zero_b, padding=1).data
            assert np.allclose(scaled, alpha * base, atol=1e-5)

    def test_strided_gradient(self):
        rng = np.random.default_rng(17)
        x = _rand_tensor(rng, (2, 7, 7))
        k = _rand_tensor(rng, (3, 2, 3, 3))
        b = _rand_tensor(rng, (3,))

        def loss():
            return conv2d(x, k, b, stride=2, padding=1).sum()

        report = finite_diff_check(loss, [("x", x), ("k", k), ("b", b)], max_coords_per_tensor=30)
        assert report.passed, report.summary()


class TestDepthwiseSeparable:
    def test_identity_kernels_preserve_input(self):
        rng = np.random.default_rng(1)
        x = _rand_tensor(rng, (4, 6, 6), requires_grad=False)
        dw = np.zeros((4, 1, 3, 3), dtype=np.float32)
        dw[:, 0, 1, 1] = 1.0
        pw = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1)
        out = depthwise_separable_conv(
            x,
            Tensor(dw),
            Tensor(np.zeros(4, dtype=np.float32)),
            Tensor(pw),
            Tensor(np.zeros(4, dtype=np.float32)),
            stride=1,
            padding=1,
        )
        assert np.allclose(out.data, x.data, atol=1e-7)

    def test_matches_two_stage_composition(self):
        rng = np.random.default_rng(2)
        x = _rand_tensor(rng, (4, 6, 6), requires_grad=False)
        dwk = _rand_tensor(rng, (4, 1, 3, 3), requires_grad=False)
        dwb = _rand_tensor(rng, (4,), requires_grad=False)
        pwk = _rand_tensor(rng, (6, 4, 1, 1), requires_grad=False)
        pwb = _rand_tensor(rng, (6,), requires_grad=False)
        fused = depthwise_separable_conv(x, dwk, dwb, pwk, pwb, stride=1, padding=1)
        # Oracle: run the depthwise stage one channel at a time with plain
        # conv2d, then the pointwise stage as a 1x1 conv2d.
        chans = []
        for c in range(4):
            xc = Tensor(x.data[c : c + 1])
            kc = Tensor(dwk.data[c : c + 1])
            bc = Tensor(dwb.data[c : c + 1])
            chans.append(conv2d(xc, kc, bc, stride=1, padding=1).data[0])
        mid = Tensor(np.stack(chans))
        ref = conv2d(mid, pwk, pwb)
        assert np.allclose(fused.data, ref.data, atol=1e-6)

    def test_parameter_count_closed_form(self):
        # Cin=16, Cout=24, k=3 with both biases.
        dwk = np.zeros((16, 1, 3, 3))
        dwb = np.zeros(16)
        pwk = np.zeros((24, 16, 1, 1))
        pwb = np.zeros(24)
        total = dwk.size + dwb.size + pwk.size + pwb.size
        assert total == 16 * 9 + 16 + 24 * 16 + 24 == 568

    def test_gradients(self):
        rng = np.random.default_rng(5)
        x = _rand_tensor(rng, (3, 6, 6))
        dwk = _rand_tensor(rng, (3, 1, 3, 3))
        dwb = _rand_tensor(rng, (3,))
        pwk = _rand_tensor(rng, (5, 3, 1, 1))
        pwb = _rand_tensor(rng, (5,))
        params = [("x", x), ("dwk", dwk), ("dwb", dwb), ("pwk", pwk), ("pwb", pwb)]

        def loss():
            return depthwise_separable_conv(x, dwk, dwb, pwk, pwb, stride=2, padding=1).sum()

        report = finite_diff_check(loss, params, max_coords_per_tensor=25)
        assert report.passed, report.summary()


class TestFullyConnected:
    def test_identity(self):
        x = Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float32))
        w = Tensor(np.eye(3, dtype=np.float32))
        b = Tensor(np.zeros(3, dtype=np.float32))
        assert np.allclose(fully_connected(x, w, b).data, x.data)

    def test_row_sums(self):
        x = Tensor(np.ones(4, dtype=np.float32))
        w = Tensor(np.ones((2, 4), dtype=np.float32))
        b = Tensor(np.ones(2, dtype=np.float32))
        assert np.allclose(fully_connected(x, w, b).data, [5.0, 5.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            fully_connected(
                Tensor(np.zeros(3, dtype=np.float32)),
                Tensor(np.zeros((2, 4), dtype=np.float32)),
                Tensor(np.zeros(2, dtype=np.float32)),
            )

    def test_gradients(self):
        rng = np.random.default_rng(11)
        x = _rand_tensor(rng, (6,))
        w = _rand_tensor(rng, (4, 6))
        b = _rand_tensor(rng, (4,))

        def loss():
            return fully_connected(x, w, b).square().sum()

        report = finite_diff_check(loss, [("x", x), ("w", w), ("b", b)], max_coords_per_tensor=30)
        assert report.passed, report.summary()


class TestActivations:
    def test_relu_values(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0], dtype=np.float32))
        assert np.allclose(x.relu().data, [0.0, 0.0, 3.0])

    def test_sigmoid_at_zero(self):
        assert Tensor(np.array(0.0)).sigmoid().item() == pytest.approx(0.5)

    def test_sigmoid_strictly_in_unit_interval(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(-30, 30, size=1000).astype(np.float32))
        y = x.sigmoid().data
        assert np.all(y > 0.0) and np.all(y < 1.0)

    def test_relu_nonnegative(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.uniform(-5, 5, size=500).astype(np.float32))
        assert np.all(x.relu().data >= 0.0)

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor(np.array(0.0), requires_grad=True)
        y = x.sigmoid()
        y.backward()
        assert float(x.grad) == pytest.approx(0.25, abs=1e-7)

        def loss():
            return x.sigmoid()

        report = finite_diff_check(loss, [("x", x)])
        assert report.passed

    def test_smooth_l1_continuity(self):
        below = Tensor(np.array(1.0 - 1e-7)).smooth_l1().item()
        above = Tensor(np.array(1.0 + 1e-7)).smooth_l1().item()
        assert below == pytest.approx(0.5, abs=1e-6)
        assert above == pytest.approx(0.5, abs=1e-6)


class TestGlobalAvgPool:
    def test_constant_channel(self):
        x = Tensor(np.full((1, 4, 4), 7.0, dtype=np.float32))
        assert np.allclose(global_avg_pool(x).data, [7.0])

    def test_mean_of_2x2(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32))
        assert np.allclose(global_avg_pool(x).data, [2.5])

    def test_gradient_distributes_uniformly(self):
        rng = np.random.default_rng(4)
        x = _rand_tensor(rng, (3, 4, 5))

        def loss():
            return global_avg_pool(x).sum()

        report = finite_diff_check(loss, [("x", x)], max_coords_per_tensor=30)
        assert report.passed
        x.zero_grad()
        global_avg_pool(x).sum().backward()
        assert np.allclose(x.grad, 1.0 / 20.0)


class TestFusionOps:
    def test_correlation_zero_template(self):
        fx = Tensor(np.random.default_rng(0).uniform(-1, 1, (8, 17, 17)).astype(np.float32))
        fz = Tensor(np.zeros((8, 9, 9), dtype=np.float32))
        assert np.allclose(pixelwise_correlation(fz, fx).data, 0.0)

    def test_correlation_single_active_position(self):
        fz = np.zeros((1, 9, 9), dtype=np.float32)
        fz[0, 0, 0] = 2.0
        fx = np.full((1, 17, 17), 3.0, dtype=np.float32)
        out = pixelwise_correlation(Tensor(fz), Tensor(fx)).data
        assert np.allclose(out[0], 6.0)
        assert np.allclose(out[1:], 0.0)

    def test_bilinearity(self):
        rng = np.random.default_rng(9)
        fz = rng.uniform(-1, 1, (4, 9, 9)).astype(np.float32)
        fx = rng.uniform(-1, 1, (4, 17, 17)).astype(np.float32)
        base = pixelwise_correlation(Tensor(fz), Tensor(fx)).data
        for alpha in (0.5, -2.0, 3.25):
            scaled = pixelwise_correlation(Tensor(alpha * fz), Tensor(fx)).data
            assert np.allclose(scaled, alpha * base, atol=1e-5)
            scaled_x = pixelwise_correlation(Tensor(fz), Tensor(alpha * fx)).data
            assert np.allclose(scaled_x, alpha * base, atol=1e-5)
        fz2 = rng.uniform(-1, 1, (4, 9, 9)).astype(np.float32)
        additive = pixelwise_correlation(Tensor(fz + fz2), Tensor(fx)).data
        part = pixelwise_correlation(Tensor(fz2), Tensor(fx)).data
        assert np.allclose(additive, base + part, atol=1e-5)

    def test_correlation_gradients(self):
        rng = np.random.default_rng(13)
        fz = _rand_tensor(rng, (3, 4, 4))
        fx = _rand_tensor(rng, (3, 6, 6))

        def loss():
            return pixelwise_correlation(fz, fx).square().sum()

        report = finite_diff_check(loss, [("fz", fz), ("fx", fx)], max_coords_per_tensor=30)
        assert report.passed, report.summary()

    def test_scale_channels_gradients(self):
        rng = np.random.default_rng(14)
        x = _rand_tensor(rng, (5, 3, 3))
        s = _rand_tensor(rng, (5,))

        def loss():
            return scale_channels(x, s).square().sum()

        report = finite_diff_check(loss, [("x", x), ("s", s)], max_coords_per_tensor=30)
        assert report.passed, report.summary()


class TestAutodiffPlumbing:
    def test_gradients_accumulate_across_uses(self):
        x = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
        y = (x * 3.0) + (x * 4.0)
        y.sum().backward()
        assert np.allclose(x.grad, 7.0)

    def test_grads_persist_until_zeroed(self):
        x = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        (x * 2.0).sum().backward()
        (x * 2.0).sum().backward()
        assert np.allclose(x.grad, 4.0)
        x.zero_grad()
        assert x.grad is None

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y._parents == ()

    def test_window_and_pick_gradients(self):
        rng = np.random.default_rng(21)
        x = _rand_tensor(rng, (2, 6, 6))

        def loss():
            w = x.window(1, 2, 3, 3)
            return w.square().sum() + w.pick((0, 1, 1)) * 2.0

        report = finite_diff_check(loss, [("x", x)], max_coords_per_tensor=40)
        assert report.passed, report.summary()

    def test_backward_requires_scalar(self):
        x = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 1.0).backward()

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(30)
        x = _rand_tensor(rng, (3, 8, 8))
        k = _rand_tensor(rng, (4, 3, 3, 3))
        b = _rand_tensor(rng, (4,))
        out = conv2d(x, k, b, padding=1).relu().sigmoid()
        loss = out.mean()
        loss.backward()
        assert np.isfinite(out.data).all()
        for t in (x, k, b):
            assert np.isfinite(t.grad).all()


class TestAdamW:
    def test_zero_grad_zero_decay_is_identity(self):
        p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
        opt.step()
        assert np.allclose(p.data, [1.0, -2.0])

    def test_single_step_hand_evaluated(self):
        # m_hat = v_hat = 1 after bias correction, so the step is lr.
        p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        p.grad = np.array([1.0], dtype=np.float32)
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
        opt.step()
        assert p.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_decay_only_step(self):
        p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        opt = AdamW([("p", p)], lr=0.1, weight_decay=1e-4)
        opt.step()
        assert p.data[0] == pytest.approx(0.99999, abs=1e-9)

    def test_nonfinite_gradient_rejected_with_name(self):
        p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        p.grad = np.array([np.nan], dtype=np.float32)
        opt = AdamW([("weights.stem", p)], lr=0.1)
        with pytest.raises(NonFiniteGradientError) as exc:
            opt.step()
        assert "weights.stem" in str(exc.value)
        assert p.data[0] == 1.0  # update rejected

    def test_step_counter_increments(self):
        p = Tensor(np.array([0.5], dtype=np.float32), requires_grad=True)
        opt = AdamW([("p", p)], lr=1e-3)
        assert opt.step_count == 0
        opt.step()
        opt.step()
        assert opt.step_count == 2

    def test_moments_zero_initialized(self):
        p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        opt = AdamW([("p", p)])
        assert np.allclose(opt._m["p"], 0.0)
        assert np.allclose(opt._v["p"], 0.0)


class TestFiniteDiffCheck:
    def test_quadratic_loss_is_exact(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.uniform(-1, 1, size=12).astype(np.float32), requires_grad=True)

        def loss():
            return x.square().sum() * 0.5

        report = finite_diff_check(loss, [("x", x)], h=1e-3, max_coords_per_tensor=12)
        assert report.max_rel_error < 1e-6

    def test_corrupted_gradient_is_flagged(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.uniform(0.5, 1.5, size=6).astype(np.float32), requires_grad=True)

        def loss():
            return x.square().sum() * 0.5

        report = finite_diff_check(
            loss, [("x", x)], tolerance=1e-3, corrupt="x", max_coords_per_tensor=6
        )
        assert not report.passed
        assert report.max_rel_error == pytest.approx(0.5, abs=1e-3)
        assert [t.name for t in report.failures()] == ["x"]

    def test_relative_error_helper(self):
        assert relative_error(2.0, 1.0) == pytest.approx(0.5)
        assert relative_error(0.0, 0.0) == 0.0

    def test_restores_float32_storage(self):
        x = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)

        def loss():
            return x.sum()

        finite_diff_check(loss, [("x", x)])
        assert x.data.dtype == np.float32


class TestInit:
    def test_uniform_param_bounds_and_determinism(self):
        a = uniform_param(np.random.default_rng(3), (50, 50), fan_in=100)
        b = uniform_param(np.random.default_rng(3), (50, 50), fan_in=100)
        bound = math.sqrt(1.0 / 100)
        assert np.array_equal(a.data, b.data)
        assert np.all(np.abs(a.data) <= bound)
        assert a.data.dtype == np.float32
        assert a.requires_grad
