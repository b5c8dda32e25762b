import numpy as np
import pytest

from fmvr.restoration import (
    FmvrActivations,
    FmvrParams,
    OddDimension,
    avg_decompose,
    avg_unit_forward,
    fmvr_backward,
    fmvr_forward,
    init_fmvr_params,
    max_decompose,
    max_unit_forward,
)
from fmvr.tensor_core import ShapeMismatch
from conftest import assert_within_ulp
from oracles import central_difference, relative_error, restoration_oracle

X_2X2 = np.array([[[1.0, 2.0], [3.0, 4.0]]])
UNIT = init_fmvr_params(1)

# Worked 2x2 single-channel example, values frozen from restoration_oracle
# (scalar loop evaluation, verified below before anything else uses them).
EXPECTED_X_HAT_A = np.array([[[-3.0, -1.5], [2.0, 7.5]]])
EXPECTED_X_HAT_M = np.array([[[-6.0, -6.0], [-4.0, 0.0]]])
EXPECTED_Y = np.array([[[-9.0, -7.5], [-2.0, 7.5]]])


class TestScalarOracle:
    def test_worked_example_values(self):
        ref = restoration_oracle(X_2X2, [1.0], [1.0])
        np.testing.assert_array_equal(ref["x_l_a"], np.full((1, 2, 2), 2.5))
        np.testing.assert_array_equal(ref["x_h_a"], [[[-1.5, -0.5], [0.5, 1.5]]])
        np.testing.assert_array_equal(ref["x_h_m"], np.full((1, 2, 2), 4.0))
        np.testing.assert_array_equal(ref["x_l_m"], [[[-3.0, -2.0], [-1.0, 0.0]]])
        np.testing.assert_array_equal(ref["x_hat_a"], EXPECTED_X_HAT_A)
        np.testing.assert_array_equal(ref["x_hat_m"], EXPECTED_X_HAT_M)
        np.testing.assert_array_equal(ref["y"], EXPECTED_Y)


class TestDecompose:
    def test_avg_worked_example(self):
        low, high = avg_decompose(X_2X2)
        np.testing.assert_array_equal(low, np.full((1, 2, 2), 2.5))
        np.testing.assert_array_equal(high, [[[-1.5, -0.5], [0.5, 1.5]]])

    def test_avg_constant_grid_gives_zero_detail(self):
        _, high = avg_decompose(np.full((2, 4, 4), 3.7))
        np.testing.assert_array_equal(high, np.zeros((2, 4, 4)))

    def test_avg_zero_mean_blocks(self):
        x = np.array([[[-1.0, 1.0], [1.0, -1.0]]])
        low, high = avg_decompose(x)
        np.testing.assert_array_equal(low, np.zeros((1, 2, 2)))
        np.testing.assert_array_equal(high, x)

    def test_max_worked_example(self):
        peak, residual = max_decompose(X_2X2)
        np.testing.assert_array_equal(peak, np.full((1, 2, 2), 4.0))
        np.testing.assert_array_equal(residual, [[[-3.0, -2.0], [-1.0, 0.0]]])

    def test_max_constant_grid_gives_zero_residual(self):
        _, residual = max_decompose(np.full((1, 6, 6), -2.0))
        np.testing.assert_array_equal(residual, np.zeros((1, 6, 6)))

    def test_max_residual_never_positive(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            _, residual = max_decompose(rng.normal(size=(3, 6, 4)))
            assert np.all(residual <= 0.0)


class TestUnitForwards:
    def test_avg_unit_worked_example(self):
        np.testing.assert_array_equal(avg_unit_forward(X_2X2, [1.0]), EXPECTED_X_HAT_A)

    def test_avg_unit_zero_gain_keeps_attention_term(self):
        _, high = avg_decompose(X_2X2)
        np.testing.assert_array_equal(avg_unit_forward(X_2X2, [0.0]), high * X_2X2)

    def test_avg_unit_constant_input_is_zero(self):
        out = avg_unit_forward(np.full((1, 4, 4), 5.0), [1.0])
        np.testing.assert_array_equal(out, np.zeros((1, 4, 4)))

    def test_max_unit_worked_example(self):
        np.testing.assert_array_equal(max_unit_forward(X_2X2, [1.0]), EXPECTED_X_HAT_M)

    def test_max_unit_constant_input_is_zero(self):
        out = max_unit_forward(np.full((1, 2, 2), 5.0), [1.0])
        np.testing.assert_array_equal(out, np.zeros((1, 2, 2)))

    def test_max_unit_blockwise_constant_is_zero(self):
        x = np.kron(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 2)))[None]
        out = max_unit_forward(x, [1.0])
        np.testing.assert_array_equal(out, np.zeros((1, 4, 4)))


class TestForward:
    def test_worked_example_sum(self):
        y, _ = fmvr_forward(X_2X2, UNIT)
        np.testing.assert_array_equal(y, EXPECTED_Y)

    def test_single_token_passes_through(self):
        x = np.array([[[0.7]]])
        y, acts = fmvr_forward(x, UNIT)
        np.testing.assert_array_equal(y, x)
        assert acts.passthrough

    def test_degenerate_row_passes_through(self):
        x = np.arange(4.0).reshape(1, 1, 4)
        y, _ = fmvr_forward(x, UNIT)
        np.testing.assert_array_equal(y, x)

    def test_zero_input_zero_output(self):
        y, _ = fmvr_forward(np.zeros((2, 4, 4)), init_fmvr_params(2))
        np.testing.assert_array_equal(y, np.zeros((2, 4, 4)))

    def test_odd_dims_raise(self):
        with pytest.raises(OddDimension):
            fmvr_forward(np.zeros((1, 3, 4)), UNIT)
        with pytest.raises(OddDimension):
            fmvr_forward(np.zeros((1, 4, 6)), UNIT, window=4)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeMismatch):
            fmvr_forward(np.zeros((2, 2, 2)), UNIT)

    def test_window_3_global(self):
        x = np.arange(9.0).reshape(1, 3, 3)
        y, acts = fmvr_forward(x, UNIT, window=3)
        np.testing.assert_allclose(acts.x_l_a, np.full((1, 3, 3), 4.0), rtol=1e-15)
        np.testing.assert_array_equal(acts.x_h_m, np.full((1, 3, 3), 8.0))
        ref = restoration_oracle(x, [1.0], [1.0], window=3)
        np.testing.assert_allclose(y, ref["y"], rtol=1e-12, atol=1e-12)

    def test_matches_scalar_oracle_on_random_inputs(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            x = rng.normal(size=(3, 4, 6))
            w_a = rng.normal(size=3)
            w_m = rng.normal(size=3)
            for residual_skip in (False, True):
                params = FmvrParams(w_a, w_m, residual_skip)
                y, _ = fmvr_forward(x, params)
                ref = restoration_oracle(x, w_a, w_m, residual_skip=residual_skip)
                np.testing.assert_allclose(y, ref["y"], rtol=1e-12, atol=1e-14)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 2, 4, 4))
        params = FmvrParams(rng.normal(size=2), rng.normal(size=2))
        y, _ = fmvr_forward(x, params)
        for b in range(4):
            yb, _ = fmvr_forward(x[b], params)
            np.testing.assert_array_equal(y[b], yb)


class TestInvariants:
    def test_exact_decomposition_both_routes(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            x = rng.normal(size=(2, 4, 4)) * 10.0 ** rng.integers(-3, 4)
            _, acts = fmvr_forward(x, init_fmvr_params(2))
            scale_a = np.maximum(np.abs(x), np.abs(acts.x_l_a))
            assert_within_ulp(acts.x_l_a + acts.x_h_a, x, scale=scale_a)
            scale_m = np.maximum(np.abs(x), np.abs(acts.x_h_m))
            assert_within_ulp(acts.x_h_m + acts.x_l_m, x, scale=scale_m)

    def test_block_sums_of_detail_vanish(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            x = rng.normal(size=(3, 6, 6))
            _, high = avg_decompose(x)
            blocks = high.reshape(3, 3, 2, 3, 2)
            sums = np.abs(blocks.sum(axis=(2, 4)))
            scale = np.abs(x).reshape(3, 3, 2, 3, 2).max(axis=(2, 4))
            assert np.all(sums <= 4.0 * np.spacing(scale))

    def test_annihilation_on_blockwise_constant_input(self):
        rng = np.random.default_rng(5)
        coarse = rng.normal(size=(2, 3, 3))
        x = np.repeat(np.repeat(coarse, 2, axis=-2), 2, axis=-1)
        y, _ = fmvr_forward(x, init_fmvr_params(2))
        np.testing.assert_array_equal(y, np.zeros_like(x))

    def test_residual_skip_restores_input_on_blockwise_constant(self):
        x = np.repeat(np.repeat(np.ones((1, 2, 2)), 2, axis=-2), 2, axis=-1) * 1.5
        y, _ = fmvr_forward(x, init_fmvr_params(1, residual_skip=True))
        np.testing.assert_array_equal(y, x)

    def test_parameter_affinity_doubles_exactly(self):
        # Dyadic inputs keep every product and sum exact, so the linear part
        # of the output must double bitwise when the gains double.
        rng = np.random.default_rng(6)
        x = rng.integers(-16, 17, size=(2, 4, 4)).astype(np.float64) * 0.25
        w_a = rng.integers(-8, 9, size=2).astype(np.float64) * 0.25
        w_m = rng.integers(-8, 9, size=2).astype(np.float64) * 0.25
        zero, _ = fmvr_forward(x, FmvrParams(np.zeros(2), np.zeros(2)))
        once, _ = fmvr_forward(x, FmvrParams(w_a, w_m))
        twice, _ = fmvr_forward(x, FmvrParams(2 * w_a, 2 * w_m))
        np.testing.assert_array_equal(twice - zero, 2.0 * (once - zero))

    def test_locality_of_single_cell_perturbation(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 6, 6))
        params = init_fmvr_params(1)
        y0, _ = fmvr_forward(x, params)
        bumped = x.copy()
        bumped[0, 2, 3] += 0.125
        y1, _ = fmvr_forward(bumped, params)
        changed = np.argwhere(y0[0] != y1[0])
        assert changed.size > 0
        for i, j in changed:
            assert i // 2 == 1 and j // 2 == 1


class TestBackward:
    def _loss(self, x, params, g, window=2):
        y, _ = fmvr_forward(x, params, window)
        return float(np.sum(g * y))

    def test_zero_grad_in_zero_grad_out(self):
        x = np.random.default_rng(8).normal(size=(2, 4, 4))
        params = init_fmvr_params(2)
        _, acts = fmvr_forward(x, params)
        gx, gwa, gwm = fmvr_backward(np.zeros_like(x), acts, params)
        np.testing.assert_array_equal(gx, np.zeros_like(x))
        np.testing.assert_array_equal(gwa, np.zeros(2))
        np.testing.assert_array_equal(gwm, np.zeros(2))

    def test_gain_gradient_closed_form(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 4, 4))
        g = rng.normal(size=(3, 4, 4))
        params = FmvrParams(rng.normal(size=3), rng.normal(size=3))
        y, acts = fmvr_forward(x, params)
        _, gwa, gwm = fmvr_backward(g, acts, params)
        np.testing.assert_allclose(gwa, np.sum(g * acts.x_h_a, axis=(1, 2)), rtol=1e-14)
        np.testing.assert_allclose(gwm, np.sum(g * acts.x_l_m, axis=(1, 2)), rtol=1e-14)

    def test_passthrough_backward(self):
        x = np.array([[[2.0]]])
        params = init_fmvr_params(1)
        _, acts = fmvr_forward(x, params)
        gx, gwa, gwm = fmvr_backward(np.array([[[3.0]]]), acts, params)
        np.testing.assert_array_equal(gx, [[[3.0]]])
        np.testing.assert_array_equal(gwa, [0.0])
        np.testing.assert_array_equal(gwm, [0.0])

    def test_shape_mismatch_raises(self):
        x = np.zeros((1, 2, 2))
        params = init_fmvr_params(1)
        _, acts = fmvr_forward(x, params)
        with pytest.raises(ShapeMismatch):
            fmvr_backward(np.zeros((1, 2, 4)), acts, params)

    @pytest.mark.parametrize("shape", [(1, 2, 2), (3, 4, 4), (8, 6, 6)])
    @pytest.mark.parametrize("residual_skip", [False, True])
    def test_matches_finite_differences(self, shape, residual_skip):
        rng = np.random.default_rng(hash(shape) % 2**32)
        for seed in range(5):
            case = np.random.default_rng([seed, shape[0]])
            x = case.normal(size=shape)
            g = case.normal(size=shape)
            params = FmvrParams(
                case.normal(size=shape[0]), case.normal(size=shape[0]), residual_skip
            )
            _, acts = fmvr_forward(x, params)
            gx, gwa, gwm = fmvr_backward(g, acts, params)

            fd_x = central_difference(lambda v: self._loss(v, params, g), x.copy())
            fd_wa = central_difference(
                lambda v: self._loss(x, FmvrParams(v, params.w_m_low, residual_skip), g),
                params.w_a_high.copy(),
            )
            fd_wm = central_difference(
                lambda v: self._loss(x, FmvrParams(params.w_a_high, v, residual_skip), g),
                params.w_m_low.copy(),
            )
            assert relative_error(gx, fd_x) < 1e-6
            assert relative_error(gwa, fd_wa) < 1e-6
            assert relative_error(gwm, fd_wm) < 1e-6

    def test_window_3_matches_finite_differences(self):
        case = np.random.default_rng(11)
        x = case.normal(size=(2, 3, 3))
        g = case.normal(size=(2, 3, 3))
        params = FmvrParams(case.normal(size=2), case.normal(size=2))
        _, acts = fmvr_forward(x, params, window=3)
        gx, gwa, gwm = fmvr_backward(g, acts, params)
        fd_x = central_difference(lambda v: self._loss(v, params, g, window=3), x.copy())
        assert relative_error(gx, fd_x) < 1e-6

    def test_max_tie_routes_to_first_cell(self):
        x = np.array([[[2.0, 2.0], [0.0, 0.0]]])
        params = FmvrParams([0.0], [1.0])
        _, acts = fmvr_forward(x, params)
        assert acts.max_index[0, 0, 0] == 0
        g = np.array([[[0.0, 0.0], [1.0, 0.0]]])
        gx, _, _ = fmvr_backward(g, acts, params)
        # The max-route projection term lands on cell (0, 0), not (0, 1).
        assert gx[0, 0, 0] != 0.0
        assert gx[0, 0, 1] == 0.0

    def test_batched_backward_sums_gain_gradients(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(3, 2, 4, 4))
        g = rng.normal(size=(3, 2, 4, 4))
        params = FmvrParams(rng.normal(size=2), rng.normal(size=2))
        _, acts = fmvr_forward(x, params)
        gx, gwa, gwm = fmvr_backward(g, acts, params)
        ref_wa = np.zeros(2)
        ref_wm = np.zeros(2)
        for b in range(3):
            _, acts_b = fmvr_forward(x[b], params)
            gx_b, gwa_b, gwm_b = fmvr_backward(g[b], acts_b, params)
            np.testing.assert_array_equal(gx[b], gx_b)
            ref_wa += gwa_b
            ref_wm += gwm_b
        np.testing.assert_allclose(gwa, ref_wa, rtol=1e-13)
        np.testing.assert_allclose(gwm, ref_wm, rtol=1e-13)
