"""Kernel-level contracts: worked examples, gradients, and invariants."""

import numpy as np
import pytest
from conftest import op_gradcheck, rand_normal, rand_uniform

from stripseg.tensor import (
    LinearParams,
    ShapeError,
    Tape,
    Tensor,
    adaptive_avg_pool,
    add,
    backward,
    bilinear_resize,
    bind_params,
    concat_lastdim,
    count_macs,
    depthwise_conv,
    gelu,
    global_avg_pool,
    layernorm,
    linear,
    mac_region,
    matmul,
    mul,
    relu,
    reshape,
    scalar_mul,
    scale_channels,
    set_backward_tamper,
    sigmoid,
    softmax_lastdim,
    sum_all,
    tensor,
    transpose,
)


class TestTensorBasics:
    def test_data_is_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_constructor_rejects_non_finite(self):
        with pytest.raises(ValueError):
            tensor([1.0, np.nan])
        with pytest.raises(ValueError):
            tensor([np.inf])

    def test_shape_and_size(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.shape == (2, 3, 4)
        assert t.size == 24


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_dot_product(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_matches_triple_loop(self):
        a = rand_uniform((3, 4), seed=1)
        b = rand_uniform((4, 5), seed=2)
        expect = np.zeros((3, 5))
        for i in range(3):
            for j in range(5):
                acc = 0.0
                for k in range(4):
                    acc += a[i, k] * b[k, j]
                expect[i, j] = acc
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, expect, atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_associativity(self):
        for seed in range(4):
            a = rand_uniform((3, 4), seed=seed)
            b = rand_uniform((4, 6), seed=seed + 10)
            c = rand_uniform((6, 2), seed=seed + 20)
            left = matmul(matmul(Tensor(a), Tensor(b)), Tensor(c)).data
            right = matmul(Tensor(a), matmul(Tensor(b), Tensor(c))).data
            np.testing.assert_allclose(left, right, atol=1e-9)

    def test_batch_broadcast(self):
        a = rand_uniform((1, 2, 3), seed=3)
        b = rand_uniform((5, 3, 4), seed=4)
        out = matmul(Tensor(a), Tensor(b))
        assert out.shape == (5, 2, 4)
        np.testing.assert_allclose(out.data[2], a[0] @ b[2], atol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)

    def test_large_inputs_do_not_overflow(self):
        out = softmax_lastdim(Tensor([1000.0, 1000.0, 1000.0])).data
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)
        assert np.isfinite(out).all()

    def test_hand_evaluation(self):
        out = softmax_lastdim(Tensor([0.0, np.log(3.0)])).data
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-14)

    def test_rows_sum_to_one(self):
        x = rand_uniform((3, 5, 7), seed=5)
        out = softmax_lastdim(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert (out >= 0).all()

    def test_shift_invariance(self):
        x = rand_uniform((4, 9), seed=6)
        base = softmax_lastdim(Tensor(x)).data
        shifted = softmax_lastdim(Tensor(x + 13.5)).data
        np.testing.assert_allclose(base, shifted, atol=1e-12)


class TestLayernorm:
    def _affine(self, c):
        return Tensor(np.ones(c)), Tensor(np.zeros(c))

    def test_constant_vector_maps_to_zero(self):
        gamma, beta = self._affine(3)
        out = layernorm(Tensor([5.0, 5.0, 5.0]), gamma, beta)
        np.testing.assert_allclose(out.data, [0.0, 0.0, 0.0], atol=1e-12)

    def test_two_element_closed_form(self):
        eps = 1e-6
        gamma, beta = self._affine(2)
        out = layernorm(Tensor([[1.0, 3.0]]), gamma, beta, eps)
        delta = 1.0 - 1.0 / np.sqrt(1.0 + eps)
        np.testing.assert_allclose(out.data, [[-1.0 + delta, 1.0 - delta]], atol=1e-15)

    def test_affine_dominates_when_gamma_zero(self):
        out = layernorm(Tensor([[2.0, -1.0]]), Tensor(np.zeros(2)), Tensor([7.0, 7.0]))
        np.testing.assert_array_equal(out.data, [[7.0, 7.0]])

    def test_shift_and_scale_invariance(self):
        x = rand_normal((4, 16), seed=7)
        gamma, beta = self._affine(16)
        base = layernorm(Tensor(x), gamma, beta).data
        shifted = layernorm(Tensor(x + 3.25), gamma, beta).data
        np.testing.assert_allclose(base, shifted, atol=1e-10)
        scaled = layernorm(Tensor(3.0 * x), gamma, beta).data
        np.testing.assert_allclose(base, scaled, rtol=5e-6, atol=5e-6)


class TestDepthwiseConv:
    def test_1x1_scaling(self):
        x = rand_uniform((2, 3, 4, 5), seed=8)
        kernel = Tensor(np.full((3, 1, 1), 2.0))
        out = depthwise_conv(Tensor(x), kernel, Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 2.0 * x, atol=1e-14)

    def test_zero_kernel_bias_only(self):
        x = rand_uniform((1, 2, 3, 3), seed=9)
        out = depthwise_conv(Tensor(x), Tensor(np.zeros((2, 3, 3))), Tensor(np.ones(2)))
        np.testing.assert_array_equal(out.data, np.ones((1, 2, 3, 3)))

    def test_averaging_kernel_matches_nested_loop(self):
        ramp = np.arange(9.0).reshape(1, 1, 3, 3)
        kernel = np.full((1, 3, 3), 1.0 / 9.0)
        out = depthwise_conv(Tensor(ramp), Tensor(kernel), Tensor(np.zeros(1))).data
        expect = np.zeros((3, 3))
        for y in range(3):
            for x in range(3):
                acc = 0.0
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < 3 and 0 <= xx < 3:
                            acc += ramp[0, 0, yy, xx] / 9.0
                expect[y, x] = acc
        np.testing.assert_allclose(out[0, 0], expect, atol=1e-12)

    def test_unsupported_kernel_size(self):
        with pytest.raises(ShapeError):
            depthwise_conv(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 5, 5))))


class TestPooling:
    def test_global_constant(self):
        out = global_avg_pool(Tensor(np.full((2, 3, 4, 4), 2.5)))
        np.testing.assert_array_equal(out.data, np.full((2, 3), 2.5))

    def test_global_mean(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        np.testing.assert_array_equal(global_avg_pool(Tensor(x)).data, [[2.5]])

    def test_global_matches_summation(self):
        x = rand_uniform((1, 1, 4, 5), seed=10)
        acc = 0.0
        for y in range(4):
            for z in range(5):
                acc += x[0, 0, y, z]
        np.testing.assert_allclose(global_avg_pool(Tensor(x)).data[0, 0], acc / 20.0, atol=1e-12)

    def test_adaptive_constant(self):
        out = adaptive_avg_pool(Tensor(np.full((1, 2, 4, 4), 3.0)), 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 3.0))

    def test_adaptive_single_cell(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        np.testing.assert_array_equal(adaptive_avg_pool(Tensor(x), 1, 1).data, [[[[2.5]]]])

    def test_adaptive_matches_per_cell_mean(self):
        ramp = np.arange(64.0).reshape(1, 1, 8, 8)
        out = adaptive_avg_pool(Tensor(ramp), 2, 2).data
        for oy in range(2):
            for ox in range(2):
                cell = ramp[0, 0, 4 * oy : 4 * oy + 4, 4 * ox : 4 * ox + 4]
                acc = 0.0
                for v in cell.reshape(-1):
                    acc += v
                np.testing.assert_allclose(out[0, 0, oy, ox], acc / 16.0, atol=1e-12)

    def test_adaptive_rejects_non_divisible(self):
        with pytest.raises(ShapeError):
            adaptive_avg_pool(Tensor(np.zeros((1, 1, 6, 6))), 4, 4)

    def test_adaptive_preserves_global_mean(self):
        # integer payload + power-of-two extents: both reductions are exact
        vals = np.floor(rand_uniform((1, 2, 8, 8), seed=11, lo=0, hi=64))
        pooled = adaptive_avg_pool(Tensor(vals), 2, 2)
        assert float(pooled.data.mean()) == float(vals.mean())


class TestBilinearResize:
    def test_single_pixel_broadcasts(self):
        out = bilinear_resize(Tensor(np.full((1, 1, 1, 1), 4.25)), 5, 3)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 5, 3), 4.25))

    def test_constant_stays_constant(self):
        out = bilinear_resize(Tensor(np.full((2, 3, 4, 4), -1.5)), 7, 9)
        np.testing.assert_allclose(out.data, np.full((2, 3, 7, 9), -1.5), atol=1e-12)

    def test_2x2_to_4x4_half_pixel_values(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
        expect = np.array(
            [
                [0.0, 0.25, 0.75, 1.0],
                [0.5, 0.75, 1.25, 1.5],
                [1.5, 1.75, 2.25, 2.5],
                [2.0, 2.25, 2.75, 3.0],
            ]
        )
        np.testing.assert_allclose(bilinear_resize(Tensor(x), 4, 4).data[0, 0], expect, atol=1e-12)

    def test_same_size_is_identity(self):
        x = rand_uniform((2, 3, 5, 6), seed=12)
        np.testing.assert_allclose(bilinear_resize(Tensor(x), 5, 6).data, x, atol=1e-12)


class TestLinear:
    def test_identity_weight(self):
        x = rand_uniform((3, 4), seed=13)
        p = LinearParams(np.eye(4), np.zeros(4))
        bound, _ = bind_params(p, None)
        np.testing.assert_allclose(linear(Tensor(x), bound).data, x, atol=1e-14)

    def test_zero_weight_gives_bias(self):
        p = LinearParams(np.zeros((3, 4)), np.array([1.0, 2.0, 3.0]))
        bound, _ = bind_params(p, None)
        out = linear(Tensor(rand_uniform((2, 4), seed=14)), bound)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])

    def test_matches_matmul_oracle(self):
        x = rand_uniform((2, 5, 4), seed=15)
        w = rand_uniform((3, 4), seed=16)
        b = rand_uniform((3,), seed=17)
        bound, _ = bind_params(LinearParams(w, b), None)
        np.testing.assert_allclose(
            linear(Tensor(x), bound).data, np.einsum("bnk,ok->bno", x, w) + b, atol=1e-12
        )

    def test_shape_mismatch(self):
        bound, _ = bind_params(LinearParams(np.zeros((3, 4)), None), None)
        with pytest.raises(ShapeError):
            linear(Tensor(np.zeros((2, 5))), bound)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        tape = Tape()
        x = tape.leaf(rand_uniform((3, 4), seed=18))
        grads = backward(tape, sum_all(x))
        np.testing.assert_array_equal(grads[x.tid].data, np.ones((3, 4)))

    def test_half_square_gradient_is_input(self):
        tape = Tape()
        arr = rand_uniform((2, 5), seed=19)
        x = tape.leaf(arr)
        loss = scalar_mul(sum_all(mul(x, x)), 0.5)
        grads = backward(tape, loss)
        np.testing.assert_allclose(grads[x.tid].data, arr, atol=1e-14)

    def test_softmax_sum_gradient_is_zero(self):
        tape = Tape()
        x = tape.leaf(rand_uniform((4, 6), seed=20))
        grads = backward(tape, sum_all(softmax_lastdim(x)))
        assert np.abs(grads[x.tid].data).max() < 1e-10

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.leaf(np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            backward(tape, add(x, x))

    def test_gradient_shapes_match_tensor_shapes(self):
        tape = Tape()
        a = tape.leaf(rand_uniform((2, 3), seed=21))
        b = tape.leaf(rand_uniform((3, 5), seed=22))
        grads = backward(tape, sum_all(matmul(a, b)))
        assert grads[a.tid].shape == (2, 3)
        assert grads[b.tid].shape == (3, 5)

    def test_visits_nodes_in_reverse_order(self):
        tape = Tape()
        x = tape.leaf(rand_uniform((3,), seed=23))
        y = relu(x)
        z = sigmoid(y)
        loss = sum_all(z)
        seen = []
        for node in tape.nodes:
            original = node.backward_fn
            node.backward_fn = (lambda fn, oid: lambda g: seen.append(oid) or fn(g))(
                original, node.out_id
            )
        backward(tape, loss)
        assert seen == [n.out_id for n in reversed(tape.nodes)]

    def test_untaped_inputs_get_no_gradient(self):
        tape = Tape()
        x = tape.leaf(rand_uniform((2, 2), seed=24))
        const = Tensor(rand_uniform((2, 2), seed=25))
        grads = backward(tape, sum_all(mul(x, const)))
        assert x.tid in grads
        assert const.tid is None

    def test_mixed_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        with pytest.raises(ValueError):
            add(t1.leaf(np.zeros(2)), t2.leaf(np.zeros(2)))


GRADCHECK_TOL = 1e-4


class TestGradients:
    """Analytic vs central-difference gradients, five random shapes per op."""

    @pytest.mark.parametrize("seed,shape", [(0, (2, 3, 4)), (1, (1, 5, 2)), (2, (4, 1, 3)), (3, (2, 2, 2)), (4, (3, 4, 5))])
    def test_matmul(self, seed, shape):
        m, k, n = shape
        a = rand_uniform((m, k), seed=seed)
        b = rand_uniform((k, n), seed=seed + 50)
        assert op_gradcheck(matmul, [a, b], seed=seed) < GRADCHECK_TOL

    def test_matmul_batched(self):
        a = rand_uniform((2, 3, 4), seed=60)
        b = rand_uniform((2, 4, 5), seed=61)
        assert op_gradcheck(matmul, [a, b], seed=62) < GRADCHECK_TOL
        a1 = rand_uniform((1, 3, 4), seed=63)
        assert op_gradcheck(matmul, [a1, b], seed=64) < GRADCHECK_TOL

    @pytest.mark.parametrize("seed,shape", [(5, (3,)), (6, (2, 4)), (7, (2, 3, 5)), (8, (1, 7)), (9, (4, 2))])
    def test_softmax(self, seed, shape):
        assert op_gradcheck(softmax_lastdim, [rand_uniform(shape, seed=seed)], seed=seed) < GRADCHECK_TOL

    @pytest.mark.parametrize("seed,shape", [(10, (2, 4)), (11, (3, 3)), (12, (1, 4, 6)), (13, (5, 2)), (14, (2, 2, 3))])
    def test_layernorm(self, seed, shape):
        c = shape[-1]
        arrays = [rand_uniform(shape, seed=seed), rand_uniform((c,), seed=seed + 70), rand_uniform((c,), seed=seed + 80)]
        assert op_gradcheck(lambda x, g, b: layernorm(x, g, b, 1e-6), arrays, seed=seed) < GRADCHECK_TOL

    @pytest.mark.parametrize("seed,kh,shape", [(15, 3, (1, 2, 4, 4)), (16, 1, (2, 3, 3, 3)), (17, 3, (1, 1, 5, 3)), (18, 1, (1, 4, 2, 2)), (19, 3, (2, 2, 3, 4))])
    def test_depthwise_conv(self, seed, kh, shape):
        c = shape[1]
        arrays = [
            rand_uniform(shape, seed=seed),
            rand_uniform((c, kh, kh), seed=seed + 90),
            rand_uniform((c,), seed=seed + 100),
        ]
        assert op_gradcheck(depthwise_conv, arrays, seed=seed) < GRADCHECK_TOL

    @pytest.mark.parametrize("seed,shape", [(20, (1, 2, 3, 3)), (21, (2, 1, 4, 2)), (22, (1, 3, 2, 5)), (23, (2, 2, 2, 2)), (24, (1, 1, 6, 4))])
    def test_global_avg_pool(self, seed, shape):
        assert op_gradcheck(global_avg_pool, [rand_uniform(shape, seed=seed)], seed=seed) < GRADCHECK_TOL

    @pytest.mark.parametrize("seed,shape,target", [(25, (1, 2, 4, 4), (2, 2)), (26, (2, 1, 6, 4), (3, 2)), (27, (1, 3, 8, 8), (2, 4)), (28, (1, 1, 4, 6), (4, 3)), (29, (2, 2, 2, 2), (1, 1))])
    def test_adaptive_avg_pool(self, seed, shape, target):
        build = lambda x: adaptive_avg_pool(x, *target)
        assert op_gradcheck(build, [rand_uniform(shape, seed=seed)], seed=seed) < GRADCHECK_TOL

    @pytest.mark.parametrize("seed,shape,target", [(30, (1, 2, 2, 2), (4, 4)), (31, (1, 1, 4, 4), (2, 2)), (32, (2, 1, 3, 5), (5, 3)), (33, (1, 2, 4, 4), (4, 4)), (34, (1, 1, 1, 3), (3, 7))])
    def test_bilinear_resize(self, seed, shape, target):
        build = lambda x: bilinear_resize(x, *target)
        assert op_gradcheck(build, [rand_uniform(shape, seed=seed)], seed=seed) < GRADCHECK_TOL

    @pytest.mark.parametrize("seed,shape,out_dim", [(35, (2, 4), 3), (36, (1, 3, 5), 2), (37, (4, 2), 6), (38, (2, 2, 3), 3), (39, (3, 6), 1)])
    def test_linear(self, seed, shape, out_dim):
        in_dim = shape[-1]
        arrays = [
            rand_uniform(shape, seed=seed),
            rand_uniform((out_dim, in_dim), seed=seed + 110),
            rand_uniform((out_dim,), seed=seed + 120),
        ]
        build = lambda x, w, b: linear(x, LinearParams(w, b))
        assert op_gradcheck(build, arrays, seed=seed) < GRADCHECK_TOL

    @pytest.mark.parametrize("op", [relu, gelu, sigmoid])
    @pytest.mark.parametrize("seed,shape", [(40, (3, 4)), (41, (2, 2, 2)), (42, (7,)), (43, (1, 5)), (44, (4, 3))])
    def test_elementwise_activations(self, op, seed, shape):
        assert op_gradcheck(op, [rand_uniform(shape, seed=seed)], seed=seed) < GRADCHECK_TOL

    @pytest.mark.parametrize("seed,shape", [(45, (2, 3)), (46, (4,)), (47, (2, 2, 2)), (48, (1, 6)), (49, (3, 1, 2))])
    def test_add_mul(self, seed, shape):
        a = rand_uniform(shape, seed=seed)
        b = rand_uniform(shape, seed=seed + 130)
        assert op_gradcheck(add, [a, b], seed=seed) < GRADCHECK_TOL
        assert op_gradcheck(mul, [a, b], seed=seed) < GRADCHECK_TOL

    @pytest.mark.parametrize("seed,shape", [(50, (1, 2, 3, 3)), (51, (2, 3, 2, 2)), (52, (1, 1, 4, 4)), (53, (3, 2, 2, 3)), (54, (1, 4, 2, 2))])
    def test_scale_channels(self, seed, shape):
        x = rand_uniform(shape, seed=seed)
        gate = rand_uniform(shape[:2], seed=seed + 140)
        assert op_gradcheck(scale_channels, [x, gate], seed=seed) < GRADCHECK_TOL

    @pytest.mark.parametrize(
        "seed,shape,factor,axes",
        [
            (55, (2, 3, 4), -1.7, (2, 0, 1)),
            (56, (3, 2), 0.5, (1, 0)),
            (57, (4, 1, 2), 3.0, (1, 2, 0)),
            (58, (5,), -0.25, (0,)),
            (59, (2, 2, 3), 11.0, (0, 2, 1)),
        ],
    )
    def test_scalar_mul_and_structural_ops(self, seed, shape, factor, axes):
        x = rand_uniform(shape, seed=seed)
        n = int(np.prod(shape))
        assert op_gradcheck(lambda t: scalar_mul(t, factor), [x], seed=seed) < GRADCHECK_TOL
        assert op_gradcheck(lambda t: reshape(t, (n,)), [x], seed=seed + 200) < GRADCHECK_TOL
        assert op_gradcheck(lambda t: transpose(t, axes), [x], seed=seed + 210) < GRADCHECK_TOL
        y = rand_uniform(shape, seed=seed + 220)
        assert op_gradcheck(lambda a, b: concat_lastdim([a, b]), [x, y], seed=seed + 230) < GRADCHECK_TOL

    def test_tamper_hook_is_detected(self):
        x = rand_uniform((3, 4), seed=59)
        set_backward_tamper(True)
        try:
            err = op_gradcheck(softmax_lastdim, [x], seed=59)
        finally:
            set_backward_tamper(False)
        assert err > GRADCHECK_TOL


class TestFiniteness:
    @pytest.mark.parametrize("seed", range(3))
    def test_pipeline_outputs_finite(self, seed):
        x = rand_uniform((2, 4, 8), seed=seed)
        out = softmax_lastdim(
            layernorm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        )
        assert np.isfinite(out.data).all()


class TestMacCounter:
    def test_matmul_macs(self):
        with count_macs() as mc:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 4))))
        assert mc.total == 2 * 4 * 3

    def test_regions_and_peak(self):
        with count_macs() as mc:
            with mac_region("scores"):
                matmul(Tensor(np.zeros((4, 2))), Tensor(np.zeros((2, 4))))
            matmul(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))))
        assert mc.by_region["scores"] == 4 * 4 * 2
        assert mc.by_region["other"] == 2 * 2 * 2
        assert mc.total == 32 + 8
        assert mc.peak_elems == 16
        assert mc.peak_by_region["scores"] == 16

    def test_uncounted_ops(self):
        with count_macs() as mc:
            softmax_lastdim(Tensor(np.zeros((4, 4))))
            bilinear_resize(Tensor(np.zeros((1, 1, 4, 4))), 8, 8)
        assert mc.total == 0
