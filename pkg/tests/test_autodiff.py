"""Tensor engine: op semantics, broadcasting rules, gradient correctness."""

import numpy as np
import pytest

from xmodal import autodiff as ad
from xmodal.autodiff import Tensor


def rand(shape, seed=0, lo=-2.0, hi=2.0):
    return ad.Tensor(np.random.default_rng(seed).uniform(lo, hi, size=shape))


class TestElementwise:
    def test_add_componentwise(self):
        out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_mul_identity(self):
        x = rand((3, 4), seed=1)
        out = x * Tensor(np.ones((3, 4)))
        assert np.array_equal(out.data, x.data)

    def test_broadcast_channel_scaling_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        feat = rng.normal(size=(2, 3, 3))
        mask = rng.normal(size=(1, 3, 3))
        out = (Tensor(feat) * Tensor(mask)).data
        expect = np.empty_like(feat)
        for c in range(2):
            for i in range(3):
                for j in range(3):
                    expect[c, i, j] = feat[c, i, j] * mask[0, i, j]
        assert np.array_equal(out, expect)

    def test_rank_promotion_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(3))

    def test_non_broadcastable_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.ones((2, 3))) * Tensor(np.ones((2, 2)))

    def test_division_by_near_zero_rejected(self):
        with pytest.raises(ValueError):
            Tensor([1.0]) / Tensor([1e-13])
        with pytest.raises(ValueError):
            Tensor([1.0]) / 0.0

    def test_scalar_operands(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        y = ad.tensor_sum(2.0 * x + 1.0 - (x / 2.0))
        y.backward()
        assert np.allclose(x.grad, 1.5)

    def test_broadcast_gradient_reduces_over_singleton(self):
        a = rand((2, 3, 3), seed=3)
        b = rand((1, 3, 3), seed=4)
        err = ad.grad_check(lambda t: ad.tensor_sum(a * t), b)
        assert err < 1e-6


class TestMatmul:
    def test_identity(self):
        x = rand((2, 5), seed=5)
        out = ad.matmul(Tensor(np.eye(2)), x)
        assert np.allclose(out.data, x.data)

    def test_hand_arithmetic(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[17.0], [39.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_vs_finite_differences(self):
        b = rand((4, 3), seed=6)
        err = ad.grad_check(lambda t: ad.tensor_sum(ad.matmul(t, b)), rand((2, 4), seed=7))
        assert err < 1e-6


class TestConv2d:
    def test_one_by_one_identity(self):
        x = rand((1, 4, 4), seed=8)
        k = Tensor(np.ones((1, 1, 1, 1)))
        out = ad.conv2d(x, k, Tensor(np.zeros(1)), stride=1, pad=0)
        assert np.array_equal(out.data, x.data)

    def test_all_ones_kernel_on_constant_input(self):
        c = 0.7
        x = Tensor(np.full((1, 5, 5), c))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, k, Tensor(np.zeros(1)), stride=1, pad=0)
        assert out.data.shape == (1, 3, 3)
        assert np.allclose(out.data, 9 * c)

    def test_gradients_vs_finite_differences(self):
        x = rand((2, 5, 5), seed=9)
        k = rand((3, 2, 3, 3), seed=10)
        b = rand((3,), seed=11)
        w = rand((3, 5, 5), seed=12)
        assert ad.grad_check(lambda t: ad.tensor_sum(ad.conv2d(t, k, b, 1, 1) * w), x) < 1e-5
        assert ad.grad_check(lambda t: ad.tensor_sum(ad.conv2d(x, t, b, 1, 1) * w), k) < 1e-5
        assert ad.grad_check(lambda t: ad.tensor_sum(ad.conv2d(x, k, t, 1, 1) * w), b) < 1e-5

    def test_strided_gradients(self):
        x = rand((2, 7, 7), seed=13)
        k = rand((3, 2, 3, 3), seed=14)
        b = rand((3,), seed=15)
        w = rand((3, 4, 4), seed=16)
        assert ad.grad_check(lambda t: ad.tensor_sum(ad.conv2d(t, k, b, 2, 1) * w), x) < 1e-5

    def test_non_integral_extent_rejected(self):
        x = rand((1, 6, 6), seed=17)
        k = rand((1, 1, 3, 3), seed=18)
        with pytest.raises(ValueError, match="non-integral"):
            ad.conv2d(x, k, Tensor(np.zeros(1)), stride=2, pad=1)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            ad.conv2d(rand((1, 4, 4)), rand((1, 1, 2, 2)), Tensor(np.zeros(1)))


class TestActivations:
    def test_leaky_relu(self):
        out = ad.leaky_relu(Tensor([-1.0, 2.0]), slope=0.1)
        assert np.allclose(out.data, [-0.1, 2.0])

    def test_sigmoid_symmetry_point(self):
        assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_exp_zero_is_one(self):
        assert ad.exp(Tensor([0.0])).data[0] == 1.0

    def test_log_domain(self):
        with pytest.raises(ValueError):
            ad.log(Tensor([1.0, 0.0]))

    def test_sqrt_domain(self):
        with pytest.raises(ValueError):
            ad.sqrt(Tensor([-1.0]))

    def test_softplus_matches_reference(self):
        x = np.array([-30.0, -1.0, 0.0, 1.0, 30.0])
        out = ad.softplus(Tensor(x)).data
        assert np.allclose(out, np.logaddexp(0.0, x), atol=1e-12)

    @pytest.mark.parametrize("fn,seed", [
        (lambda t: ad.tensor_sum(ad.leaky_relu(t, 0.2)), 20),
        (lambda t: ad.tensor_sum(ad.sigmoid(t)), 21),
        (lambda t: ad.tensor_sum(ad.exp(t)), 22),
        (lambda t: ad.tensor_sum(ad.softplus(t)), 23),
    ])
    def test_gradients(self, fn, seed):
        x = rand((3, 4), seed=seed, lo=0.2, hi=2.0)
        assert ad.grad_check(fn, x) < 1e-6

    def test_log_sqrt_gradients(self):
        x = rand((3, 4), seed=24, lo=0.5, hi=3.0)
        assert ad.grad_check(lambda t: ad.tensor_sum(ad.log(t)), x) < 1e-6
        assert ad.grad_check(lambda t: ad.tensor_sum(ad.sqrt(t)), x) < 1e-6


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0]), axis=0)
        assert np.allclose(out.data, [0.5, 0.5])

    def test_closed_form(self):
        out = ad.softmax(Tensor([np.log(2.0), 0.0]), axis=0)
        assert np.allclose(out.data, [2 / 3, 1 / 3], atol=1e-15)

    def test_rows_sum_to_one(self):
        x = rand((6, 5), seed=25, lo=-50.0, hi=50.0)
        y = ad.softmax(x, axis=1).data
        assert np.all(y >= 0)
        assert np.max(np.abs(y.sum(axis=1) - 1.0)) < 1e-12

    def test_gradient(self):
        w = rand((4, 5), seed=26)
        x = rand((4, 5), seed=27)
        assert ad.grad_check(lambda t: ad.tensor_sum(ad.softmax(t, 1) * w), x) < 1e-6


class TestShapeOps:
    def test_concat_shape(self):
        out = ad.concat([rand((3, 4, 5)), rand((1, 4, 5))], axis=0)
        assert out.shape == (4, 4, 5)

    def test_concat_slice_inverse(self):
        a = rand((2, 3, 3), seed=28)
        b = rand((1, 3, 3), seed=29)
        cat = ad.concat([a, b], axis=0)
        assert np.array_equal(ad.slice_axis(cat, 0, 0, 2).data, a.data)
        assert np.array_equal(ad.slice_axis(cat, 0, 2, 3).data, b.data)

    def test_concat_extent_mismatch(self):
        with pytest.raises(ValueError):
            ad.concat([rand((2, 3)), rand((2, 4))], axis=0)

    def test_concat_gradient_is_ones_for_sum(self):
        a = Tensor(np.zeros((2, 2)), requires_grad=True)
        b = Tensor(np.zeros((1, 2)), requires_grad=True)
        ad.tensor_sum(ad.concat([a, b], axis=0)).backward()
        assert np.array_equal(a.grad, np.ones((2, 2)))
        assert np.array_equal(b.grad, np.ones((1, 2)))

    def test_gather_scatter_gradients(self):
        idx = np.array([1, 3, 3, 0])
        w = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
        assert ad.grad_check(lambda t: ad.tensor_sum(ad.gather_flat(t, idx) * w),
                             rand((6,), seed=30)) < 1e-6
        w8 = Tensor(np.arange(8.0))
        assert ad.grad_check(lambda t: ad.tensor_sum(ad.scatter_flat(t, np.array([5, 0, 2]), 8) * w8),
                             rand((3,), seed=31)) < 1e-6

    def test_scatter_duplicate_indices_rejected(self):
        with pytest.raises(ValueError):
            ad.scatter_flat(rand((2,)), np.array([1, 1]), 4)


class TestBilinearResize:
    def test_constant_preserved(self):
        out = ad.bilinear_resize(Tensor(np.full((2, 3, 3), 4.5)), 7, 5)
        assert np.allclose(out.data, 4.5)
        assert out.shape == (2, 7, 5)

    def test_row_upsample_closed_form(self):
        out = ad.bilinear_resize(Tensor([[[0.0, 1.0]]]), 1, 4)
        assert np.allclose(out.data, [[[0.0, 0.25, 0.75, 1.0]]], atol=1e-15)

    def test_downsample_gradient(self):
        x = rand((2, 6, 6), seed=32)
        w = rand((2, 3, 3), seed=33)
        assert ad.grad_check(lambda t: ad.tensor_sum(ad.bilinear_resize(t, 3, 3) * w), x) < 1e-5


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        ad.tensor_sum(x * x).backward()
        assert np.allclose(x.grad, 2 * x.data)

    def test_sigmoid_at_zero(self):
        x = Tensor(np.zeros(4), requires_grad=True)
        ad.tensor_sum(ad.sigmoid(x)).backward()
        assert np.allclose(x.grad, 0.25)

    def test_fanout_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        ad.tensor_sum(x + x).backward()
        assert np.allclose(x.grad, 2.0)

    def test_non_scalar_output_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            (x * x).backward()

    def test_double_backward_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        y = ad.tensor_sum(x * x)
        y.backward()
        with pytest.raises(RuntimeError):
            y.backward()

    def test_detach_blocks_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        y = ad.tensor_sum(x.detach() * x)
        y.backward()
        assert np.allclose(x.grad, 2.0)  # only the live factor contributes


class TestGradCheck:
    def test_linear_function_is_exact(self):
        assert ad.grad_check(ad.tensor_sum, rand((4, 3), seed=34)) < 1e-10

    def test_eps_bounds(self):
        with pytest.raises(ValueError):
            ad.grad_check(ad.tensor_sum, rand((2,)), eps=1e-2)


class TestDeterminism:
    def test_ops_bit_identical(self):
        x = rand((4, 8, 8), seed=35)
        k = rand((4, 4, 3, 3), seed=36)
        b = rand((4,), seed=37)
        a1 = ad.conv2d(x, k, b, 1, 1).data
        a2 = ad.conv2d(x, k, b, 1, 1).data
        assert np.array_equal(a1, a2)
        r1 = ad.bilinear_resize(x, 5, 11).data
        r2 = ad.bilinear_resize(x, 5, 11).data
        assert np.array_equal(r1, r2)

    def test_tensor_data_read_only(self):
        x = rand((2, 2))
        with pytest.raises(ValueError):
            x.data[0, 0] = 1.0
