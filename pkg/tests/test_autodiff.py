import math

import numpy as np
import pytest

from gramhead import autodiff as ad
from gramhead.autodiff import BatchNormStats, Tensor
from gramhead.errors import DimensionError, TapeError

from gradcases import COMPOSITES, OPS
from oracles import gradcheck, naive_conv2d, naive_matmul, numeric_grad, rel_error

# softmax([1, 0]) from the scalar formula e / (e + 1), 1 / (e + 1)
SOFTMAX_1_0 = [0.7310585786300049, 0.2689414213699951]


def grads_of(fn, *arrays):
    params = [ad.parameter(np.array(a, dtype=np.float64)) for a in arrays]
    with ad.Tape() as tape:
        loss = fn(*params)
    tape.backward(loss)
    return [p.grad for p in params]


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_small_variants_vs_loops(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        for b in (np.eye(2).T, np.array([[1.0, 0.0], [0.0, 1.0]]).T[::-1], a.T):
            got = ad.matmul(Tensor(a), Tensor(b)).data
            np.testing.assert_allclose(got, naive_matmul(a, b), rtol=0, atol=1e-12)

    def test_random_vs_loops(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            m, k, p = rng.integers(1, 6, size=3)
            a, b = rng.standard_normal((m, k)), rng.standard_normal((k, p))
            np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_formulas(self):
        rng = np.random.default_rng(1)
        a, b, g = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
        da, db = grads_of(lambda x, y: ad.sum_(ad.mul(ad.matmul(x, y), Tensor(g))), a, b)
        np.testing.assert_allclose(da, g @ b.T, atol=1e-12)
        np.testing.assert_allclose(db, a.T @ g, atol=1e-12)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 4, 4))
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_random_vs_loops(self):
        rng = np.random.default_rng(3)
        x, w = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((3, 2, 3, 3))
        got = ad.conv2d(Tensor(x), Tensor(w), stride=1, padding=1).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, 1, 1), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("stride,padding,k", [(2, 1, 3), (1, 0, 3), (2, 0, 1)])
    def test_strided_vs_loops(self, stride, padding, k):
        rng = np.random.default_rng(stride + 10 * padding + k)
        x, w = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((2, 2, k, k))
        got = ad.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, stride, padding), atol=1e-12)

    def test_zero_input(self):
        w = np.random.default_rng(0).standard_normal((2, 3, 3, 3))
        out = ad.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(w), padding=1)
        assert not out.data.any()

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_and_bad_padding(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), padding=2)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_scalar_oracle(self):
        np.testing.assert_allclose(ad.softmax(Tensor([1.0, 0.0])).data, SOFTMAX_1_0, rtol=1e-15)

    def test_shift_invariance_and_normalization(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            x = 5 * rng.standard_normal((3, 6))
            c = float(rng.uniform(-100, 100))
            p = ad.softmax(Tensor(x)).data
            np.testing.assert_allclose(ad.softmax(Tensor(x + c)).data, p, atol=1e-9)
            np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
            assert (p > 0).all()

    def test_large_logits_stay_finite(self):
        p = ad.softmax(Tensor([1000.0, 0.0])).data
        assert np.isfinite(p).all()

    def test_non_finite_input(self):
        with pytest.raises(FloatingPointError):
            ad.softmax(Tensor([np.nan, 0.0]))


class TestBatchNorm:
    def test_direct_statistics(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 2, 2))
        gamma, beta = rng.uniform(0.5, 2, 3), rng.standard_normal(3)
        stats = BatchNormStats(3, np.float64)
        out = ad.batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), stats, training=True).data
        for c in range(3):
            vals = [x[n, c, i, j] for n in range(2) for i in range(2) for j in range(2)]
            mu = sum(vals) / 8
            var = sum((v - mu) ** 2 for v in vals) / 8
            expect = gamma[c] * (x[:, c] - mu) / math.sqrt(var + 1e-5) + beta[c]
            np.testing.assert_allclose(out[:, c], expect, atol=1e-12)
            assert stats.running_mean[c] == pytest.approx(0.1 * mu, abs=1e-15)
            assert stats.running_var[c] == pytest.approx(0.9 + 0.1 * var * 8 / 7, abs=1e-15)

    def test_standardized_channel_passes_through(self):
        x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(4, 1, 1, 1)
        out = ad.batchnorm2d(Tensor(x), Tensor([1.0]), Tensor([0.0]), BatchNormStats(1, np.float64), True)
        np.testing.assert_allclose(out.data, x / math.sqrt(1 + 1e-5), rtol=1e-15)

    def test_constant_channel_gives_beta(self):
        x = np.full((3, 1, 2, 2), 7.0)
        out = ad.batchnorm2d(Tensor(x), Tensor([2.0]), Tensor([0.25]), BatchNormStats(1, np.float64), True)
        np.testing.assert_allclose(out.data, 0.25)

    def test_eval_uses_running_stats(self):
        stats = BatchNormStats(1, np.float64)
        stats.running_mean[:] = 2.0
        stats.running_var[:] = 4.0 - 1e-5
        stats.tracked = 1
        out = ad.batchnorm2d(Tensor(np.full((1, 1, 1, 1), 6.0)), Tensor([1.0]), Tensor([0.0]), stats, False)
        np.testing.assert_allclose(out.data, 2.0)

    def test_eval_before_train(self):
        with pytest.raises(RuntimeError, match="uninitialized"):
            ad.batchnorm2d(Tensor(np.zeros((1, 1, 1, 1))), Tensor([1.0]), Tensor([0.0]),
                           BatchNormStats(1), training=False)


class TestElementwise:
    def test_vectorize_row_major(self):
        out = ad.vectorize(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 1)
        np.testing.assert_array_equal(out.data, [[1, 2, 3, 4]])

    def test_global_avg_pool_constant(self):
        out = ad.global_avg_pool(Tensor(np.full((2, 3, 4, 4), 2.5)))
        np.testing.assert_array_equal(out.data, np.full((2, 3), 2.5))

    def test_mean_gradient(self):
        x = np.random.default_rng(6).standard_normal((3, 4))
        (g,) = grads_of(lambda t: ad.mean(t), x)
        np.testing.assert_allclose(g, np.full_like(x, 1 / 12), rtol=1e-15)
        (num,) = numeric_grad(lambda a: float(a.mean()), [x.copy()])
        assert rel_error(g, num) < 1e-8

    def test_reshape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.reshape(Tensor(np.zeros(6)), (4, 2))

    def test_log_clamp(self):
        x = ad.parameter([0.0, 1e-20, 2.0])
        with ad.Tape() as tape:
            y = ad.log(x)
            loss = ad.sum_(y)
        assert np.isfinite(y.data).all()
        assert y.data[0] == pytest.approx(math.log(1e-12))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [0.0, 0.0, 0.5])

    def test_operator_sugar(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
        np.testing.assert_array_equal((a + b).data, [4, 7])
        np.testing.assert_array_equal((a - b).data, [-2, -3])
        np.testing.assert_array_equal((a * b).data, [3, 10])
        np.testing.assert_array_equal((a * 2).data, [2, 4])
        np.testing.assert_array_equal((b / 2).data, [1.5, 2.5])
        np.testing.assert_array_equal((-a).data, [-1, -2])


class TestBackward:
    def test_square(self):
        (g,) = grads_of(lambda x: ad.mul(x, x), 3.0)
        assert g == 6.0

    def test_fan_out(self):
        (g,) = grads_of(lambda x: ad.add(x, x), 1.5)
        assert g == 2.0

    def test_accumulates_across_calls(self):
        x = ad.parameter(2.0)
        for _ in range(2):
            with ad.Tape() as tape:
                y = ad.mul(x, x)
            tape.backward(y)
        assert x.grad == 8.0

    def test_matmul_softmax_ce_composite(self):
        rng = np.random.default_rng(7)
        labels = np.array([0, 2, 1])
        onehot = np.eye(3)[labels]

        def build(t):
            p = ad.softmax(ad.matmul(t[0], t[1]))
            return ad.scale(ad.sum_(ad.mul(Tensor(onehot), ad.log(p))), -1 / 3)

        err = gradcheck(build, [rng.standard_normal((3, 4)), rng.standard_normal((4, 3))], rng)
        assert err < 1e-4

    def test_non_scalar_loss(self):
        x = ad.parameter([1.0, 2.0])
        with ad.Tape() as tape:
            y = ad.scale(x, 2.0)
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(y)

    def test_double_backward(self):
        x = ad.parameter(1.0)
        with ad.Tape() as tape:
            y = ad.mul(x, x)
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)

    def test_default_tape(self):
        x = ad.parameter(2.0)
        y = ad.mul(x, ad.exp(x))
        ad.backward(y)
        assert x.grad == pytest.approx(3 * math.exp(2.0))
        with pytest.raises(TapeError):
            ad.backward(y)
        z = ad.scale(x, 4.0)  # a fresh default tape is in place
        ad.backward(z)
        assert x.grad == pytest.approx(3 * math.exp(2.0) + 4)

    def test_no_grad_records_nothing(self):
        x = ad.parameter(1.0)
        with ad.Tape() as tape, ad.no_grad():
            ad.mul(x, x)
        assert len(tape) == 0

    def test_item_requires_scalar(self):
        with pytest.raises(TapeError):
            Tensor([1.0, 2.0]).item()

    def test_forward_determinism(self):
        rng = np.random.default_rng(8)
        x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
        a = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
        b = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
        assert a.tobytes() == b.tobytes()


class TestGradientCases:
    """A few random cases per op; the acceptance suite runs a hundred each."""

    @pytest.mark.parametrize("name", sorted(OPS) + sorted(COMPOSITES))
    def test_matches_central_differences(self, name):
        factory = {**OPS, **COMPOSITES}[name]
        rng = np.random.default_rng([11, len(name)])
        for _ in range(5):
            build, arrays = factory(rng)
            assert gradcheck(build, arrays, rng) < 1e-4
