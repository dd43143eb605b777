import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kwt import tensor as T
from kwt.errors import ConfigurationError, InputError
from kwt.tensor import Tensor, cross_entropy_smoothed, gelu, layer_norm, softmax

from conftest import check_gradient, finite_difference_grad


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor(np.array([0.0, 0.0])))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_shift_invariance_no_overflow(self):
        out = softmax(Tensor(np.array([1000.0, 1000.0])))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_closed_form_ratio(self):
        # exp(0) : exp(ln 3) = 1 : 3
        out = softmax(Tensor(np.array([0.0, np.log(3.0)])))
        np.testing.assert_allclose(out.data, [0.25, 0.75], rtol=1e-12)

    def test_rows_sum_to_one_large_magnitudes(self, rng):
        for _ in range(1000):
            x = rng.uniform(-1e3, 1e3, size=(3, 5))
            out = softmax(Tensor(x), axis=-1)
            np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
            # entries can underflow to exactly 0 at these magnitudes
            assert np.all(out.data >= 0) and np.all(out.data <= 1 + 1e-12)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_shift_invariance_property(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=6)
        c = r.normal() * 10
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + c)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_gradient(self, rng):
        w = Tensor(rng.normal(size=(2, 4)))
        check_gradient(lambda t: softmax(t, axis=-1) * w, rng.normal(size=(2, 4)))


class TestLayerNorm:
    def test_constant_input_normalizes_to_zero(self):
        out = layer_norm(Tensor(np.ones(3)), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_affine_shift_derived(self):
        # independent mean/variance oracle for x=[1,2,3], beta=5
        x = np.array([1.0, 2.0, 3.0])
        eps = 1e-5
        expected = (x - x.mean()) / np.sqrt(x.var() + eps) + 5.0
        out = layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.full(3, 5.0)), eps=eps)
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)
        assert abs(out.data.mean() - 5.0) < 1e-9

    def test_pre_affine_statistics(self, rng):
        x = rng.normal(size=(10, 16)) * 3 + 1
        out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12)
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-6
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))

    def test_gradient_x(self, rng):
        gamma = Tensor(rng.normal(size=5))
        beta = Tensor(rng.normal(size=5))
        check_gradient(lambda t: layer_norm(t, gamma, beta), rng.normal(size=(3, 5)))

    def test_gradient_gamma_beta(self, rng):
        x = rng.normal(size=(3, 5))
        for which in ("gamma", "beta"):
            def op(t):
                g = t if which == "gamma" else Tensor(np.ones(5))
                b = t if which == "beta" else Tensor(np.zeros(5))
                return layer_norm(Tensor(x.copy()), g, b)
            check_gradient(op, rng.normal(size=5))


class TestGelu:
    def test_zero(self):
        assert float(gelu(Tensor(np.array(0.0))).data) == 0.0

    def test_asymptote(self):
        assert abs(float(gelu(Tensor(np.array(10.0))).data) - 10.0) < 1e-6

    def test_monotone_above_kink(self):
        x = np.linspace(-0.7, 4.0, 200)
        y = gelu(Tensor(x)).data
        assert np.all(np.diff(y) >= 0)

    def test_gradient_on_grid(self):
        check_gradient(gelu, np.linspace(-3, 3, 25), rtol=1e-5)


class TestCrossEntropySmoothed:
    def test_uniform_logits_gives_log_c(self):
        logits = Tensor(np.zeros((2, 7)))
        loss = cross_entropy_smoothed(logits, np.array([0, 6]), 0.0)
        np.testing.assert_allclose(float(loss.data), np.log(7.0), rtol=1e-12)

    def test_peaked_logits_near_zero(self):
        logits = np.full((1, 4), -50.0)
        logits[0, 2] = 50.0
        loss = cross_entropy_smoothed(Tensor(logits), np.array([2]), 0.0)
        assert float(loss.data) < 1e-6

    def test_random_case_vs_direct_formula(self, rng):
        B, C, s = 2, 3, 0.1
        logits = rng.normal(size=(B, C))
        targets = np.array([2, 0])
        # independent oracle: explicit smoothed distribution and log-softmax
        q = np.full((B, C), s / C)
        q[np.arange(B), targets] += 1 - s
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        expected = -(q * logp).sum(axis=1).mean()
        loss = cross_entropy_smoothed(Tensor(logits), targets, s)
        np.testing.assert_allclose(float(loss.data), expected, rtol=1e-10)

    def test_target_out_of_range(self):
        with pytest.raises(InputError):
            cross_entropy_smoothed(Tensor(np.zeros((1, 3))), np.array([3]), 0.0)

    def test_bad_smoothing(self):
        with pytest.raises(ConfigurationError):
            cross_entropy_smoothed(Tensor(np.zeros((1, 3))), np.array([0]), 1.0)

    def test_non_negative(self, rng):
        loss = cross_entropy_smoothed(Tensor(rng.normal(size=(8, 5))),
                                      rng.integers(0, 5, 8), 0.1)
        assert float(loss.data) >= 0

    def test_gradient(self, rng):
        targets = np.array([1, 0, 3])
        check_gradient(lambda t: cross_entropy_smoothed(t, targets, 0.1),
                       rng.normal(size=(3, 4)))


class TestPrimitiveGradients:
    """Randomized finite-difference checks for the structural ops."""

    def test_add_broadcast(self, rng):
        b = Tensor(rng.normal(size=4))
        check_gradient(lambda t: t + b, rng.normal(size=(3, 4)))

    def test_mul_broadcast(self, rng):
        b = Tensor(rng.normal(size=(3, 1)))
        check_gradient(lambda t: t * b, rng.normal(size=(3, 4)))

    def test_matmul_left_and_right(self, rng):
        w = Tensor(rng.normal(size=(4, 5)))
        check_gradient(lambda t: t @ w, rng.normal(size=(2, 3, 4)))
        x = Tensor(rng.normal(size=(2, 3, 4)))
        check_gradient(lambda t: x @ t, rng.normal(size=(4, 5)))

    def test_batched_matmul(self, rng):
        y = Tensor(rng.normal(size=(2, 4, 3)))
        check_gradient(lambda t: t @ y, rng.normal(size=(2, 3, 4)))

    def test_getitem_slice(self, rng):
        check_gradient(lambda t: t[:, 1, :], rng.normal(size=(2, 3, 4)))

    def test_transpose_reshape(self, rng):
        check_gradient(lambda t: t.transpose(1, 0, 2).reshape(4, 6),
                       rng.normal(size=(2, 4, 3)))

    def test_concat(self, rng):
        other = Tensor(rng.normal(size=(2, 3)))
        w = Tensor(rng.normal(size=(5, 3)))
        check_gradient(lambda t: T.concat([t, other], axis=0) * w,
                       rng.normal(size=(3, 3)))

    def test_mean_sum(self, rng):
        check_gradient(lambda t: t.mean(axis=-1), rng.normal(size=(3, 4)))

    def test_grad_accumulates_on_reuse(self, rng):
        check_gradient(lambda t: t * t + t, rng.normal(size=(3,)))


class TestTensorBasics:
    def test_shape_data_consistency(self, rng):
        t = Tensor(rng.normal(size=(3, 4)))
        assert int(np.prod(t.shape)) == t.data.size

    def test_grad_matches_shape(self, rng):
        t = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        (t * 2.0).sum().backward()
        assert t.grad.shape == t.shape

    def test_dtype_preserved(self):
        t = Tensor(np.zeros((2, 2), dtype=np.float64))
        assert (t + 1.0).dtype == np.float64
        t32 = Tensor(np.zeros((2, 2), dtype=np.float32))
        assert softmax(t32).dtype == np.float32

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))
