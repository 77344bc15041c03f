"""Reverse-mode autodiff: per-primitive gradients against finite differences,
broadcasting, graph traversal with shared subexpressions, and the optimizer."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from molseq import autodiff as ad
from molseq import optim


def fd_grad(fn, x, eps=1e-6):
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check_primitive(build, *arrays, tol=1e-7):
    """`build(*tensors)` must return a Tensor; gradient of its sum is checked
    against finite differences for every input."""
    tensors = [ad.tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = ad.sum_all(build(*tensors))
    ad.backward(loss)
    for t, a in zip(tensors, arrays):
        ref = fd_grad(lambda: float(ad.sum_all(build(*[ad.tensor(x.data) for x in tensors])).data), t.data)
        np.testing.assert_allclose(t.grad, ref, atol=tol, rtol=tol)


class TestPrimitives:
    rng = np.random.default_rng(0)

    def test_matmul(self):
        check_primitive(ad.matmul, self.rng.standard_normal((3, 4)), self.rng.standard_normal((4, 2)))

    def test_matmul_batched_broadcast(self):
        check_primitive(
            ad.matmul,
            self.rng.standard_normal((2, 3, 4)),
            self.rng.standard_normal((4, 5)),
        )

    def test_add_broadcast(self):
        check_primitive(ad.add, self.rng.standard_normal((3, 4)), self.rng.standard_normal((4,)))

    def test_mul(self):
        check_primitive(ad.mul, self.rng.standard_normal((2, 3)), self.rng.standard_normal((2, 3)))

    def test_scale_reshape_transpose(self):
        x = self.rng.standard_normal((2, 3, 4))
        check_primitive(lambda t: ad.scale(t, 2.5), x)
        check_primitive(lambda t: ad.reshape(t, (6, 4)), x)
        check_primitive(lambda t: ad.transpose(t, (2, 0, 1)), x)

    def test_sum_axis(self):
        x = self.rng.standard_normal((3, 4))
        check_primitive(lambda t: ad.sum_axis(t, axis=1), x)
        check_primitive(lambda t: ad.sum_axis(t, axis=0, keepdims=True), x)

    def test_rms_norm(self):
        check_primitive(
            ad.rms_norm, self.rng.standard_normal((5, 8)), self.rng.standard_normal(8)
        )

    def test_silu_gate(self):
        check_primitive(
            ad.silu_gate,
            self.rng.standard_normal((4, 6)),
            self.rng.standard_normal((4, 6)),
        )

    def test_softmax(self):
        check_primitive(ad.softmax_lastdim, self.rng.standard_normal((3, 7)))

    def test_softmax_rows_sum_to_one(self):
        y = ad.softmax_lastdim(ad.tensor(self.rng.standard_normal((4, 9))))
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_masked_softmax_zeroes_blocked(self):
        x = ad.tensor(self.rng.standard_normal((5, 5)), requires_grad=True)
        mask = np.zeros((5, 5))
        mask[np.triu_indices(5, k=1)] = -np.inf
        y = ad.softmax_lastdim(ad.masked_fill(x, mask))
        assert np.all(y.data[np.triu_indices(5, k=1)] == 0.0)
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)
        # Gradients must not leak through masked entries.
        ad.backward(ad.sum_all(ad.mul(y, ad.tensor(self.rng.standard_normal((5, 5))))))
        assert np.all(np.isfinite(x.grad))

    def test_embedding_lookup(self):
        table = self.rng.standard_normal((10, 4))
        ids = np.array([1, 3, 3, 9])
        t = ad.tensor(table.copy(), requires_grad=True)
        w = self.rng.standard_normal((4, 4))
        loss = ad.sum_all(ad.mul(ad.embedding_lookup(t, ids), ad.tensor(w)))
        ad.backward(loss)
        expected = np.zeros_like(table)
        for row, i in enumerate(ids):
            expected[i] += w[row]
        np.testing.assert_allclose(t.grad, expected, atol=1e-12)

    def test_embedding_out_of_range(self):
        t = ad.tensor(np.zeros((4, 2)), requires_grad=True)
        with pytest.raises(IndexError):
            ad.embedding_lookup(t, np.array([4]))

    def test_take_accumulates_duplicates(self):
        x = ad.tensor(self.rng.standard_normal((5, 3)), requires_grad=True)
        out = ad.take(x, np.array([2, 2, 0]), axis=0)
        ad.backward(ad.sum_all(out))
        expected = np.zeros((5, 3))
        expected[2] = 2.0
        expected[0] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_cross_entropy_matches_log_softmax(self):
        logits = self.rng.standard_normal((6, 5))
        targets = np.array([0, 1, 4, 2, 2, 3])
        t = ad.tensor(logits.copy(), requires_grad=True)
        loss = ad.cross_entropy(t, targets)
        from scipy.special import log_softmax

        ref = -log_softmax(logits, axis=-1)[np.arange(6), targets].mean()
        assert abs(loss.item() - ref) < 1e-12
        ad.backward(loss)
        ref_grad = fd_grad(
            lambda: float(ad.cross_entropy(ad.tensor(t.data), targets).data), t.data
        )
        np.testing.assert_allclose(t.grad, ref_grad, atol=1e-7)

    def test_cross_entropy_shape_mismatch(self):
        with pytest.raises(ad.ShapeMismatchError):
            ad.cross_entropy(ad.tensor(np.zeros((3, 5))), np.zeros(4, dtype=int))

    def test_mean_abs_error(self):
        pred = self.rng.standard_normal((4, 3))
        target = self.rng.standard_normal((4, 3))
        t = ad.tensor(pred.copy(), requires_grad=True)
        loss = ad.mean_abs_error(t, target)
        assert abs(loss.item() - np.abs(pred - target).mean()) < 1e-12
        ad.backward(loss)
        np.testing.assert_allclose(t.grad, np.sign(pred - target) / pred.size)

    def test_shape_mismatch_raises(self):
        a = ad.tensor(np.zeros((2, 3)))
        b = ad.tensor(np.zeros((4, 5)))
        with pytest.raises(ad.ShapeMismatchError):
            ad.matmul(a, b)


class TestUnbroadcast:
    @given(
        rows=st.integers(1, 4),
        cols=st.integers(1, 4),
        seed=st.integers(0, 100),
    )
    @settings(max_examples=30, deadline=None)
    def test_add_gradient_shapes(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        a = ad.tensor(rng.standard_normal((rows, cols)), requires_grad=True)
        b = ad.tensor(rng.standard_normal((cols,)), requires_grad=True)
        ad.backward(ad.sum_all(ad.add(a, b)))
        assert a.grad.shape == a.shape
        assert b.grad.shape == b.shape
        # Each broadcast element receives one gradient contribution per row.
        np.testing.assert_allclose(b.grad, np.full(cols, float(rows)))


class TestBackward:
    def test_shared_subexpression(self):
        # y = x*x + x*x must give dy/dx = 4x, exercising accumulation.
        x = ad.tensor(np.array([1.5, -2.0]), requires_grad=True)
        sq = ad.mul(x, x)
        y = ad.sum_all(ad.add(sq, sq))
        ad.backward(y)
        np.testing.assert_allclose(x.grad, 4 * x.data)

    def test_diamond_graph(self):
        x = ad.tensor(np.array([2.0]), requires_grad=True)
        a = ad.scale(x, 3.0)
        b = ad.scale(x, 5.0)
        y = ad.sum_all(ad.mul(a, b))
        ad.backward(y)
        # d/dx 15 x^2 = 30 x
        np.testing.assert_allclose(x.grad, [60.0])

    def test_non_scalar_loss_rejected(self):
        x = ad.tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(ad.scale(x, 1.0))

    def test_grad_accumulates_across_calls(self):
        x = ad.tensor(np.ones(3), requires_grad=True)
        for _ in range(2):
            ad.backward(ad.sum_all(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, 4.0 * np.ones(3))
        ad.zero_grads([x])
        assert x.grad is None

    def test_no_grad_tensors_untouched(self):
        x = ad.tensor(np.ones(3), requires_grad=False)
        y = ad.tensor(np.ones(3), requires_grad=True)
        ad.backward(ad.sum_all(ad.mul(x, y)))
        assert x.grad is None
        np.testing.assert_allclose(y.grad, np.ones(3))


class TestFiniteDifferenceCheck:
    def test_reports_small_error_for_correct_gradients(self):
        rng = np.random.default_rng(1)
        w = ad.tensor(rng.standard_normal((4, 4)), requires_grad=True)
        x = rng.standard_normal((3, 4))

        def fn():
            return ad.sum_all(ad.silu_gate(ad.matmul(ad.tensor(x), w), ad.matmul(ad.tensor(x), w)))

        assert ad.finite_difference_check(fn, [w]) < 1e-7

    def test_eps_validation(self):
        w = ad.tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ValueError):
            ad.finite_difference_check(lambda: ad.sum_all(w), [w], eps=0.0)


class TestOptim:
    def test_clip_reduces_norm(self):
        rng = np.random.default_rng(2)
        grads = {"a": rng.standard_normal(10) * 100, "b": rng.standard_normal(5) * 100}
        pre = np.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
        returned = optim.clip_global_norm(grads, 1.0)
        assert abs(returned - pre) < 1e-9
        post = np.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
        assert post <= 1.0 + 1e-9

    def test_clip_noop_below_threshold(self):
        grads = {"a": np.array([0.1, 0.1])}
        before = grads["a"].copy()
        optim.clip_global_norm(grads, 10.0)
        np.testing.assert_array_equal(grads["a"], before)

    def test_clip_non_finite_raises(self):
        with pytest.raises(optim.NonFiniteGradientError):
            optim.clip_global_norm({"a": np.array([np.nan])}, 1.0)

    def test_clip_bad_max_norm(self):
        with pytest.raises(ValueError):
            optim.clip_global_norm({"a": np.zeros(2)}, 0.0)

    def test_adam_first_step_is_signed_lr(self):
        # With bias correction, the first update is lr * g / (|g| + eps).
        params = {"w": np.array([1.0, -1.0])}
        grads = {"w": np.array([0.3, -0.2])}
        state = optim.AdamState.init(params)
        optim.adam_step(params, grads, state, lr=0.1)
        np.testing.assert_allclose(params["w"], [0.9, -0.9], atol=1e-6)

    def test_adam_converges_on_quadratic(self):
        params = {"w": np.array([5.0, -3.0])}
        state = optim.AdamState.init(params)
        for _ in range(2000):
            grads = {"w": 2 * params["w"]}
            optim.adam_step(params, grads, state, lr=0.05)
        assert np.abs(params["w"]).max() < 1e-3

    def test_decoupled_weight_decay(self):
        # Zero gradient: pure decay shrinks weights by lr * wd * w.
        params = {"w": np.array([2.0])}
        state = optim.AdamState.init(params)
        optim.adam_step(params, {"w": np.zeros(1)}, state, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(params["w"], [2.0 - 0.1 * 0.5 * 2.0])

    def test_shape_mismatch(self):
        params = {"w": np.zeros(2)}
        state = optim.AdamState.init(params)
        with pytest.raises(ValueError):
            optim.adam_step(params, {"w": np.zeros(3)}, state, lr=0.1)
