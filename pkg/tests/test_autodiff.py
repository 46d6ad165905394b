import numpy as np
import pytest

import hopflow.autodiff as A
from hopflow.autodiff import Parameter, Tape, finite_difference, max_rel_error


def check_gradients(build, shapes, seed=0, eps=1e-5, tol=1e-6):
    """Compare analytic gradients of a scalar-valued tape program against
    central finite differences at float64.

    ``build(tape, leaves)`` returns the scalar loss Value given leaf Values
    created from float64 arrays with the given shapes.
    """
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]

    tape = Tape(dtype=np.float64)
    leaves = [tape.leaf(a) for a in arrays]
    tape.backward(build(tape, leaves))
    analytic = [
        lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves
    ]

    def f():
        t = Tape(dtype=np.float64)
        return float(build(t, [t.leaf(a) for a in arrays]).data)

    numeric = finite_difference(f, arrays, eps=eps)
    err = max_rel_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol:g}"
    return err


def weighted_sum(tape, value, seed=123):
    """Project an arbitrary output to a scalar with a fixed random weighting
    so every entry influences the loss."""
    rng = np.random.default_rng(seed)
    w = tape.const(rng.standard_normal(value.shape))
    return A.reduce_sum(tape, A.mul_const(tape, value, w))


class TestLinear:
    def test_identity_weight(self):
        tape = Tape()
        x = tape.leaf(np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32))
        out = A.linear(tape, x, tape.leaf(np.eye(4, dtype=np.float32)))
        assert np.allclose(out.data, x.data)

    def test_hand_case(self):
        tape = Tape()
        out = A.linear(
            tape,
            tape.leaf(np.array([[1.0, 2.0]])),
            tape.leaf(np.array([[1.0], [1.0]])),
            tape.leaf(np.array([0.5])),
        )
        assert np.allclose(out.data, [[3.5]])

    def test_gradient(self):
        check_gradients(
            lambda t, ls: weighted_sum(t, A.linear(t, ls[0], ls[1], ls[2])),
            [(3, 4), (4, 2), (2,)],
            tol=1e-6,
        )

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(ValueError, match="mismatch"):
            A.linear(tape, tape.leaf(np.zeros((2, 3))), tape.leaf(np.zeros((4, 2))))


class TestLayerNorm:
    def test_constant_row_collapses_to_beta(self):
        tape = Tape()
        x = tape.leaf(np.full((2, 4), 3.0, dtype=np.float32))
        out = A.layer_norm(tape, x, tape.leaf(np.ones(4)), tape.leaf(np.zeros(4)))
        assert np.allclose(out.data, 0.0, atol=1e-4)

    def test_two_point_row(self):
        tape = Tape()
        out = A.layer_norm(
            tape,
            tape.leaf(np.array([[1.0, 3.0]])),
            tape.leaf(np.ones(2)),
            tape.leaf(np.zeros(2)),
        )
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_gradient(self):
        check_gradients(
            lambda t, ls: weighted_sum(t, A.layer_norm(t, ls[0], ls[1], ls[2])),
            [(3, 5), (5,), (5,)],
            tol=1e-5,
        )


class TestDropout:
    def test_p_zero_identity(self):
        tape = Tape(training=True, rng=np.random.default_rng(0))
        x = tape.leaf(np.ones((4, 4)))
        assert A.dropout(tape, x, 0.0) is x

    def test_eval_mode_identity(self):
        tape = Tape(training=False)
        x = tape.leaf(np.ones((4, 4)))
        assert A.dropout(tape, x, 0.9) is x

    def test_rate_one_rejected(self):
        tape = Tape(training=True, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            A.dropout(tape, tape.leaf(np.ones(3)), 1.0)

    def test_inverted_scaling_mean(self):
        # over many masks the expected output of dropout(ones, .5) is 1
        rng = np.random.default_rng(7)
        total = np.zeros(8)
        reps = 100_000
        for _ in range(reps // 1000):
            tape = Tape(training=True, rng=rng)
            x = tape.leaf(np.ones((1000, 8)))
            total += A.dropout(tape, x, 0.5).data.sum(axis=0)
        mean = total / reps
        assert np.all(np.abs(mean - 1.0) < 0.01)

    def test_seeded_masks_reproducible(self):
        outs = []
        for _ in range(2):
            tape = Tape(training=True, rng=np.random.default_rng(99))
            outs.append(A.dropout(tape, tape.leaf(np.ones((5, 5))), 0.4).data)
        assert np.array_equal(outs[0], outs[1])

    def test_gradient_routes_through_mask(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 3))
        tape = Tape(training=True, rng=np.random.default_rng(5), dtype=np.float64)
        xv = tape.leaf(x)
        out = A.dropout(tape, xv, 0.5)
        mask = out.data / np.where(x != 0, x, 1.0)  # recover mask*scale
        loss = A.reduce_sum(tape, out)
        tape.backward(loss)
        assert np.allclose(xv.grad, mask)


class TestSoftmax:
    def test_uniform(self):
        tape = Tape()
        out = A.softmax(tape, tape.leaf(np.array([0.0, 0.0])), axis=-1)
        assert np.allclose(out.data, [0.5, 0.5])

    def test_large_values_stable(self):
        tape = Tape()
        out = A.softmax(tape, tape.leaf(np.array([1000.0, 0.0])), axis=-1)
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, [1.0, 0.0])

    def test_rows_sum_to_one_nonnegative(self):
        rng = np.random.default_rng(0)
        tape = Tape()
        out = A.softmax(tape, tape.leaf(rng.standard_normal((6, 9)) * 10), axis=-1)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(out.data >= 0.0)

    def test_gradient(self):
        check_gradients(
            lambda t, ls: weighted_sum(t, A.softmax(t, ls[0], axis=-1)),
            [(2, 5)],
            tol=1e-6,
        )


class TestPoolingAndShape:
    def test_mean_pool_identical_rows(self):
        tape = Tape()
        h = np.tile(np.array([[1.0, 2.0]]), (3, 1))[None]
        out = A.mean_pool(tape, tape.leaf(h), axis=1)
        assert np.allclose(out.data, [[1.0, 2.0]])

    def test_mean_and_max_hand_case(self):
        tape = Tape()
        h = tape.leaf(np.array([[[0.0, 2.0], [2.0, 0.0]]]))
        assert np.allclose(A.mean_pool(tape, h, axis=1).data, [[1.0, 1.0]])
        assert np.allclose(A.max_pool(tape, h, axis=1).data, [[2.0, 2.0]])

    def test_mean_gradient_spreads(self):
        tape = Tape(dtype=np.float64)
        x = tape.leaf(np.random.default_rng(0).standard_normal((2, 4, 3)))
        loss = A.reduce_sum(tape, A.mean_pool(tape, x, axis=1))
        tape.backward(loss)
        assert np.allclose(x.grad, 0.25)

    def test_pool_gradients(self):
        check_gradients(
            lambda t, ls: weighted_sum(t, A.mean_pool(t, ls[0], axis=1)),
            [(2, 4, 3)],
        )
        check_gradients(
            lambda t, ls: weighted_sum(t, A.max_pool(t, ls[0], axis=1)),
            [(2, 4, 3)],
        )

    def test_residual_and_relu(self):
        tape = Tape()
        x = tape.leaf(np.array([-1.0, 2.0]))
        zero = tape.leaf(np.zeros(2))
        assert np.allclose(A.add(tape, x, zero).data, x.data)
        assert np.allclose(A.relu(tape, x).data, [0.0, 2.0])

    def test_flatten_unflatten_identity(self):
        tape = Tape()
        x = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
        xv = tape.leaf(x)
        back = A.reshape(tape, A.flatten_tokens(tape, xv), (2, 3, 4))
        assert np.array_equal(back.data, x)

    def test_concat_gradient(self):
        check_gradients(
            lambda t, ls: weighted_sum(t, A.concat(t, ls, axis=-1)),
            [(3, 2), (3, 4)],
        )

    def test_logsumexp_gradient(self):
        check_gradients(
            lambda t, ls: A.reduce_sum(t, A.logsumexp(t, ls[0], axis=1)),
            [(3, 6)],
        )


def loop_attention(h, wq, wk, wv):
    """Nested-loop single-head attention oracle, no vectorization."""
    b, t, d = h.shape
    dh = wq.shape[1]
    out = np.zeros((b, t, dh))
    for n in range(b):
        q = np.array([h[n, i] @ wq for i in range(t)])
        k = np.array([h[n, i] @ wk for i in range(t)])
        v = np.array([h[n, i] @ wv for i in range(t)])
        for i in range(t):
            scores = np.array([q[i] @ k[j] / np.sqrt(dh) for j in range(t)])
            scores -= scores.max()
            weights = np.exp(scores) / np.exp(scores).sum()
            out[n, i] = sum(weights[j] * v[j] for j in range(t))
    return out


class TestMultiHeadAttention:
    def _params(self, rng, d, heads):
        dh = d // heads
        mk = lambda: rng.standard_normal((d, dh))
        return (
            [mk() for _ in range(heads)],
            [mk() for _ in range(heads)],
            [mk() for _ in range(heads)],
        )

    def test_single_token_outputs_value(self):
        rng = np.random.default_rng(0)
        wq, wk, wv = self._params(rng, 4, 1)
        h = rng.standard_normal((2, 1, 4))
        tape = Tape(dtype=np.float64)
        hv = tape.leaf(h)
        out = A.multi_head_attention(
            tape, hv, [tape.leaf(wq[0])], [tape.leaf(wk[0])], [tape.leaf(wv[0])]
        )
        assert np.allclose(out.data, h @ wv[0])

    def test_identical_tokens_uniform_weights(self):
        rng = np.random.default_rng(1)
        wq, wk, wv = self._params(rng, 4, 1)
        h = np.tile(rng.standard_normal((1, 1, 4)), (2, 5, 1))
        tape = Tape()
        _, weights = A.multi_head_attention(
            tape,
            tape.leaf(h),
            [tape.leaf(wq[0])],
            [tape.leaf(wk[0])],
            [tape.leaf(wv[0])],
            return_weights=True,
        )
        assert np.allclose(weights[0], 1.0 / 5.0, atol=1e-6)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        wq, wk, wv = self._params(rng, 4, 1)
        h = rng.standard_normal((2, 3, 4))
        tape = Tape(dtype=np.float64)
        out = A.multi_head_attention(
            tape, tape.leaf(h), [tape.leaf(wq[0])], [tape.leaf(wk[0])], [tape.leaf(wv[0])]
        )
        assert np.max(np.abs(out.data - loop_attention(h, wq[0], wk[0], wv[0]))) < 1e-6

    def test_gradient(self):
        def build(t, ls):
            h, wq, wk, wv = ls
            out = A.multi_head_attention(t, h, [wq], [wk], [wv])
            return weighted_sum(t, out)

        check_gradients(build, [(2, 3, 4), (4, 4), (4, 4), (4, 4)], tol=1e-5)

    def test_heads_equal_concatenated_single_runs(self):
        rng = np.random.default_rng(3)
        d, heads = 6, 2
        wq, wk, wv = self._params(rng, d, heads)
        h = rng.standard_normal((2, 4, d))

        tape = Tape(dtype=np.float64)
        multi = A.multi_head_attention(
            tape,
            tape.leaf(h),
            [tape.leaf(w) for w in wq],
            [tape.leaf(w) for w in wk],
            [tape.leaf(w) for w in wv],
        )
        singles = []
        for i in range(heads):
            t2 = Tape(dtype=np.float64)
            one = A.multi_head_attention(
                t2, t2.leaf(h), [t2.leaf(wq[i])], [t2.leaf(wk[i])], [t2.leaf(wv[i])]
            )
            singles.append(one.data)
        assert np.allclose(multi.data, np.concatenate(singles, axis=-1), atol=1e-12)

    def test_divisibility_enforced(self):
        tape = Tape()
        h = tape.leaf(np.zeros((1, 2, 5)))
        w = [tape.leaf(np.zeros((5, 2)))] * 2
        with pytest.raises(ValueError, match="divisible"):
            A.multi_head_attention(tape, h, w, w, w)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        tape = Tape(dtype=np.float64)
        x = tape.leaf(np.random.default_rng(0).standard_normal((3, 4)))
        tape.backward(A.reduce_sum(tape, x))
        assert np.allclose(x.grad, 1.0)

    def test_half_sum_squares_gradient_is_x(self):
        tape = Tape(dtype=np.float64)
        data = np.random.default_rng(1).standard_normal((3, 4))
        x = tape.leaf(data)
        loss = A.mul_scalar(tape, A.reduce_sum(tape, A.mul(tape, x, x)), 0.5)
        tape.backward(loss)
        assert np.allclose(x.grad, data)

    def test_double_backward_rejected(self):
        tape = Tape(dtype=np.float64)
        x = tape.leaf(np.ones(3))
        loss = A.reduce_sum(tape, x)
        tape.backward(loss)
        with pytest.raises(RuntimeError, match="twice"):
            tape.backward(loss)

    def test_reset_allows_reuse(self):
        tape = Tape(dtype=np.float64)
        loss = A.reduce_sum(tape, tape.leaf(np.ones(3)))
        tape.backward(loss)
        tape.reset()
        loss2 = A.reduce_sum(tape, tape.leaf(np.ones(3)))
        tape.backward(loss2)

    def test_unreachable_parameter_grad_stays_zero(self):
        tape = Tape(dtype=np.float64)
        used = Parameter("used", np.ones(3))
        unused = Parameter("unused", np.ones(3))
        loss = A.reduce_sum(tape, tape.param(used))
        tape.param(unused)
        tape.backward(loss)
        assert np.allclose(used.grad, 1.0)
        assert np.allclose(unused.grad, 0.0)

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(tape.leaf(np.ones(2)))

    def test_param_reuse_accumulates(self):
        tape = Tape(dtype=np.float64)
        p = Parameter("w", np.array([2.0]))
        v1, v2 = tape.param(p), tape.param(p)
        assert v1 is v2
        loss = A.reduce_sum(tape, A.mul(tape, v1, v2))  # w^2
        tape.backward(loss)
        assert np.allclose(p.grad, 4.0)


class TestElementwiseGradients:
    def test_add_sub_mul_div(self):
        check_gradients(
            lambda t, ls: weighted_sum(t, A.add(t, ls[0], ls[1])), [(3, 4), (3, 4)]
        )
        check_gradients(
            lambda t, ls: weighted_sum(t, A.sub(t, ls[0], ls[1])), [(3, 4), (3, 4)]
        )
        check_gradients(
            lambda t, ls: weighted_sum(t, A.mul(t, ls[0], ls[1])), [(3, 4), (3, 4)]
        )
        check_gradients(
            lambda t, ls: weighted_sum(
                t, A.div(t, ls[0], A.add_scalar(t, A.mul(t, ls[1], ls[1]), 1.0))
            ),
            [(3, 4), (3, 4)],
        )

    def test_broadcast_add_unbroadcasts(self):
        check_gradients(
            lambda t, ls: weighted_sum(t, A.add(t, ls[0], ls[1])),
            [(4, 3, 2), (1, 3, 2)],
        )

    def test_relu_gradient(self):
        check_gradients(
            lambda t, ls: weighted_sum(t, A.relu(t, ls[0])), [(4, 4)], seed=5
        )

    def test_sqrt_gradient(self):
        check_gradients(
            lambda t, ls: weighted_sum(
                t, A.sqrt(t, A.add_scalar(t, A.mul(t, ls[0], ls[0]), 0.5))
            ),
            [(3, 3)],
        )

    def test_transpose_matmul_gradient(self):
        check_gradients(
            lambda t, ls: weighted_sum(
                t, A.matmul(t, A.transpose2d(t, ls[0]), ls[1])
            ),
            [(3, 4), (3, 2)],
        )

    def test_batched_matmul_gradient(self):
        check_gradients(
            lambda t, ls: weighted_sum(t, A.matmul(t, ls[0], A.swap_last2(t, ls[1]))),
            [(2, 3, 4), (2, 5, 4)],
        )


class TestDeterminism:
    def test_forward_identical_given_seed(self):
        def run():
            tape = Tape(training=True, rng=np.random.default_rng(11))
            x = tape.leaf(np.linspace(0, 1, 12).reshape(3, 4))
            out = A.dropout(tape, A.softmax(tape, x, axis=-1), 0.3)
            return out.data.copy()

        assert np.array_equal(run(), run())
