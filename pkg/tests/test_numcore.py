import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rasa import numcore as nc
from oracles import central_difference, loop_attention, naive_matmul, rel_error


def _grad_check(fn, arrays, tol=1e-4):
    """Compare tape gradients of scalar fn(*tensors) with central differences."""
    tensors = [nc.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with nc.Tape() as tape:
        out = fn(*tensors)
    nc.backward(tape, out)
    numeric = central_difference(lambda *xs: fn(*[nc.Tensor(x) for x in xs]).item(),
                                 [a.copy() for a in arrays])
    assert rel_error(np.concatenate([t.grad.ravel() for t in tensors]),
                     np.concatenate([n.ravel() for n in numeric])) < tol
    for t, n in zip(tensors, numeric):
        assert np.allclose(t.grad, n, rtol=1e-4, atol=1e-8)


def _attn_params(rng, d):
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"W{name}"] = rng.normal(size=(d, d)) / math.sqrt(d)
        p[f"b{name}"] = rng.normal(size=d) * 0.1
    return p


class TestMatmul:
    def test_identity(self, rng):
        a = rng.normal(size=(2, 2))
        out = nc.matmul(nc.Tensor(np.eye(2)), nc.Tensor(a))
        assert np.array_equal(out.data, a)

    def test_zero_annihilator(self):
        out = nc.matmul(nc.Tensor([[1.0, 2.0], [3.0, 4.0]]), nc.Tensor([[0.0], [0.0]]))
        assert out.data.tolist() == [[0.0], [0.0]]

    def test_matches_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(nc.matmul(nc.Tensor(a), nc.Tensor(b)).data,
                                   naive_matmul(a, b), atol=1e-12)

    def test_shape_error_names_both(self):
        with pytest.raises(nc.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            nc.matmul(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((2, 2))))


class TestSoftmax:
    def test_uniform_row(self):
        out = nc.softmax_rows(nc.Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)

    def test_analytic_row(self):
        out = nc.softmax_rows(nc.Tensor([[0.0, math.log(2.0)]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 2 / 3]], atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-50, 50))
    def test_rows_sum_to_one_and_shift_invariant(self, seed, c):
        x = np.random.default_rng(seed).normal(size=(4, 6)) * 5
        p = nc.softmax_rows(nc.Tensor(x)).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(nc.softmax_rows(nc.Tensor(x + c)).data, p, atol=1e-9)

    def test_large_inputs_stay_finite(self):
        p = nc.softmax_rows(nc.Tensor([[1e4, 0.0, -1e4]])).data
        assert np.all(np.isfinite(p))


class TestAttention:
    def test_single_key_returns_projected_value(self, rng):
        d = 8
        p = _attn_params(rng, d)
        v = rng.normal(size=(1, d))
        expected = (v @ p["Wv"] + p["bv"]) @ p["Wo"] + p["bo"]
        tp = {k: nc.Tensor(a) for k, a in p.items()}
        for _ in range(3):
            q = nc.Tensor(rng.normal(size=(2, d)) * 10)
            out = nc.multi_head_attention(q, nc.Tensor(rng.normal(size=(1, d))), nc.Tensor(v),
                                          tp, n_heads=2)
            np.testing.assert_allclose(out.data, np.repeat(expected, 2, axis=0), atol=1e-12)

    def test_joint_key_value_permutation(self, rng):
        d = 8
        tp = {k: nc.Tensor(a) for k, a in _attn_params(rng, d).items()}
        q, k, v = rng.normal(size=(3, d)), rng.normal(size=(5, d)), rng.normal(size=(5, d))
        base = nc.multi_head_attention(nc.Tensor(q), nc.Tensor(k), nc.Tensor(v), tp, 4).data
        perm = rng.permutation(5)
        out = nc.multi_head_attention(nc.Tensor(q), nc.Tensor(k[perm]), nc.Tensor(v[perm]), tp, 4)
        assert np.max(np.abs(out.data - base)) < 1e-9

    def test_query_permutation_equivariant(self, rng):
        d = 8
        tp = {k: nc.Tensor(a) for k, a in _attn_params(rng, d).items()}
        q, k = rng.normal(size=(4, d)), rng.normal(size=(5, d))
        base = nc.multi_head_attention(nc.Tensor(q), nc.Tensor(k), nc.Tensor(k), tp, 2).data
        perm = rng.permutation(4)
        out = nc.multi_head_attention(nc.Tensor(q[perm]), nc.Tensor(k), nc.Tensor(k), tp, 2).data
        assert np.max(np.abs(out - base[perm])) < 1e-9

    def test_matches_per_head_loop(self, rng):
        d, heads = 6, 3
        p = _attn_params(rng, d)
        q, k, v = rng.normal(size=(2, d)), rng.normal(size=(3, d)), rng.normal(size=(3, d))
        tp = {kk: nc.Tensor(a) for kk, a in p.items()}
        out = nc.multi_head_attention(nc.Tensor(q), nc.Tensor(k), nc.Tensor(v), tp, heads)
        np.testing.assert_allclose(out.data, loop_attention(q, k, v, p, heads), atol=1e-10)

    def test_empty_keys(self, rng):
        tp = {k: nc.Tensor(a) for k, a in _attn_params(rng, 4).items()}
        with pytest.raises(nc.EmptyKeyError):
            nc.multi_head_attention(nc.Tensor(np.ones((1, 4))), nc.Tensor(np.zeros((0, 4))),
                                    nc.Tensor(np.zeros((0, 4))), tp, 2)

    def test_indivisible_heads(self):
        x = nc.Tensor(np.ones((2, 6)))
        with pytest.raises(nc.ShapeError):
            nc.attention(x, x, x, 4)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = nc.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.sum_all(x)
        nc.backward(tape, loss)
        assert np.array_equal(x.grad, np.ones((3, 2)))

    def test_sigmoid_at_zero(self):
        x = nc.Tensor(0.0, requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.sigmoid(x)
        nc.backward(tape, loss)
        assert x.grad == pytest.approx(0.25, abs=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = nc.Tensor(np.ones((2, 2)), requires_grad=True)
        with nc.Tape() as tape:
            y = nc.scale(x, 2.0)
        with pytest.raises(nc.ContractError):
            nc.backward(tape, y)

    def test_unreachable_grad_stays_zero(self, rng):
        used = nc.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        unused = nc.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.sum_all(nc.mul(used, used))
            nc.sum_all(unused)
        nc.backward(tape, loss)
        assert np.array_equal(unused.grad, np.zeros((2, 2)))
        np.testing.assert_allclose(used.grad, 2 * used.data)

    def test_shared_input_accumulates(self):
        x = nc.Tensor([[3.0]], requires_grad=True)
        with nc.Tape() as tape:
            loss = nc.sum_all(nc.add(nc.mul(x, x), x))
        nc.backward(tape, loss)
        assert x.grad[0, 0] == 7.0

    def test_records_replay_in_reverse(self):
        x = nc.Tensor([[1.0, 2.0]], requires_grad=True)
        seen = []
        with nc.Tape() as tape:
            a = nc.scale(x, 2.0)
            b = nc.sigmoid(a)
            loss = nc.sum_all(b)
        for rec in tape.records:
            fn = rec.backward_fn
            rec.backward_fn = (lambda f, name: lambda g: (seen.append(name), f(g))[1])(fn, rec.op)
        nc.backward(tape, loss)
        assert seen == ["sum", "sigmoid", "scale"]

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_nan_aborts_with_op_name(self):
        with pytest.raises(nc.NonFiniteError, match="exp"):
            nc.exp(nc.Tensor([[1e4]]))


PRIMITIVES = {
    "matmul": (lambda a, b: nc.sum_all(nc.mul(nc.matmul(a, b), nc.matmul(a, b))),
               [(3, 4), (4, 2)]),
    "softmax_rows": (lambda x, w: nc.sum_all(nc.mul(nc.softmax_rows(x), w)), [(3, 5), (3, 5)]),
    "layer_norm": (lambda x, g, b, w: nc.sum_all(nc.mul(nc.layer_norm(x, g, b), w)),
                   [(3, 5), (5,), (5,), (3, 5)]),
    "linear": (lambda x, w, b: nc.sum_all(nc.gelu(nc.linear(x, w, b))), [(3, 4), (4, 2), (2,)]),
    "attention": (lambda q, k, v, w: nc.sum_all(nc.mul(nc.attention(q, k, v, 2), w)),
                  [(2, 4), (3, 4), (3, 4), (2, 4)]),
    "mean_rows": (lambda x, w: nc.sum_all(nc.mul(nc.mean_rows(x), w)), [(4, 3), (1, 3)]),
    "sigmoid": (lambda x: nc.sum_all(nc.sigmoid(x)), [(3, 3)]),
    "log_sum_exp": (lambda x: nc.log_sum_exp(x), [(4, 3)]),
    "add": (lambda a, b: nc.sum_all(nc.mul(nc.add(a, b), nc.add(a, b))), [(3, 2), (2,)]),
    "scale": (lambda x: nc.sum_all(nc.mul(nc.scale(x, -1.7), x)), [(2, 3)]),
    "gelu": (lambda x: nc.sum_all(nc.gelu(x)), [(3, 3)]),
    "take_rows": (lambda x, w: nc.sum_all(nc.mul(nc.take_rows(x, [2, 0, 2]), w)),
                  [(3, 2), (3, 2)]),
    "concat_rows": (lambda a, b: nc.sum_all(nc.mul(nc.concat_rows([a, b]),
                                                   nc.concat_rows([b, a]))), [(2, 3), (2, 3)]),
    "transpose_sub": (lambda a, b: nc.sum_all(nc.mul(nc.sub(nc.transpose(a), b), b)),
                      [(2, 3), (3, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradients(name, seed):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    _grad_check(fn, [rng.normal(size=s) for s in shapes])


def test_multi_head_attention_gradient(rng):
    d = 4
    p = _attn_params(rng, d)
    names = sorted(p)
    q, k = rng.normal(size=(2, d)), rng.normal(size=(3, d))

    def fn(q_, k_, *ps):
        params = dict(zip(names, ps))
        return nc.sum_all(nc.gelu(nc.multi_head_attention(q_, k_, k_, params, 2)))

    _grad_check(fn, [q, k] + [p[n] for n in names])


def test_key_bias_gradient_vanishes(rng):
    # a shared shift of every key moves each logit row by a constant
    p = _attn_params(rng, 4)
    q, k = nc.Tensor(rng.normal(size=(2, 4))), nc.Tensor(rng.normal(size=(3, 4)))
    params = {n: nc.Tensor(v, requires_grad=True) for n, v in p.items()}
    with nc.Tape() as tape:
        out = nc.sum_all(nc.gelu(nc.multi_head_attention(q, k, k, params, 2)))
    nc.backward(tape, out)
    assert np.abs(params["bk"].grad).max() < 1e-12
    assert np.abs(params["bq"].grad).max() > 1e-6


class TestAdam:
    def test_zero_gradient_no_move(self, rng):
        p = nc.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        before = p.data.copy()
        state = nc.adam_init([p])
        nc.adam_step([p], [np.zeros((2, 3))], state, lr=1e-3)
        assert np.array_equal(p.data, before)
        assert state.step == 1

    def test_constant_gradient_update_tends_to_lr(self):
        # independent scalar recurrence of the bias-corrected moments
        g, lr, b1, b2, eps = 0.3, 1e-3, 0.9, 0.999, 1e-8
        m = v = 0.0
        for t in range(1, 1001):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            expected = lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(expected - lr) / lr < 0.01
        p = nc.Tensor([[0.0]], requires_grad=True)
        state = nc.adam_init([p])
        prev = 0.0
        for _ in range(1000):
            nc.adam_step([p], [np.array([[g]])], state, lr)
            step, prev = prev - p.data[0, 0], p.data[0, 0]
        assert step == pytest.approx(expected, rel=1e-12)
        assert state.step == 1000

    def test_bitwise_deterministic(self):
        def run():
            r = np.random.default_rng(5)
            p = nc.Tensor(r.normal(size=(3, 3)), requires_grad=True)
            state = nc.adam_init([p])
            for _ in range(20):
                nc.adam_step([p], [r.normal(size=(3, 3))], state, 1e-2)
            return p.data.tobytes()
        assert run() == run()

    def test_shape_mismatch(self):
        p = nc.Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(nc.ShapeError):
            nc.adam_step([p], [np.zeros((2, 3))], nc.adam_init([p]), 1e-3)
