import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from multiview_rssi import tensor as T
from multiview_rssi.tensor import Tensor

from conftest import grad_rel_error

SEEDS = range(20)


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[3, 4], [5, 6]])

    def test_row_times_column(self):
        assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        a, b = t64(rng, 5, 7), t64(rng, 7, 3)
        w = rng.normal(size=(5, 3))
        err = grad_rel_error(lambda: T.sum_all(T.mul(T.matmul(a, b), w)), {"a": a, "b": b})
        assert err <= 1e-5

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_batched_shared_weight(self, seed):
        rng = np.random.default_rng(seed)
        a, b = t64(rng, 2, 4, 3), t64(rng, 3, 5)
        w = rng.normal(size=(2, 4, 5))
        err = grad_rel_error(lambda: T.sum_all(T.mul(T.matmul(a, b), w)), {"a": a, "b": b})
        assert err <= 1e-5


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_already_standardized(self):
        out = T.layer_norm(Tensor([[1.0, -1.0]], dtype=np.float64), Tensor(np.ones(2), dtype=np.float64),
                           Tensor(np.zeros(2), dtype=np.float64), eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-9)

    def test_rows_standardized(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, (6, 10)), dtype=np.float64)
        g = Tensor(rng.uniform(0.5, 2.0, 10), dtype=np.float64)
        b = Tensor(rng.normal(size=10), dtype=np.float64)
        z = (T.layer_norm(x, g, b).data - b.data) / g.data
        np.testing.assert_allclose(z.mean(axis=1), 0.0, atol=1e-10)
        np.testing.assert_allclose(z.var(axis=1), 1.0, atol=1e-5)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x, g, b = t64(rng, 4, 8), t64(rng, 8), t64(rng, 8)
        w = rng.normal(size=(4, 8))
        err = grad_rel_error(lambda: T.sum_all(T.mul(T.layer_norm(x, g, b), w)), {"x": x, "g": g, "b": b})
        assert err <= 1e-5

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (3, 6), elements=st.floats(-50, 50)),
           hnp.arrays(np.float64, (3, 1), elements=st.floats(-100, 100)))
    def test_shift_invariance(self, x, c):
        g, b = Tensor(np.ones(6), dtype=np.float64), Tensor(np.zeros(6), dtype=np.float64)
        a = T.layer_norm(Tensor(x), g, b).data
        s = T.layer_norm(Tensor(x + c), g, b).data
        np.testing.assert_allclose(a, s, atol=1e-6)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=1e-6)

    def test_large_logits_stable(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = t64(rng, 3, 5)
        w = rng.normal(size=(3, 5))
        assert grad_rel_error(lambda: T.sum_all(T.mul(T.softmax_rows(x), w)), {"x": x}) <= 1e-5

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (4, 7), elements=st.floats(-300, 300)))
    def test_rows_sum_to_one(self, x):
        s = T.softmax_rows(Tensor(x)).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


class TestGelu:
    @pytest.mark.parametrize("form", ["tanh", "none"])
    def test_zero_and_asymptote(self, form):
        assert T.gelu(Tensor([0.0]), form).data[0] == 0.0
        assert abs(T.gelu(Tensor([10.0], dtype=np.float64), form).data[0] - 10.0) < 1e-4

    def test_tanh_close_to_exact(self, rng):
        x = Tensor(rng.normal(size=200), dtype=np.float64)
        np.testing.assert_allclose(T.gelu(x, "tanh").data, T.gelu(x, "none").data, atol=1e-3)

    @pytest.mark.parametrize("form", ["tanh", "none"])
    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed, form):
        rng = np.random.default_rng(seed)
        x = t64(rng, 9, scale=2.0)
        w = rng.normal(size=9)
        assert grad_rel_error(lambda: T.sum_all(T.mul(T.gelu(x, form), w)), {"x": x}) <= 1e-5


class TestDropout:
    def test_eval_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        assert T.dropout(x, 0.5, training=False) is x

    def test_p_zero(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        np.testing.assert_array_equal(T.dropout(x, 0.0, True, rng).data, x.data)

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor([1.0]), 1.0, True, np.random.default_rng(0))

    def test_expectation(self):
        out = T.dropout(Tensor(np.ones(100_000)), 0.5, True, np.random.default_rng(7)).data
        assert abs(out.mean() - 1.0) < 0.01
        assert set(np.unique(out)) <= {0.0, 2.0}

    def test_deterministic_given_rng(self, rng):
        x = Tensor(rng.normal(size=(8, 8)))
        a = T.dropout(x, 0.3, True, np.random.default_rng(3)).data
        b = T.dropout(x, 0.3, True, np.random.default_rng(3)).data
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = t64(rng, 6, 5)
        w = rng.normal(size=(6, 5))
        # same mask for every evaluation
        fn = lambda: T.sum_all(T.mul(T.dropout(x, 0.3, True, np.random.default_rng(seed)), w))  # noqa: E731
        assert grad_rel_error(fn, {"x": x}) <= 1e-5


class TestConcatTokens:
    def test_fusion_input_shape(self):
        z = T.concat_tokens([Tensor(np.zeros((301, 96))), Tensor(np.zeros((301, 96)))])
        assert z.shape == (602, 96)

    def test_single_part(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        np.testing.assert_array_equal(T.concat_tokens([x]).data, x.data)

    def test_width_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.concat_tokens([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))])

    def test_row_bookkeeping_and_roundtrip(self, rng):
        parts = [Tensor(rng.normal(size=(n, 5))) for n in (3, 1, 4)]
        z = T.concat_tokens(parts).data
        offset = 0
        for p in parts:
            for i in range(p.shape[0]):
                np.testing.assert_array_equal(z[offset + i], p.data[i])
            offset += p.shape[0]
        np.testing.assert_array_equal(z[3:4], parts[1].data)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        a, b = t64(rng, 2, 3), t64(rng, 4, 3)
        w = rng.normal(size=(6, 3))
        assert grad_rel_error(lambda: T.sum_all(T.mul(T.concat_tokens([a, b]), w)), {"a": a, "b": b}) <= 1e-5


class TestShapeOps:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_reshape_permute_take_broadcast(self, seed):
        rng = np.random.default_rng(seed)
        x = t64(rng, 2, 3, 4)
        v = t64(rng, 4)
        w = rng.normal(size=(3, 2, 4))

        def fn():
            y = T.permute(T.reshape(x, (2, 3, 4)), (1, 0, 2))
            y = T.add(y, T.broadcast_to(T.reshape(v, (1, 4)), (3, 2, 4)))
            return T.add(T.sum_all(T.mul(y, w)), T.sum_all(T.take_rows(x, [0, 2, 2], axis=1)))

        assert grad_rel_error(fn, {"x": x, "v": v}) <= 1e-5

    def test_add_rejects_mismatched_trailing(self):
        with pytest.raises(T.DimensionError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4, 2)))

    def test_half_mean_square(self, rng):
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True, dtype=np.float64)
        T.backward(T.mul(T.mean_all(T.mul(x, x)), 0.5))
        np.testing.assert_allclose(x.grad, x.data / x.data.size, rtol=1e-12)

    def test_accumulates_across_calls(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True, dtype=np.float64)
        T.backward(T.sum_all(x))
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, 2 * np.ones(4))

    def test_fan_out_accumulates(self):
        x = Tensor([2.0], requires_grad=True, dtype=np.float64)
        # x used by three ops: d/dx (x*x + x) = 2x + 1
        T.backward(T.sum_all(T.add(T.mul(x, x), x)))
        np.testing.assert_allclose(x.grad, [5.0])

    def test_tape_visits_each_node_once(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        y = T.mul(x, x)
        z = T.add(y, y)
        tape = T.build_tape(T.sum_all(z))
        assert len(tape) == len({id(n) for n in tape}) == 4

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.backward(T.mul(x, 2.0))

    def test_nonfinite_is_an_error(self):
        with pytest.raises(T.NonFiniteError), np.errstate(over="ignore"):
            T.mul(Tensor([np.float32(3e38)]), Tensor([np.float32(10.0)]))

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert not y.requires_grad

    def test_determinism(self, rng):
        a = rng.normal(size=(16, 8)).astype(np.float32)
        b = rng.normal(size=(8, 8)).astype(np.float32)
        outs = [T.softmax_rows(T.matmul(Tensor(a), Tensor(b))).data for _ in range(2)]
        assert outs[0].tobytes() == outs[1].tobytes()

    def test_float32_default(self):
        assert Tensor([1, 2]).dtype == np.float32
        assert Tensor([1.5]).dtype == np.float32
        assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).dtype == np.float32
        assert Tensor(np.ones(2)).dtype == np.float64
