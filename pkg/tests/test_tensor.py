import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from aofl import tensor as T
from aofl.tensor import (ContractError, DegenerateVectorError, DomainError, ShapeError, Tensor,
                         grad_check, no_grad)


def rand(shape, seed=0, requires_grad=True):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=requires_grad)


class TestConstruction:
    def test_scalar_and_vector_promote_to_2d(self):
        assert Tensor(3.0).shape == (1, 1)
        assert Tensor([1.0, 2.0, 3.0]).shape == (1, 3)

    def test_item_requires_scalar(self):
        with pytest.raises(ContractError):
            Tensor(np.ones((2, 2))).item()

    def test_data_is_float64_copy(self):
        src = np.ones((2, 2), dtype=np.float32)
        t = Tensor(src)
        src[0, 0] = 5
        assert t.data.dtype == np.float64 and t.data[0, 0] == 1.0


class TestShapes:
    def test_matmul_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_no_implicit_broadcast(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))))

    def test_scalar_operand_allowed(self):
        out = Tensor(np.ones((2, 3))) * 2.0 + 1.0
        np.testing.assert_array_equal(out.data, np.full((2, 3), 3.0))

    def test_expand(self):
        col = Tensor([[1.0], [2.0]])
        np.testing.assert_array_equal(T.expand_cols(col, 3).data, [[1, 1, 1], [2, 2, 2]])
        row = Tensor([[1.0, 2.0]])
        np.testing.assert_array_equal(T.expand_rows(row, 2).data, [[1, 2], [1, 2]])

    def test_concat_axes(self):
        a, b = Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 2)))
        assert T.concat(a, b, axis=1).shape == (2, 3)
        assert T.concat(a.T, b.T, axis=0).shape == (3, 2)
        with pytest.raises(ShapeError):
            T.concat(a, b, axis=0)

    def test_sum_of_empty_is_zero(self):
        empty = Tensor(np.zeros((0, 3)))
        np.testing.assert_array_equal(T.reduce_sum(empty, axis=0).data, np.zeros((1, 3)))
        assert T.reduce_sum(empty).item() == 0.0

    def test_mean_of_empty_raises(self):
        with pytest.raises(ShapeError):
            T.reduce_mean(Tensor(np.zeros((0, 3))))

    def test_reduce_axis_aliases(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(T.reduce(kind="sum", a=x, axis="row").data, [[3.0], [12.0]])
        np.testing.assert_array_equal(T.reduce("sum", x, axis="col").data, [[3.0, 5.0, 7.0]])
        assert T.reduce("mean", x, axis="all").item() == 2.5


class TestDomains:
    def test_log_nonpositive(self):
        with pytest.raises(DomainError):
            T.log(Tensor([[1.0, 0.0]]))

    def test_cosine_of_zero_vector(self):
        with pytest.raises(DegenerateVectorError):
            T.cosine(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]]))

    def test_row_cosine_names_row(self):
        a = Tensor([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(DegenerateVectorError, match="1"):
            T.row_cosine(a, Tensor(np.ones((2, 2))))

    def test_sqrt_negative(self):
        with pytest.raises(DomainError):
            T.sqrt(Tensor([[-1.0]]))


class TestBackward:
    def test_nonscalar_backward_is_contract_error(self):
        with pytest.raises(ContractError):
            rand((2, 2)).backward()

    def test_simple_product_rule(self):
        x = Tensor([[3.0]], requires_grad=True)
        y = x * x * x
        y.backward()
        assert x.grad[0, 0] == pytest.approx(27.0)

    def test_shared_subexpression_accumulates(self):
        x = Tensor([[2.0]], requires_grad=True)
        y = x + x
        z = y * y  # 4x^2
        z.backward()
        assert x.grad[0, 0] == pytest.approx(16.0)

    def test_no_grad_builds_no_graph(self):
        x = rand((2, 2))
        with no_grad():
            y = T.reduce_sum(x * x)
        assert T.is_grad_enabled()
        assert y._parents == () and not y.requires_grad

    def test_topological_order_parents_first(self):
        a = rand((1, 1))
        b = T.exp(a)
        c = b * a
        order = T.topological_order(c)
        pos = {id(t): i for i, t in enumerate(order)}
        assert pos[id(a)] < pos[id(b)] < pos[id(c)]
        graph = T.Graph.of(c)
        assert graph.nodes[-1].op == "mul"

    def test_repeated_backward_over_shared_graph(self):
        x = Tensor([[2.0]], requires_grad=True)
        shared = T.exp(x)
        a, b = shared * 3.0, T.square(shared)
        a.backward()
        np.testing.assert_allclose(x.grad, 3 * np.exp(2.0))
        x.grad = None
        b.backward()
        np.testing.assert_allclose(x.grad, 2 * np.exp(4.0))
        assert shared.grad is None

    def test_deep_chain_does_not_recurse(self):
        x = Tensor([[1.0]], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        y.backward()
        assert x.grad[0, 0] == 1.0

    def test_sqrt_subgradient_at_zero(self):
        x = Tensor([[0.0]], requires_grad=True)
        T.sqrt(x).backward()
        assert x.grad[0, 0] == 0.0


OPS = {
    "matmul": lambda x, y: T.reduce_sum(T.tanh(x @ y.T)),
    "div": lambda x, y: T.reduce_sum(x / (T.square(y) + 1.0)),
    "exp_log": lambda x, y: T.reduce_sum(T.log(T.exp(x) + T.exp(y))),
    "sqrt": lambda x, y: T.reduce_sum(T.sqrt(T.square(x) + 0.5)),
    "relu": lambda x, y: T.reduce_sum(T.relu(x) * y),
    "mean_axes": lambda x, y: T.reduce_sum(T.square(T.reduce_mean(x, 0))) + T.reduce_sum(T.reduce_mean(y, 1)),
    "row_cosine": lambda x, y: T.reduce_sum(T.row_cosine(x, y)),
    "normalize_rows": lambda x, y: T.reduce_sum(T.normalize_rows(x) * y),
    "softmax": lambda x, y: T.reduce_sum(T.softmax_rows(x) * y),
    "concat_slice": lambda x, y: T.reduce_sum(T.square(T.slice_cols(T.concat(x, y), 1, 5))),
    "take_row": lambda x, y: T.reduce_sum(T.take_row(x, 1) * T.take_row(y, 2)),
    "expand": lambda x, y: T.reduce_sum(T.expand_cols(T.reduce_sum(x, 1), 3) * y),
    "row_norm": lambda x, y: T.reduce_sum(T.row_norm(x - y)),
    "neg_sub": lambda x, y: T.reduce_sum(T.square(-x - y)) - 3.0,
}


class TestGradientOracle:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_finite_differences(self, name):
        x, y = rand((3, 3), 1), rand((3, 3), 2)
        err = grad_check(lambda: OPS[name](x, y), [x, y])
        assert err < 1e-7

    def test_sum_of_squares_is_exact(self):
        x = rand((4, 5), 7)
        assert grad_check(lambda: T.reduce_sum(T.square(x)), x) < 1e-8

    def test_grad_check_detects_wrong_gradient(self):
        x = rand((2, 2))

        def broken():
            out = T.reduce_sum(T.square(x))
            out._backward = lambda g: (None,)  # drop the gradient
            return out

        assert grad_check(broken, x) > 0.1

    def test_dot_and_cosine_vectors(self):
        u, v = rand((1, 4), 3), rand((1, 4), 4)
        assert grad_check(lambda: T.dot(u, v) * T.cosine(u, v), [u, v]) < 1e-7
        with pytest.raises(ShapeError):
            T.dot(rand((2, 4)), rand((2, 4)))


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
           arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
    def test_row_cosine_bounds_and_symmetry(self, a, b):
        if (np.linalg.norm(a, axis=1) < 1e-3).any() or (np.linalg.norm(b, axis=1) < 1e-3).any():
            return
        ab = T.row_cosine(Tensor(a), Tensor(b)).data
        ba = T.row_cosine(Tensor(b), Tensor(a)).data
        assert np.all(np.abs(ab) <= 1.0 + 1e-12)
        np.testing.assert_allclose(ab, ba, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (2, 5), elements=st.floats(-50, 50)))
    def test_softmax_rows_sum_to_one(self, a):
        s = T.softmax_rows(Tensor(a)).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(s >= 0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 10), arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
    def test_gradient_is_linear_in_loss_scale(self, c, a):
        x = Tensor(a, requires_grad=True)
        T.reduce_sum(T.tanh(x)).backward()
        g1 = x.grad.copy()
        x.grad = None
        T.scale(T.reduce_sum(T.tanh(x)), c).backward()
        np.testing.assert_allclose(x.grad, c * g1, rtol=1e-12)
