import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsvit import tensor as T
from dsvit.errors import NonFiniteError
from dsvit.tensor import Tensor, grad_check


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_direct_arithmetic(self):
        a = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(T.matmul(a, b).data, [[5.0, 6.0], [0.0, 0.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_of_sum_is_ones_times_bt(self):
        rng = np.random.default_rng(7)
        b_arr = rng.normal(size=(3, 4))
        b = Tensor(b_arr, dtype=np.float64)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True, dtype=np.float64)
        T.matmul(a, b).sum().backward()
        expected = np.ones((2, 4)) @ b_arr.T
        assert np.allclose(a.grad, expected, rtol=1e-12)
        err = grad_check(lambda x: T.matmul(x, b).sum(), a)
        assert err < 1e-4

    def test_batched_grads(self):
        rng = np.random.default_rng(8)
        a = rand(rng, 2, 3, 4)
        w = rand(rng, 4, 5)
        assert grad_check(lambda x: T.matmul(x, w).sum(), a) < 1e-4
        assert grad_check(lambda x: (T.matmul(a, x) * T.matmul(a, x)).sum(), w) < 1e-4


class TestSoftmax:
    def test_symmetry(self):
        y = T.softmax(Tensor([0.0, 0.0]), axis=-1)
        assert np.allclose(y.data, [0.5, 0.5])

    def test_singleton(self):
        assert np.allclose(T.softmax(Tensor([3.7]), axis=-1).data, [1.0])

    def test_no_overflow_matches_float64_reference(self):
        x = np.array([1000.0, 0.0])
        y = T.softmax(Tensor(x), axis=-1).data
        e = np.exp(x.astype(np.float64) - x.max())
        ref = e / e.sum()
        assert np.isfinite(y).all()
        assert np.allclose(y, ref, atol=1e-7)

    def test_empty_axis_rejected(self):
        with pytest.raises(ValueError):
            T.softmax(Tensor(np.zeros((2, 0))), axis=-1)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-300, 300), min_size=1, max_size=8))
    def test_sums_to_one_and_nonnegative(self, values):
        y = T.softmax(Tensor(values), axis=-1).data
        assert (y >= 0).all()
        assert abs(y.sum() - 1.0) < 1e-6

    def test_grad(self):
        rng = np.random.default_rng(9)
        x = rand(rng, 3, 5)
        w = Tensor(rng.normal(size=(3, 5)), dtype=np.float64)
        assert grad_check(lambda t: (T.softmax(t, axis=-1) * w).sum(), x) < 1e-4


class TestElementwise:
    def test_sub_self_is_zero(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        assert np.array_equal(T.sub(x, x).data, np.zeros((2, 3), dtype=np.float32))

    def test_lookup_identity(self):
        e = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3))
        out = T.embedding_lookup(e, np.array([2]))
        assert np.array_equal(out.data, e.data[2:3])

    def test_lookup_rejects_out_of_range(self):
        e = Tensor(np.zeros((4, 3)))
        with pytest.raises(ValueError):
            T.embedding_lookup(e, np.array([4]))
        with pytest.raises(ValueError):
            T.embedding_lookup(e, np.array([-1]))

    def test_lookup_backward_scatters(self):
        e = Tensor(np.zeros((4, 3)), requires_grad=True)
        out = T.embedding_lookup(e, np.array([1, 1, 3]))
        out.sum().backward()
        expected = np.zeros((4, 3))
        expected[1] = 2.0
        expected[3] = 1.0
        assert np.array_equal(e.grad, expected)

    def test_cross_entropy_closed_form(self):
        loss = T.cross_entropy(Tensor([0.0, 0.0]), np.array([0]))
        assert abs(loss.item() - np.log(2.0)) < 1e-6

    def test_add_broadcast_bias(self):
        rng = np.random.default_rng(3)
        x = rand(rng, 2, 4)
        b = rand(rng, 4)
        out = T.add(x, b)
        out.sum().backward()
        assert np.array_equal(b.grad, np.full(4, 2.0))

    def test_incompatible_shapes_rejected(self):
        with pytest.raises(ValueError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


@pytest.mark.parametrize("seed,make", [
    (20, lambda x, c: T.add(x, c).sum()),
    (21, lambda x, c: T.sub(c, x).sum()),
    (22, lambda x, c: T.mul(x, c).sum()),
    (23, lambda x, c: T.mul(x, x).sum()),
])
def test_arithmetic_grads(seed, make):
    rng = np.random.default_rng(seed)
    c = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    x = rand(rng, 3, 4)
    assert grad_check(lambda t: make(t, c), x) < 1e-4


@pytest.mark.parametrize("name,fn,shape,seed", [
    ("relu", lambda x: T.relu(x).sum(), (4, 5), 30),
    ("mean_axis", lambda x: (T.mean(x, axis=1) * T.mean(x, axis=1)).sum(), (4, 5), 31),
    ("mean_all", lambda x: T.mean(x), (4, 5), 32),
    ("sum_keepdims", lambda x: T.mul(T.tsum(x, axis=0, keepdims=True), 2.0).sum(), (4, 5), 33),
    ("reshape", lambda x: T.mul(T.reshape(x, (2, 10)), T.reshape(x, (2, 10))).sum(), (4, 5), 34),
    ("transpose", lambda x: T.mul(T.transpose(x, (1, 0)), 3.0).sum(), (4, 5), 35),
    ("broadcast", lambda x: T.mul(T.broadcast_to(x, (3, 4, 5)), 1.5).sum(), (1, 4, 5), 36),
    ("slice", lambda x: T.mul(T.slice_axis(x, 1, 1, 3), T.slice_axis(x, 1, 2, 4)).sum(), (4, 5), 37),
    ("softmax", lambda x: T.slice_axis(T.softmax(x, axis=-1), 1, 0, 2).sum(), (4, 5), 38),
    ("cross_entropy", lambda x: T.cross_entropy(x, np.array([0, 2, 1, 2])), (4, 3), 39),
])
def test_op_gradients_pass_fd(name, fn, shape, seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, *shape)
    if name == "relu":
        # keep the probe away from the kink
        x.data[np.abs(x.data) < 0.05] += 0.1
    assert grad_check(fn, x) < 1e-4, name


def test_concat_gradients():
    rng = np.random.default_rng(40)
    a, b = rand(rng, 2, 3), rand(rng, 2, 3)

    def f(x):
        return T.mul(T.concat([x, b], axis=0), T.concat([b, x], axis=0)).sum()

    assert grad_check(f, a) < 1e-4


def test_layer_norm_gradients():
    rng = np.random.default_rng(41)
    x = rand(rng, 3, 6)
    gamma = rand(rng, 6)
    beta = rand(rng, 6)
    w = Tensor(rng.normal(size=(3, 6)), dtype=np.float64)
    assert grad_check(lambda t: (T.layer_norm(t, gamma, beta) * w).sum(), x) < 1e-4
    assert grad_check(lambda t: (T.layer_norm(x, t, beta) * w).sum(), gamma) < 1e-4
    assert grad_check(lambda t: (T.layer_norm(x, gamma, t) * w).sum(), beta) < 1e-4


def test_embedding_lookup_gradient():
    rng = np.random.default_rng(42)
    e = rand(rng, 5, 3)
    ids = np.array([[0, 2], [2, 4]])
    w = Tensor(rng.normal(size=(2, 2, 3)), dtype=np.float64)
    assert grad_check(lambda t: (T.embedding_lookup(t, ids) * w).sum(), e) < 1e-4


def test_dropout_identity_when_eval():
    x = Tensor(np.ones((3, 3)), requires_grad=True)
    assert T.dropout(x, 0.5, np.random.default_rng(0), training=False) is x
    assert T.dropout(x, 0.0, np.random.default_rng(0), training=True) is x


def test_dropout_grad_matches_mask():
    rng = np.random.default_rng(43)
    x = rand(rng, 8, 8)
    mask_rng = np.random.default_rng(99)
    out = T.dropout(x, 0.25, mask_rng, training=True)
    out.sum().backward()
    expected = np.where(out.data != 0, 1.0 / 0.75, 0.0)
    assert np.array_equal(x.grad, expected)


class TestGradCheckContract:
    def test_sum_of_squares(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        err = grad_check(lambda t: T.mul(t, t).sum(), x)
        assert err < 1e-5
        # analytic gradient of sum(x^2) at ones is 2*ones
        x64 = Tensor(np.ones((3, 2)), requires_grad=True, dtype=np.float64)
        T.mul(x64, x64).sum().backward()
        assert np.allclose(x64.grad, 2.0)

    def test_constant_function_has_zero_grad(self):
        x = Tensor(np.ones(4), requires_grad=True)
        const = Tensor(np.array(1.5))
        assert grad_check(lambda t: T.mul(const, 2.0), x) == 0.0

    def test_eps_range_enforced(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda t: t.sum(), x, eps=1e-5)
        with pytest.raises(ValueError):
            grad_check(lambda t: t.sum(), x, eps=0.1)

    def test_nonscalar_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda t: T.mul(t, 2.0), x)


class TestGraphContract:
    def test_backward_twice_is_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.mul(x, x).sum()
        loss.backward()
        with pytest.raises(RuntimeError):
            loss.backward()

    def test_grad_accumulates_across_fresh_graphs(self):
        x = Tensor(np.ones(3), requires_grad=True)
        T.mul(x, 2.0).sum().backward()
        T.mul(x, 2.0).sum().backward()
        assert np.array_equal(x.grad, np.full(3, 4.0))

    def test_nonscalar_backward_needs_seed(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = T.mul(x, 3.0)
        with pytest.raises(ValueError):
            y.backward()
        y.backward(seed=np.ones((2, 2)))
        assert np.array_equal(x.grad, np.full((2, 2), 3.0))

    def test_shared_subexpression_visited_once(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        h = T.mul(x, 3.0)
        loss = T.add(h, h).sum()  # d/dx = 6
        loss.backward()
        assert np.allclose(x.grad, [6.0])

    def test_no_grad_suppresses_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert not y.requires_grad
        assert y._grad_fn is None

    def test_nan_rejected_at_construction(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan, 1.0])

    def test_inf_rejected_by_op(self):
        x = Tensor([1e30])
        with np.errstate(over="ignore"):
            with pytest.raises(NonFiniteError):
                T.mul(x, x)


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(1234)
        x = Tensor(rng.normal(size=(5, 4)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)).astype(np.float32), requires_grad=True)
        loss = T.cross_entropy(T.matmul(T.relu(x), w), np.array([0, 1, 2, 0, 1]))
        loss.backward()
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1.tobytes() == l2.tobytes()
    assert gx1.tobytes() == gx2.tobytes()
    assert gw1.tobytes() == gw2.tobytes()


def test_tensor_row_major_flat_invariant():
    x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4))
    assert x.data.flags["C_CONTIGUOUS"]
    assert x.size == 12
    y = T.transpose(x, (1, 0))
    assert y.data.flags["C_CONTIGUOUS"]
