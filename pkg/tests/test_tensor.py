import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvformer import tensor as T
from kvformer.exceptions import GraphError, NonFiniteError, ShapeError
from kvformer.tensor import Tensor, finite_diff_grad, no_grad


def naive_matmul(a, b):
    p, q = a.shape
    q2, r = b.shape
    assert q == q2
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            for k in range(q):
                out[i, j] += a[i, k] * b[k, j]
    return out


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom < 1e-12 else np.linalg.norm(a - b) / denom


def gradcheck(build, *inputs, eps=1e-6):
    """Compare backward() with central differences for every input."""
    for x in inputs:
        x.zero_grad()
    build().backward()
    for x in inputs:
        num = finite_diff_grad(build, x, eps)
        assert rel_err(x.grad, num) <= 1e-3, (x.grad, num)


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_basis_product():
    out = Tensor([[1.0, 0.0], [0.0, 0.0]]) @ Tensor([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(out.data, [[0, 1], [0, 0]])


def test_matmul_matches_triple_loop(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    out = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
    np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_matmul_oracle_random_shapes(p, q, r, seed):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(p, q)), g.normal(size=(q, r))
    out = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
    np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-6)


def test_matmul_batched_broadcast(rng):
    a = rng.normal(size=(2, 3, 4, 5))
    b = rng.normal(size=(5, 6))
    out = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
    assert out.shape == (2, 3, 4, 6)
    np.testing.assert_allclose(out.data[1, 2], naive_matmul(a[1, 2], b), atol=1e-9)


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(T.zeros((2, 3)), T.zeros((4, 2)))


# -- softmax ------------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])


@pytest.mark.parametrize("x", [-3.0, 0.0, 7.5, 1e4])
def test_softmax_masked_entry_is_exact_zero(x):
    s = T.masked_fill(Tensor([x, 0.0]), np.array([False, True]), -np.inf)
    out = T.softmax_lastdim(s).data
    assert out[1] == 0.0
    assert out[0] == 1.0


def test_softmax_large_logits_stay_finite():
    out = T.softmax_lastdim(Tensor([1000.0, 1001.0], dtype=np.float64)).data
    # oracle: shift by the max by hand, then 1/(1+e) and e/(1+e)
    e = np.e
    np.testing.assert_allclose(out, [1 / (1 + e), e / (1 + e)], atol=1e-12)
    np.testing.assert_allclose(out, [0.2689, 0.7311], atol=1e-4)


def test_softmax_all_masked_row_errors():
    s = T.masked_fill(T.zeros((2, 3)), np.array([[False] * 3, [True] * 3]), -np.inf)
    with pytest.raises(NonFiniteError):
        T.softmax_lastdim(s)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.data())
def test_softmax_rows_are_distributions(values, data):
    x = np.array(values)
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=len(x), max_size=len(x))))
    mask[data.draw(st.integers(0, len(x) - 1))] = False
    s = T.masked_fill(Tensor(x, dtype=np.float64), mask, -np.inf)
    out = T.softmax_lastdim(s).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) <= 1e-5
    assert np.all(out[mask] == 0.0)


# -- layer norm -----------------------------------------------------------------


def test_layer_norm_constant_slice():
    out = T.layer_norm(Tensor([5.0, 5.0, 5.0]), T.ones(3), T.zeros(3))
    np.testing.assert_allclose(out.data, [0, 0, 0], atol=1e-6)


def test_layer_norm_zero_gain_returns_beta():
    beta = Tensor([0.5, -1.0, 2.0])
    out = T.layer_norm(Tensor(np.random.default_rng(0).normal(size=(4, 3))), T.zeros(3), beta)
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta.data, (4, 3)))


def test_layer_norm_hand_values():
    out = T.layer_norm(Tensor([1.0, 2.0, 3.0], dtype=np.float64), T.ones(3, dtype=np.float64),
                       T.zeros(3, dtype=np.float64), eps=1e-12)
    # mean 2, population variance 2/3 -> (x - 2) / sqrt(2/3)
    np.testing.assert_allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_layer_norm_gamma_shape_checked():
    with pytest.raises(ShapeError):
        T.layer_norm(T.zeros((2, 3)), T.ones(4), T.zeros(4))


# -- elementwise ----------------------------------------------------------------


def test_add_zeros_is_identity(rng):
    x = Tensor(rng.normal(size=(3, 2)))
    np.testing.assert_array_equal(T.add(x, T.zeros((3, 2))).data, x.data)


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_gather_rows_permutes_rows():
    table = Tensor([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    np.testing.assert_array_equal(T.gather_rows(table, np.array([2, 0])).data, [[3, 3], [1, 1]])


@pytest.mark.parametrize("bad", [[3], [-1], [0, 5]])
def test_gather_rows_out_of_range(bad):
    with pytest.raises(IndexError):
        T.gather_rows(T.zeros((3, 2)), np.array(bad))


def test_scale_and_mul(rng):
    a = rng.normal(size=(2, 3))
    np.testing.assert_allclose(T.scale(Tensor(a), 3.0).data, 3 * a, rtol=1e-6)
    np.testing.assert_allclose(T.mul(Tensor(a), Tensor(a)).data, a * a, rtol=1e-6)


def test_broadcast_shape_error():
    with pytest.raises(ShapeError):
        T.add(T.zeros((2, 3)), T.zeros((4,)))


def test_constructor_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_constructor_rejects_empty_dimension():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_default_dtype_is_float32():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.array([1.0]), dtype=np.float64).dtype == np.float64


# -- backward -----------------------------------------------------------------


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_sum_of_squares(rng):
    x = Tensor(rng.normal(size=(4,)), requires_grad=True, dtype=np.float64)
    T.mul(x, x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError, match="scalar"):
        (x * 2.0).backward()


def test_double_backward_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * 3.0).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_without_tracked_inputs_is_an_error():
    with pytest.raises(GraphError):
        Tensor([1.0]).sum().backward()


def test_gradients_accumulate_until_zeroed():
    x = Tensor([1.0, -2.0], requires_grad=True)
    (x * 2.0).sum().backward()
    (x * 2.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_gets_summed_gradient():
    x = Tensor([3.0], requires_grad=True, dtype=np.float64)
    y = x * 2.0
    (y + y + x).sum().backward()
    np.testing.assert_allclose(x.grad, [5.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_backward_linearity(rng):
    """One pass over loss1 + loss2 equals two separate passes."""
    a = rng.normal(size=(3, 3))
    x1 = Tensor(a, requires_grad=True, dtype=np.float64)
    (T.mul(x1, x1).sum() + T.relu(x1).sum()).backward()
    x2 = Tensor(a, requires_grad=True, dtype=np.float64)
    T.mul(x2, x2).sum().backward()
    T.relu(x2).sum().backward()
    np.testing.assert_allclose(x1.grad, x2.grad, atol=1e-12)


# -- finite differences -------------------------------------------------------


def test_finite_diff_sum_of_squares():
    theta = Tensor([1.0, -2.0], dtype=np.float64)
    g = finite_diff_grad(lambda: T.mul(theta, theta).sum(), theta, 1e-5)
    np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)


def test_finite_diff_constant_is_zero():
    theta = Tensor([1.0, 2.0, 3.0], dtype=np.float64)
    np.testing.assert_array_equal(finite_diff_grad(lambda: 7.0, theta, 1e-4), np.zeros(3))


def test_finite_diff_restores_theta():
    theta = Tensor([0.3, 0.7], dtype=np.float64)
    before = theta.data.copy()
    finite_diff_grad(lambda: theta.sum(), theta, 1e-4)
    np.testing.assert_array_equal(theta.data, before)


@pytest.mark.parametrize("eps", [1e-7, 1e-2])
def test_finite_diff_epsilon_range(eps):
    with pytest.raises(ValueError):
        finite_diff_grad(lambda: 0.0, Tensor([1.0]), eps)


def test_finite_diff_non_finite_objective():
    theta = Tensor([1.0], dtype=np.float64)
    with pytest.raises(NonFiniteError):
        finite_diff_grad(lambda: float("inf"), theta, 1e-4)


# -- per-op gradient checks (64-bit) ---------------------------------------------


def _leaf(g, *shape):
    return Tensor(g.normal(size=shape), requires_grad=True, dtype=np.float64)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_gradcheck_matmul_batched(seed):
    g = np.random.default_rng(seed)
    a, b = _leaf(g, 2, 3, 4), _leaf(g, 4, 2)
    w = g.normal(size=(2, 3, 2))
    gradcheck(lambda: T.mul(a @ b, Tensor(w, dtype=np.float64)).sum(), a, b)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_gradcheck_softmax_and_mask(seed):
    g = np.random.default_rng(seed)
    x = _leaf(g, 2, 4, 4)
    w = Tensor(g.normal(size=(2, 4, 4)), dtype=np.float64)
    mask = np.triu(np.ones((4, 4), dtype=bool), 1)
    gradcheck(lambda: T.mul(T.softmax_lastdim(T.masked_fill(x, mask, -np.inf)), w).sum(), x)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_gradcheck_layer_norm(seed):
    g = np.random.default_rng(seed)
    x, gamma, beta = _leaf(g, 3, 5), _leaf(g, 5), _leaf(g, 5)
    w = Tensor(g.normal(size=(3, 5)), dtype=np.float64)
    gradcheck(lambda: T.mul(T.layer_norm(x, gamma, beta), w).sum(), x, gamma, beta)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_gradcheck_elementwise_and_shape_ops(seed):
    g = np.random.default_rng(seed)
    a, b = _leaf(g, 2, 3, 4), _leaf(g, 4)
    table = _leaf(g, 5, 4)
    ids = g.integers(0, 5, size=(2, 3))
    w = Tensor(g.normal(size=(4, 3, 2)), dtype=np.float64)

    def f():
        h = T.relu(T.mul(a, b) + T.gather_rows(table, ids) - 0.1)
        h = T.scale(h, 0.7).transpose(2, 1, 0)
        return T.mul(h, w).mean() + T.reshape(a, (6, 4)).sum()

    gradcheck(f, a, b, table)
