import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hyperimts import tensor as tt
from hyperimts.gradcheck import check_op, numeric_grad, rel_error
from hyperimts.tensor import ContractError, DimensionError, NonFiniteError, Tensor


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def test_matmul_trivial_gradient():
    a = leaf([[1.0, 2.0]])
    b = leaf([[3.0], [4.0]])
    out = tt.matmul(a, b)
    assert out.item() == 11.0
    out.backward()
    np.testing.assert_array_equal(a.grad, [[3.0, 4.0]])
    np.testing.assert_array_equal(b.grad, [[1.0], [2.0]])


def test_relu_trivial_gradient():
    x = leaf([-1.0, 2.0])
    tt.sum_all(tt.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_fan_out_accumulates():
    x = leaf([[2.0]])
    y = tt.add(tt.mul(x, x), x)
    tt.sum_all(y).backward()
    assert x.grad[0, 0] == pytest.approx(5.0)


def test_backward_twice_recomputes_fresh_leaf_grads():
    x = leaf([1.0, 2.0])
    tt.sum_all(tt.square(x)).backward()
    x.zero_grad()
    tt.sum_all(tt.square(x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_non_scalar_backward_rejected():
    with pytest.raises(ContractError):
        tt.relu(leaf([1.0, 2.0])).backward()


def test_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        tt.matmul(leaf(np.ones((2, 3))), leaf(np.ones((4, 5))))


def test_mul_requires_equal_shapes():
    with pytest.raises(DimensionError):
        tt.mul(leaf(np.ones((2, 1))), leaf(np.ones((2, 2))))


def test_gather_out_of_range():
    with pytest.raises(IndexError, match="5"):
        tt.gather_rows(leaf(np.ones((3, 2))), [0, 5])


def test_unknown_elementwise_op():
    with pytest.raises(ValueError, match="tanh"):
        tt.elementwise("tanh", leaf([1.0]))


def test_softmax_fully_masked_row_is_zero():
    x = leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
    mask = np.array([[True, False], [False, False]])
    y = tt.softmax(x, axis=1, mask=mask)
    np.testing.assert_array_equal(y.data, [[1.0, 0.0], [0.0, 0.0]])
    assert np.isfinite(y.data).all()


def test_softmax_stable_for_large_inputs():
    y = tt.softmax(Tensor(np.array([[1000.0, 1000.0]])), axis=1)
    np.testing.assert_allclose(y.data, [[0.5, 0.5]])


def test_debug_mode_catches_non_finite():
    tt.set_debug(True)
    try:
        with pytest.raises(NonFiniteError):
            tt.scale(Tensor(np.array([1.0])), np.inf)
    finally:
        tt.set_debug(False)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with tt.no_grad():
        y = tt.square(x)
    assert y.is_leaf and not y.requires_grad


def _cases():
    r = np.random.default_rng(7)
    away = lambda shape: r.normal(size=shape) + np.sign(r.normal(size=shape)) * 0.3  # noqa: E731
    return {
        "matmul": (tt.matmul, [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
        "add": (tt.add, [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
        "sub": (tt.sub, [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
        "mul": (tt.mul, [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
        "scale": (lambda a: tt.scale(a, -1.7), [r.normal(size=(3,))]),
        "relu": (tt.relu, [away((4, 3))]),
        "sin": (tt.sin, [r.normal(size=(4, 3))]),
        "square": (tt.square, [r.normal(size=(5,))]),
        "softmax": (lambda a: tt.softmax(a, axis=1), [r.normal(size=(3, 4))]),
        "softmax_masked": (
            lambda a: tt.softmax(a, axis=1, mask=np.array([[1, 0, 1], [0, 0, 0], [1, 1, 1]], bool)),
            [r.normal(size=(3, 3))],
        ),
        "softmax_axis0": (lambda a: tt.softmax(a, axis=0), [r.normal(size=(3, 4))]),
        "concat0": (lambda a, b: tt.concat([a, b], axis=0), [r.normal(size=(2, 3)), r.normal(size=(1, 3))]),
        "concat1": (lambda a, b: tt.concat([a, b], axis=1), [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
        "gather": (lambda a: tt.gather_rows(a, [2, 0, 2, 1]), [r.normal(size=(3, 2))]),
        "take_cols": (lambda a: tt.take_cols(a, 1, 3), [r.normal(size=(2, 4))]),
        "transpose": (tt.transpose, [r.normal(size=(2, 3))]),
        "reshape": (lambda a: tt.reshape(a, (3, 2)), [r.normal(size=(2, 3))]),
        "add_bias": (tt.add_bias, [r.normal(size=(4, 3)), r.normal(size=(3,))]),
        "linear": (tt.linear, [r.normal(size=(4, 3)), r.normal(size=(3, 2)), r.normal(size=(2,))]),
        "sum_all": (tt.sum_all, [r.normal(size=(3, 3))]),
        "rowsum": (tt.rowsum, [r.normal(size=(3, 4))]),
    }


@pytest.mark.parametrize("name", sorted(_cases()))
def test_op_matches_finite_differences(name):
    fn, inputs = _cases()[name]
    assert check_op(fn, inputs, step=1e-6) < 1e-5


def test_numeric_grad_on_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = numeric_grad(lambda: float(np.sum(x**2)), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-8)


def test_rel_error_floor():
    assert rel_error(1e-12, 0.0) == pytest.approx(1e-6)
    assert rel_error(2.0, 1.0) == pytest.approx(0.5)


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=finite))
def test_softmax_rows_sum_to_one(x):
    y = tt.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=1e-12)
    assert (y >= 0).all()


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (3, 2), elements=finite), hnp.arrays(np.float64, (2, 4), elements=finite))
def test_matmul_gradient_is_outer_product(a, b):
    A, B = leaf(a), leaf(b)
    tt.sum_all(tt.matmul(A, B)).backward()
    np.testing.assert_allclose(A.grad, np.ones((3, 4)) @ b.T, atol=1e-12)
    np.testing.assert_allclose(B.grad, a.T @ np.ones((3, 4)), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=8))
def test_gather_backward_scatter_adds(idx):
    x = leaf(np.zeros((5, 2)))
    tt.sum_all(tt.gather_rows(x, idx)).backward()
    np.testing.assert_array_equal(x.grad[:, 0], np.bincount(idx, minlength=5))
