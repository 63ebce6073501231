"""Tests for the tensor engine and its gradient tape."""

import numpy as np
import pytest

from cmkd.exceptions import NumericalError, ShapeError, TapeError
from cmkd.gradcheck import numeric_gradient, relative_error
from cmkd.tensor import (
    EPS,
    Tensor,
    add_bias,
    backward,
    concat,
    div,
    exp,
    gather_columns,
    gather_diagonal,
    log,
    log_softmax_rows,
    matmul,
    mean,
    no_grad,
    relu,
    row_l2_normalize,
    slice,
    softmax_rows,
    sum,
    tanh,
    transpose,
)


def _leaf(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class TestElementwise:
    """Tests for arithmetic primitives"""

    def test_square_sum_gradient(self):
        """Test d/dx sum(x * x) == 2x."""
        x = _leaf([1.0, -2.0, 3.0])
        backward(sum(x * x))
        assert np.array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_scalar_broadcast(self):
        """Test that a Python number meets a tensor of any shape."""
        x = _leaf([[1.0, 2.0], [3.0, 4.0]])
        backward(sum(2.0 * x + 1.0))
        assert np.array_equal(x.grad, np.full((2, 2), 2.0))

    def test_shape_mismatch(self):
        """Test that no implicit broadcasting happens between arrays."""
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])

    def test_div_gradient(self):
        """Test the quotient rule on both operands."""
        a, b = _leaf([3.0]), _leaf([2.0])
        backward(sum(a / b))
        assert a.grad[0] == pytest.approx(0.5)
        assert b.grad[0] == pytest.approx(-0.75)

    def test_div_by_zero(self):
        """Test division at the stability floor."""
        with pytest.raises(NumericalError):
            div(Tensor([1.0]), Tensor([EPS / 2]))

    def test_log_clamps(self):
        """Test that log clamps at EPS with zero gradient on the clamped entry."""
        x = _leaf([0.0, 2.0])
        y = log(x)
        assert y.data[0] == pytest.approx(np.log(EPS))
        backward(sum(y))
        assert x.grad[0] == 0.0
        assert x.grad[1] == pytest.approx(0.5)

    def test_exp_overflow(self):
        """Test that a non-finite result is rejected."""
        with pytest.raises(NumericalError):
            exp(Tensor([1000.0]))

    def test_relu_and_tanh(self):
        """Test the activations and their derivatives."""
        x = _leaf([-1.0, 0.5])
        backward(sum(relu(x)))
        assert np.array_equal(x.grad, [0.0, 1.0])
        z = _leaf([0.3])
        backward(sum(tanh(z)))
        assert z.grad[0] == pytest.approx(1 - np.tanh(0.3) ** 2)

    def test_non_finite_input(self):
        """Test that tensors refuse NaN values."""
        with pytest.raises(NumericalError):
            Tensor([np.nan])


class TestMatrixOps:
    """Tests for matrix primitives"""

    def test_matmul_gradient(self, rng):
        """Test dL/dA = G B^T and dL/dB = A^T G for L = sum(A @ B)."""
        a, b = _leaf(rng.normal(size=(3, 4))), _leaf(rng.normal(size=(4, 2)))
        backward(sum(matmul(a, b)))
        g = np.ones((3, 2))
        assert np.allclose(a.grad, g @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ g)

    def test_matmul_shape_error(self):
        """Test that inner dimensions must agree."""
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_add_bias(self):
        """Test row broadcast of the bias and its summed gradient."""
        x, b = _leaf(np.zeros((3, 2))), _leaf([1.0, 2.0])
        out = add_bias(x, b)
        assert np.array_equal(out.data, [[1, 2]] * 3)
        backward(sum(out))
        assert np.array_equal(b.grad, [3.0, 3.0])

    def test_softmax_rows_sum_to_one(self, rng):
        """Test that softmax rows are distributions and log_softmax matches."""
        x = Tensor(rng.normal(size=(4, 5)) * 10)
        p = softmax_rows(x).data
        assert np.allclose(p.sum(axis=1), 1.0)
        assert np.allclose(np.exp(log_softmax_rows(x).data), p)

    def test_row_l2_normalize(self, rng):
        """Test unit row norms."""
        x = Tensor(rng.normal(size=(5, 3)))
        norms = np.linalg.norm(row_l2_normalize(x).data, axis=1)
        assert np.allclose(norms, 1.0)

    def test_gathers(self):
        """Test diagonal and per-row column gathers with their scatters."""
        x = _leaf(np.arange(9.0).reshape(3, 3))
        assert np.array_equal(gather_diagonal(x).data, [0.0, 4.0, 8.0])
        cols = gather_columns(x, np.array([2, 0, 1]))
        assert np.array_equal(cols.data, [2.0, 3.0, 7.0])
        backward(sum(cols))
        expected = np.zeros((3, 3))
        expected[[0, 1, 2], [2, 0, 1]] = 1.0
        assert np.array_equal(x.grad, expected)

    def test_concat_and_slice(self):
        """Test that concat and slice route gradients to the right pieces."""
        a, b = _leaf([1.0, 2.0]), _leaf([3.0])
        joined = concat([a, b])
        assert np.array_equal(joined.data, [1.0, 2.0, 3.0])
        backward(sum(slice(joined, (np.s_[1:],)) * 2.0))
        assert np.array_equal(a.grad, [0.0, 2.0])
        assert np.array_equal(b.grad, [2.0])

    def test_mean_axis(self):
        """Test mean over one axis."""
        x = _leaf(np.ones((2, 4)))
        backward(sum(mean(x, axis=1)))
        assert np.allclose(x.grad, 0.25)


class TestTape:
    """Tests for tape lifecycle rules"""

    def test_backward_consumes_tape(self):
        """Test that a tape can be replayed only once."""
        x = _leaf([1.0, 2.0])
        loss = sum(x * x)
        backward(loss)
        with pytest.raises(TapeError):
            backward(loss)

    def test_non_scalar_loss(self):
        """Test that backward needs a scalar."""
        x = _leaf([1.0, 2.0])
        with pytest.raises(TapeError):
            backward(x * 2.0)

    def test_stale_intermediate(self):
        """Test that an intermediate from a consumed tape cannot be reused."""
        x = _leaf([1.0, 2.0])
        h = x * 3.0
        backward(sum(h))
        with pytest.raises(TapeError):
            h * 2.0

    def test_leaves_survive_tapes(self):
        """Test that leaves are reusable across forward passes."""
        x = _leaf([1.0])
        backward(sum(x * 2.0))
        backward(sum(x * 5.0))
        assert x.grad[0] == 5.0

    def test_no_grad(self):
        """Test that nothing is recorded inside no_grad."""
        x = _leaf([1.0])
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        with pytest.raises(TapeError):
            backward(sum(y))

    def test_constant_loss(self):
        """Test that a loss without trainable inputs cannot be differentiated."""
        with pytest.raises(TapeError):
            backward(sum(Tensor([1.0, 2.0])))

    def test_assign_only_leaves(self):
        """Test that in-place assignment is reserved for leaves."""
        x = _leaf([1.0])
        with pytest.raises(TapeError):
            (x * 2.0).assign_(np.array([0.0]))
        x.assign_(np.array([4.0]))
        assert x.item() == 4.0

    def test_data_is_read_only(self):
        """Test that tensor storage cannot be mutated behind the tape's back."""
        x = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            x.data[0] = 5.0


def _primitive_case(name, rng):
    """(forward, leaves) of one primitive on fresh random inputs."""
    a = _leaf(rng.normal(size=(4, 3)))
    pos = _leaf(1.0 + rng.random((4, 3)))
    b = _leaf(rng.normal(size=(3, 5)))
    square = _leaf(rng.normal(size=(4, 4)))
    cases = {
        "matmul": (lambda: matmul(a, b), [a, b]),
        "div": (lambda: div(a, pos), [a, pos]),
        "exp": (lambda: exp(a), [a]),
        "log": (lambda: log(pos), [pos]),
        "sum": (lambda: sum(a, axis=1), [a]),
        "mean": (lambda: mean(a, axis=0), [a]),
        "transpose": (lambda: transpose(a), [a]),
        "row_l2_normalize": (lambda: row_l2_normalize(a), [a]),
        "softmax_rows": (lambda: softmax_rows(a), [a]),
        "log_softmax_rows": (lambda: log_softmax_rows(a), [a]),
        "gather_diagonal": (lambda: gather_diagonal(square), [square]),
        "concat": (lambda: concat([a, pos], axis=1), [a, pos]),
        "slice": (lambda: slice(a, (np.s_[1:3], np.s_[:2])), [a]),
        "tanh": (lambda: tanh(a), [a]),
    }
    forward, leaves = cases[name]
    with no_grad():
        weights = Tensor(rng.normal(size=forward().shape))

    def fn():
        return sum(forward() * weights)

    return fn, leaves


PRIMITIVES = [
    "matmul",
    "div",
    "exp",
    "log",
    "sum",
    "mean",
    "transpose",
    "row_l2_normalize",
    "softmax_rows",
    "log_softmax_rows",
    "gather_diagonal",
    "concat",
    "slice",
    "tanh",
]


class TestFiniteDifferences:
    """Tests for primitive backward passes against central differences"""

    @pytest.mark.parametrize("name", PRIMITIVES)
    def test_primitive_gradient(self, name, rng):
        """Test 20 random instances of a randomly weighted primitive output."""
        for _ in range(20):
            fn, leaves = _primitive_case(name, rng)
            backward(fn())
            for leaf in leaves:
                numeric = numeric_gradient(fn, leaf)
                assert relative_error(leaf.grad, numeric) <= 1e-6, name
