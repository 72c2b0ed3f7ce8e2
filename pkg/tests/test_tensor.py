"""Tensor ops: forward examples, finite-difference gradient checks, properties."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import fd_grad, grad_rel_err
from sage import tensor as T


def _leaf(rng, *shape):
    return T.DiffTensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)


def scalar_loss(out: T.DiffTensor, weights: np.ndarray) -> T.DiffTensor:
    """Deterministic scalar projection so FD can probe full Jacobians."""
    w = T.DiffTensor(weights.reshape(out.shape))
    return T.sum_all(T.mul(out, w))


def check_op(op, arg_shapes, seed, tol=1e-4):
    """FD-check d(w . op(xs)) / d(x_i) for every differentiable input."""
    rng = np.random.default_rng(seed)
    args = [rng.uniform(-1.0, 1.0, size=s) for s in arg_shapes]
    with T.Tape() as tape:
        leaves = [T.DiffTensor(a, requires_grad=True) for a in args]
        out = op(*leaves)
        w = rng.uniform(-1.0, 1.0, size=out.shape)
        loss = scalar_loss(out, w)
    tape.backward(loss)

    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            vals = [a.copy() for a in args]
            vals[i] = x
            res = op(*[T.DiffTensor(v) for v in vals]).values
            return float((res * w.reshape(res.shape)).sum())

        err = grad_rel_err(leaf.grad, fd_grad(f, args[i]))
        assert err < tol, f"input {i}: gradient error {err:.2e}"


# ---------------------------------------------------------------- forward

def test_matmul_identity():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(2, 2))
    out = T.matmul(T.DiffTensor(np.eye(2)), T.DiffTensor(m))
    np.testing.assert_array_equal(out.values, m)


def test_matmul_hand_case():
    out = T.matmul(T.DiffTensor([[1.0, 2.0], [3.0, 4.0]]), T.DiffTensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.values, [[2.0], [4.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(T.DiffTensor(np.zeros((2, 3))), T.DiffTensor(np.zeros((2, 2))))


def test_softmax_uniform_row():
    out = T.softmax_rows(T.DiffTensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.values, [[1 / 3] * 3])


def test_softmax_stabilized_no_overflow():
    out = T.softmax_rows(T.DiffTensor([[1000.0, 0.0]]))
    np.testing.assert_allclose(out.values, [[1.0, 0.0]], atol=1e-12)


def test_softmax_mask_zeroes_disallowed():
    mask = np.array([[True, True, False]])
    out = T.softmax_rows(T.DiffTensor([[0.0, 0.0, 50.0]]), mask)
    assert out.values[0, 2] == 0.0
    np.testing.assert_allclose(out.values.sum(axis=1), 1.0)


def test_softmax_fully_masked_row_raises():
    with pytest.raises(T.DegenerateMaskError):
        T.softmax_rows(T.DiffTensor([[1.0, 2.0]]), np.array([[False, False]]))


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    with T.Tape() as tape:
        x = T.DiffTensor([[1.0, -2.0], [0.5, 3.0]], requires_grad=True)
        tape_out = T.sum_all(x)
    tape.backward(tape_out)
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_backward_square_at_three():
    with T.Tape() as tape:
        x = T.DiffTensor([[3.0]], requires_grad=True)
        y = T.sum_all(T.mul(x, x))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, [[6.0]])


def test_backward_twice_without_reset_raises():
    with T.Tape() as tape:
        x = T.DiffTensor([1.0], requires_grad=True)
        y = T.sum_all(x)
    tape.backward(y)
    with pytest.raises(T.TapeError):
        tape.backward(y)
    tape.reset_grads()
    tape.backward(y)  # re-armed


def test_backward_detached_scalar_raises():
    x = T.DiffTensor([1.0], requires_grad=True)
    with pytest.raises(T.TapeError):
        T.backward(x)


def test_backward_nonscalar_raises():
    with T.Tape() as tape:
        x = T.DiffTensor([[1.0, 2.0]], requires_grad=True)
        y = T.scale(x, 2.0)
    with pytest.raises(T.TapeError):
        tape.backward(y)


# ------------------------------------------------- finite-difference checks

OP_CASES = [
    ("matmul", lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    ("add", lambda a, b: T.add(a, b), [(3, 3), (3, 3)]),
    ("mul", lambda a, b: T.mul(a, b), [(2, 4), (2, 4)]),
    ("scale", lambda a: T.scale(a, -1.7), [(3, 2)]),
    ("relu", lambda a: T.relu(a), [(4, 3)]),
    ("gelu", lambda a: T.gelu(a), [(3, 3)]),
    ("softmax", lambda a: T.softmax_rows(a), [(3, 5)]),
    ("layer_norm", lambda a: T.layer_norm(a), [(3, 6)]),
    ("reshape", lambda a: T.reshape(a, (2, 6)), [(3, 4)]),
    ("transpose", lambda a: T.transpose(a), [(3, 4)]),
    ("concat_rows", lambda a, b: T.concat_rows(a, b), [(2, 3), (4, 3)]),
    ("concat_cols", lambda a, b, c: T.concat_cols([a, b, c]), [(2, 2), (2, 3), (2, 1)]),
    ("col_slice", lambda a: T.col_slice(a, 1, 3), [(3, 5)]),
    ("row_slice", lambda a: T.row_slice(a, 0, 2), [(4, 3)]),
    ("normalize_rows", lambda a: T.normalize_rows(T.add(a, T.DiffTensor(np.full((3, 4), 2.0)))), [(3, 4)]),
    ("global_mean", lambda a: T.global_mean(a), [(5, 3)]),
    ("sum_all", lambda a: T.sum_all(a), [(3, 3)]),
    ("take", lambda a: T.take(a, (1, 2)), [(3, 4)]),
]


@pytest.mark.parametrize("name,op,shapes", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_op_gradients_match_finite_differences(name, op, shapes):
    for seed in range(5):
        check_op(op, shapes, seed=seed)


def test_matmul_backward_tight_tolerance():
    # linear op: central differences are exact up to roundoff
    check_op(lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)], seed=7, tol=1e-5)


def test_softmax_jvp_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = rng.uniform(-1.0, 1.0, size=(1, 6))
    v = rng.uniform(-1.0, 1.0, size=(1, 6))

    def f(z):
        return float((T.softmax_rows(T.DiffTensor(z)).values * v).sum())

    with T.Tape() as tape:
        leaf = T.DiffTensor(x, requires_grad=True)
        loss = scalar_loss(T.softmax_rows(leaf), v)
    tape.backward(loss)
    # v . J and FD of v . softmax agree
    assert grad_rel_err(leaf.grad, fd_grad(f, x)) < 1e-5


def test_embedding_lookup_scatter_grad():
    with T.Tape() as tape:
        table = T.DiffTensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        out = T.embedding_lookup(table, [1, 1, 3])
        loss = T.sum_all(out)
    tape.backward(loss)
    expected = np.zeros((4, 3))
    expected[1] = 2.0  # duplicate ids accumulate
    expected[3] = 1.0
    np.testing.assert_array_equal(table.grad, expected)


# ---------------------------------------------------------------- properties

@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(row):
    out = T.softmax_rows(T.DiffTensor([row])).values
    assert abs(out.sum() - 1.0) <= 1e-9
    assert (out >= 0).all()


@given(
    st.lists(st.floats(-5, 5), min_size=2, max_size=6),
    st.integers(min_value=0, max_value=5),
    st.floats(0.1, 3.0),
)
def test_softmax_monotone_per_coordinate(row, idx, bump):
    idx = idx % len(row)
    base = T.softmax_rows(T.DiffTensor([row])).values[0, idx]
    bumped = list(row)
    bumped[idx] += bump
    after = T.softmax_rows(T.DiffTensor([bumped])).values[0, idx]
    assert after > base


@settings(max_examples=25)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_forward_bitwise_deterministic(seed):
    rng1 = np.random.default_rng(seed)
    rng2 = np.random.default_rng(seed)

    def run(rng):
        a = T.DiffTensor(rng.normal(size=(4, 4)))
        b = T.DiffTensor(rng.normal(size=(4, 4)))
        return T.softmax_rows(T.matmul(T.gelu(a), b)).values

    assert np.array_equal(run(rng1), run(rng2))
