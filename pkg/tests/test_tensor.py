import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eqplan import tensor as tn

from conftest import check_op_grad


def test_matmul_identity():
    a = tn.const([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tn.matmul(tn.const(np.eye(2)), a).data, a.data)


def test_matmul_projector():
    out = tn.matmul(tn.const([[1.0, 0.0], [0.0, 0.0]]), tn.const([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5.0], [0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(tn.ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        tn.matmul(tn.const(np.ones((3, 4))), tn.const(np.ones((3, 2))))


def test_matmul_gradient(rng):
    a = rng.uniform(-1, 1, (3, 4))
    b = rng.uniform(-1, 1, (4, 2))
    assert check_op_grad(tn.matmul, a, b) < 1e-7


@pytest.mark.parametrize("shared", ["left", "right"])
def test_batched_matmul_gradient(rng, shared):
    if shared == "left":
        a, b = rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, (2, 4, 3, 2))
    else:
        a, b = rng.uniform(-1, 1, (2, 4, 3, 5)), rng.uniform(-1, 1, (5, 2))
    assert check_op_grad(tn.matmul, a, b) < 1e-7


def test_rowwise_l2norm_values():
    np.testing.assert_array_equal(tn.rowwise_l2norm(tn.const([[3.0, 4.0]])).data, [5.0])


def test_rowwise_l2norm_zero_row_has_zero_gradient():
    tape = tn.Tape()
    x = tape.param(np.zeros((1, 2)), "x")
    n = tn.rowwise_l2norm(x)
    assert n.data[0] == 0.0
    g = tn.backward(tape, tn.sum(n, axis=0))["x"]
    np.testing.assert_array_equal(g, np.zeros((1, 2)))
    assert np.all(np.isfinite(g))


def test_rowwise_l2norm_gradient(rng):
    assert check_op_grad(tn.rowwise_l2norm, rng.uniform(-1, 1, (5, 2))) < 1e-6


def test_softmax_symmetric():
    np.testing.assert_array_equal(tn.softmax(tn.const([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_large_inputs_do_not_overflow():
    y = tn.softmax(tn.const([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] == pytest.approx(1.0) and y[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_gradient(rng):
    assert check_op_grad(tn.softmax, rng.uniform(-1, 1, 4)) < 1e-6


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    y = tn.softmax(tn.const(x)).data
    assert np.all(y > 0)
    assert abs(y.sum() - 1.0) < 1e-12


def test_backward_rows_equal_input():
    x = np.array([[1.0], [2.0], [3.0]])
    tape = tn.Tape()
    W = tape.param(np.arange(6.0).reshape(2, 3), "W")
    loss = tn.sum(tn.reshape(tn.matmul(W, tn.const(x)), (-1,)), axis=0)
    g = tn.backward(tape, loss)["W"]
    np.testing.assert_array_equal(g, np.tile(x.T, (2, 1)))


def test_backward_unused_parameter_gets_exact_zero():
    tape = tn.Tape()
    a = tape.param(np.ones(3), "a")
    tape.param(np.ones((2, 2)), "unused")
    g = tn.backward(tape, tn.sum(a, axis=0))
    np.testing.assert_array_equal(g["unused"], np.zeros((2, 2)))


def test_backward_rejects_non_scalar_loss():
    tape = tn.Tape()
    a = tape.param(np.ones(3), "a")
    with pytest.raises(ValueError, match="scalar"):
        tn.backward(tape, tn.scale(a, 2.0))


def test_backward_rejects_loss_from_other_tape():
    t1, t2 = tn.Tape(), tn.Tape()
    a = t1.param(np.ones(1), "a")
    with pytest.raises(ValueError):
        tn.backward(t2, tn.sum(a, axis=0))


def test_mixing_tapes_is_an_error():
    a = tn.Tape().param(np.ones(2), "a")
    b = tn.Tape().param(np.ones(2), "b")
    with pytest.raises(ValueError):
        tn.add(a, b)


def test_tape_records_topological_order():
    tape = tn.Tape()
    a = tape.param(np.ones(2), "a")
    b = tn.tanh(tn.scale(a, 2.0))
    tn.sum(b, axis=0)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node.parents:
            if p.tape is tape:
                assert pos[id(p)] < pos[id(node)]


def test_no_broadcasting_in_elementwise():
    with pytest.raises(tn.ShapeError):
        tn.add(tn.const(np.ones((2, 3))), tn.const(np.ones(3)))


@pytest.mark.parametrize("name,op,shapes", [
    ("add", tn.add, [(3, 2), (3, 2)]),
    ("sub", tn.sub, [(3, 2), (3, 2)]),
    ("mul", tn.mul, [(3, 2), (3, 2)]),
    ("scale", lambda a: tn.scale(a, -1.7), [(4,)]),
    ("sigmoid", tn.sigmoid, [(5,)]),
    ("tanh", tn.tanh, [(5,)]),
    ("log_softmax", tn.log_softmax, [(2, 4)]),
    ("softmax_batched", tn.softmax, [(3, 4)]),
    ("mean", lambda a: tn.mean(a, axis=1), [(3, 4)]),
    ("sum", lambda a: tn.sum(a, axis=0), [(3, 4)]),
    ("concat", lambda a, b: tn.concat([a, b], axis=1), [(2, 3), (2, 1)]),
    ("expand", lambda a: tn.expand(a, 1, 3), [(2, 2)]),
    ("expand_r2_over_channels", lambda a: tn.expand(a, 1, 5), [(4, 2)]),
    ("rowdot", tn.rowdot, [(4, 2), (4, 2)]),
    ("linear", lambda x, w, b: tn.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
    ("take", lambda a: tn.take(a, slice(1, 3), axis=1), [(2, 4, 2)]),
    ("gather", lambda a: tn.gather(a, [2, 0]), [(2, 3, 2)]),
    ("reshape", lambda a: tn.reshape(a, (6,)), [(2, 3)]),
    ("transpose", lambda a: tn.transpose(a, (1, 0, 2)), [(2, 3, 2)]),
    ("pairwise_diff", tn.pairwise_diff, [(2, 3, 2)]),
    ("mirror", tn.mirror, [(6, 2), (6, 2)]),
])
def test_primitive_gradients(rng, name, op, shapes):
    xs = [rng.uniform(-1, 1, s) for s in shapes]
    assert check_op_grad(op, *xs) < 1e-5, name


def test_argmax_argmin_tie_break_lowest_index():
    assert tn.argmax(np.array([0.2, 0.9, 0.9])) == 1
    assert tn.argmin(np.array([0.5, 0.1, 0.1])) == 1


def test_mirror_examples():
    out = tn.mirror(tn.const([[1.0, 0.0]]), tn.const([[-1.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[-1.0, 0.0]])
    # zero key passes through
    out = tn.mirror(tn.const([[1.0, 2.0]]), tn.const([[0.0, 0.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_matmul_is_linear(seed):
    r = np.random.default_rng(seed)
    a, b, c = r.uniform(-1, 1, (3, 4)), r.uniform(-1, 1, (4, 2)), r.uniform(-1, 1, (4, 2))
    lhs = tn.matmul(tn.const(a), tn.add(tn.const(b), tn.const(c))).data
    rhs = tn.matmul(tn.const(a), tn.const(b)).data + tn.matmul(tn.const(a), tn.const(c)).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_forward_is_deterministic(rng):
    a = rng.uniform(-1, 1, (5, 7))
    w = rng.uniform(-1, 1, (7, 3))
    runs = [tn.softmax(tn.tanh(tn.matmul(tn.const(a), tn.const(w)))).data for _ in range(3)]
    assert all(np.array_equal(runs[0], r) for r in runs[1:])


def test_first_nonfinite_names_op():
    tape = tn.Tape()
    a = tape.param(np.array([1.0, -1.0]), "a")
    b = tn.rowwise_l2norm(tn.reshape(a, (1, 2)))
    c = tn.scale(b, np.inf)
    with np.errstate(invalid="ignore"):
        tn.sub(c, c)
    bad = tn.first_nonfinite(tape)
    assert bad is not None and bad.op == "scale"
