import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sbnmt import tensor as T
from sbnmt.tensor import NonFiniteError, ShapeError, Tensor, finite_difference_check


def leaf(x):
    return Tensor(x, requires_grad=True)


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_hand_value():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_zero():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert not T.matmul(a, Tensor(np.zeros((4, 2)))).data.any()


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_batch_broadcast_error():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 4, 5))))


@pytest.mark.parametrize("ashape,bshape", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 2)),
                                           ((1, 3, 4), (2, 4, 2))])
def test_matmul_gradients(ashape, bshape):
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=ashape), rng.normal(size=bshape)
    assert finite_difference_check(lambda x: T.tsum(T.mul(T.matmul(x, Tensor(b)), T.matmul(x, Tensor(b)))), a) < 1e-6
    assert finite_difference_check(lambda y: T.tsum(T.tanh(T.matmul(Tensor(a), y))), b) < 1e-6


# ---------------------------------------------------------------- softmax / log_softmax

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([2.5, 2.5, 2.5])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_closed_form():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_large_inputs_stable():
    y = T.softmax(Tensor([1000.0, 1000.0])).data
    np.testing.assert_allclose(y, [0.5, 0.5])


def test_softmax_mask_excludes_entries():
    y = T.softmax(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).data
    assert y[0, 1] == 0.0
    assert y.sum() == pytest.approx(1.0)


def test_softmax_fully_masked_row_is_error():
    with pytest.raises(ValueError):
        T.softmax(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite),
       st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = T.softmax(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(T.softmax(Tensor(x + c)).data, y, atol=1e-12)


def test_softmax_then_sum_of_squares_gradient():
    x = np.random.default_rng(3).normal(size=3)
    err = finite_difference_check(lambda t: T.tsum(T.mul(T.softmax(t), T.softmax(t))), x)
    assert err < 1e-6


def test_log_softmax_matches_log_of_softmax():
    x = np.random.default_rng(4).normal(size=(3, 5))
    np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, np.log(T.softmax(Tensor(x)).data), atol=1e-14)
    assert finite_difference_check(lambda t: T.tsum(T.mul(T.log_softmax(t), Tensor(x))), x) < 1e-6


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_row_is_zero():
    y = T.layer_norm(Tensor([[2.0, 2.0, 2.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    np.testing.assert_array_equal(y, np.zeros((1, 3)))


def test_layer_norm_two_values():
    y = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-6).data
    np.testing.assert_allclose(y, [-1.0, 1.0], atol=1e-6)


def test_layer_norm_zero_gain_returns_bias():
    b = np.array([0.5, -1.0, 2.0])
    y = T.layer_norm(Tensor(np.random.default_rng(0).normal(size=(4, 3))), Tensor(np.zeros(3)), Tensor(b)).data
    np.testing.assert_array_equal(y, np.broadcast_to(b, (4, 3)))


def test_layer_norm_shape_error():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=finite))
def test_layer_norm_unit_gain_centres_rows(x):
    d = x.shape[-1]
    y = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-6


def test_layer_norm_gradients_all_inputs():
    rng = np.random.default_rng(5)
    x, g, b = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4)
    w = rng.normal(size=(3, 4))
    f = lambda gx, gg, gb: T.tsum(T.mul(T.layer_norm(gx, gg, gb), Tensor(w)))
    assert finite_difference_check(lambda t: f(t, Tensor(g), Tensor(b)), x) < 1e-6
    assert finite_difference_check(lambda t: f(Tensor(x), t, Tensor(b)), g) < 1e-6
    assert finite_difference_check(lambda t: f(Tensor(x), Tensor(g), t), b) < 1e-6


# ---------------------------------------------------------------- elementwise

def test_elementwise_values():
    assert T.elementwise("tanh", Tensor(0.0)).item() == 0.0
    assert T.elementwise("sigmoid", Tensor(0.0)).item() == 0.5
    assert T.elementwise("relu", Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert T.elementwise("add", Tensor([1.0]), Tensor([2.0])).data.tolist() == [3.0]
    assert T.elementwise("mul", Tensor([[1.0], [2.0]]), Tensor([3.0, 4.0])).data.tolist() == [[3, 4], [6, 8]]


def test_elementwise_unknown_op():
    with pytest.raises(ValueError):
        T.elementwise("cos", Tensor(1.0))


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        T.elementwise("add", Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_relu_subgradient_zero_at_zero():
    x = leaf([0.0, 1.0, -1.0])
    T.tsum(T.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_sigmoid_extreme_inputs_finite():
    y = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert y.tolist() == [0.0, 1.0]


@pytest.mark.parametrize("op", ["tanh", "sigmoid", "exp"])
def test_unary_gradients(op):
    x = np.random.default_rng(6).normal(size=(2, 3))
    fn = getattr(T, op)
    assert finite_difference_check(lambda t: T.tsum(T.mul(fn(t), fn(t))), x) < 1e-6


def test_relu_gradient_away_from_kink():
    x = np.array([-1.2, -0.3, 0.4, 2.0])
    assert finite_difference_check(lambda t: T.tsum(T.mul(T.relu(t), Tensor([1.0, 2.0, 3.0, 4.0]))), x) < 1e-6


def test_broadcast_add_mul_div_gradients():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,)) + 3.0
    assert finite_difference_check(lambda t: T.tsum(T.mul(T.add(Tensor(a), t), Tensor(a))), b) < 1e-6
    assert finite_difference_check(lambda t: T.tsum(T.div(Tensor(a), t)), b) < 1e-6
    assert finite_difference_check(lambda t: T.tsum(T.mul(T.sub(t, Tensor(b)), t)), a) < 1e-6
    assert finite_difference_check(lambda t: T.tsum(T.log(T.add(T.mul(t, t), Tensor(1.0)))), a) < 1e-6


def test_shape_op_gradients():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 3, 2))
    assert finite_difference_check(lambda t: T.tsum(T.mul(T.transpose(t, (2, 1, 0)), Tensor(w))), x) < 1e-6
    assert finite_difference_check(lambda t: T.tsum(T.mul(T.reshape(t, (4, 3, 2)), Tensor(w))), x) < 1e-6
    assert finite_difference_check(lambda t: T.tsum(T.mul(t[:, 1:, ::2], t[:, 1:, ::2])), x) < 1e-6
    assert finite_difference_check(lambda t: T.tsum(T.mul(T.concat([t, t[:1]], axis=0), T.concat([t, t[:1]], axis=0))), x) < 1e-6
    assert finite_difference_check(lambda t: T.tsum(T.mul(T.mean(t, axis=1), T.mean(t, axis=1))), x) < 1e-6


def test_embedding_gradient_accumulates_repeated_rows():
    w = leaf(np.arange(6.0).reshape(3, 2))
    out = T.embedding(w, np.array([[0, 2, 0]]))
    T.tsum(out).backward()
    np.testing.assert_array_equal(w.grad, [[2, 2], [0, 0], [1, 1]])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(leaf(np.ones((3, 2))), np.array([3]))


def test_fancy_getitem_gradient_accumulates():
    x = leaf([1.0, 2.0, 3.0])
    T.tsum(x[np.array([0, 0, 2])]).backward()
    assert x.grad.tolist() == [2.0, 0.0, 1.0]


# ---------------------------------------------------------------- dropout

def test_dropout_eval_is_identity():
    x = Tensor(np.ones(5))
    assert T.dropout(x, 0.5, None, train=False) is x


def test_dropout_inverted_scaling_and_seeded():
    x = Tensor(np.ones(10000))
    a = T.dropout(x, 0.25, np.random.default_rng(0), train=True).data
    b = T.dropout(x, 0.25, np.random.default_rng(0), train=True).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1 / 0.75}
    assert abs(a.mean() - 1.0) < 0.05


def test_dropout_requires_rng_in_train_mode():
    with pytest.raises(ValueError):
        T.dropout(Tensor(np.ones(3)), 0.1, None, train=True)


# ---------------------------------------------------------------- loss

def test_cross_entropy_uniform_logits_is_log_v():
    V = 7
    logits = Tensor(np.zeros((5, V)))
    targets = np.array([0, 1, 2, 3, 4])
    assert T.cross_entropy_label_smoothed(logits, targets, 0.0).item() == pytest.approx(math.log(V), abs=1e-12)


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5, 0.9])
def test_cross_entropy_uniform_logits_any_smoothing(eps):
    V = 11
    val = T.cross_entropy_label_smoothed(Tensor(np.full((4, V), 3.0)), np.array([1, 2, 3, 4]), eps).item()
    assert val == pytest.approx(math.log(V), abs=1e-12)


def test_cross_entropy_confident_correct_is_zero():
    logits = np.full((3, 4), -1e4)
    t = np.array([0, 3, 1])
    logits[np.arange(3), t] = 1e4
    assert T.cross_entropy_label_smoothed(Tensor(logits), t, 0.0).item() == 0.0


def test_cross_entropy_excludes_pad():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(4, 6))
    full = T.cross_entropy_label_smoothed(Tensor(z[:2]), np.array([3, 4]), 0.1).item()
    padded = T.cross_entropy_label_smoothed(Tensor(z), np.array([3, 4, 0, 0]), 0.1, pad_id=0).item()
    assert padded == pytest.approx(full, abs=1e-14)


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        T.cross_entropy_label_smoothed(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(10)
    z = rng.normal(size=(2, 3, 5))
    t = np.array([[1, 2, 0], [4, 0, 0]])
    for red in ("mean", "sum"):
        err = finite_difference_check(lambda x: T.cross_entropy_label_smoothed(x, t, 0.1, 0, reduction=red), z)
        assert err < 1e-6


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = leaf(np.arange(4.0))
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_backward_square_gives_2x():
    x = leaf([1.0, -2.0, 3.5])
    T.tsum(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, -4.0, 7.0])


def test_unused_parameter_zero_after_zero_grad():
    x, unused = leaf([1.0]), leaf([5.0])
    T.parameters_zero_grad([x, unused])
    T.tsum(T.mul(x, 3.0)).backward()
    assert unused.grad.tolist() == [0.0]
    assert x.grad.tolist() == [3.0]


def test_backward_non_scalar_error():
    with pytest.raises(ShapeError):
        T.mul(leaf([1.0, 2.0]), 2.0).backward()


def test_shared_subgraph_visited_once():
    x = leaf([2.0])
    y = T.mul(x, x)  # reused twice below
    T.tsum(T.add(y, y)).backward()
    assert x.grad.tolist() == [8.0]


def test_backward_accumulates_across_calls():
    x = leaf([1.0])
    T.tsum(T.mul(x, 2.0)).backward()
    T.tsum(T.mul(x, 3.0)).backward()
    assert x.grad.tolist() == [5.0]


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_backward_is_linear(a, b, seed):
    x0 = np.random.default_rng(seed).normal(size=4)

    def grad(fn):
        x = leaf(x0)
        fn(x).backward()
        return x.grad

    l1 = lambda x: T.tsum(T.tanh(x))
    l2 = lambda x: T.tsum(T.mul(x, x))
    combined = grad(lambda x: T.add(T.mul(l1(x), a), T.mul(l2(x), b)))
    np.testing.assert_allclose(combined, a * grad(l1) + b * grad(l2), atol=1e-6)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad
    assert T.grad_enabled()


def test_non_finite_output_names_operation():
    with pytest.raises(NonFiniteError, match="log"):
        T.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_deterministic_bitwise():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
    r1 = T.softmax(T.matmul(Tensor(a), Tensor(b))).data
    r2 = T.softmax(T.matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


# ---------------------------------------------------------------- finite differences

def test_finite_difference_of_sum_is_exact():
    assert finite_difference_check(lambda t: T.tsum(t), np.random.default_rng(0).normal(size=5)) < 1e-9


def test_finite_difference_detects_wrong_gradient():
    def broken(x):
        out = T.tsum(T.mul(x, x))
        out._backward = lambda g: (np.zeros(()),)
        return out

    assert finite_difference_check(broken, np.ones(3)) > 0.5
