import numpy as np
import pytest

from attlist.errors import (
    ConfigurationError,
    DegenerateInputError,
    DeterminismError,
    DimensionError,
    UninitializedGradientError,
)
from attlist.services import tensor
from attlist.services.tensor import (
    AdamState,
    ComputeTape,
    Tensor,
    adam_step,
    add,
    concat,
    dropout,
    gather,
    gradient_check,
    log_sigmoid,
    make_rng,
    matmul,
    multiply,
    pointwise,
    reduce_sum,
    relu,
    reshape,
    row_softmax,
    sigmoid,
    tanh,
)


def param(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def test_tensor_rejects_rank_four():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((1, 1, 1, 1)))


def test_matmul_identity():
    out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[2], [3]]))
    assert out.values.tolist() == [[2.0], [3.0]]


def test_matmul_dot_product():
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).values.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradients_match_finite_differences():
    rng = make_rng(7)
    a = param(rng.normal(size=(3, 4)))
    b = param(rng.normal(size=(4, 2)))
    weights = Tensor(rng.normal(size=(3, 2)))

    report = gradient_check(
        lambda: reduce_sum(multiply(matmul(a, b), weights)), {"a": a, "b": b}, tolerance=1e-6
    )
    assert report.passed
    assert report.max_error <= 1e-6


def test_batched_matmul_with_shared_matrix():
    """A (B, m, k) batch times one (k, n) matrix sums the matrix gradient over the batch."""
    rng = make_rng(8)
    a = param(rng.normal(size=(2, 3, 4)))
    b = param(rng.normal(size=(4, 2)))
    report = gradient_check(lambda: reduce_sum(reshape(matmul(a, b), (12,))), {"a": a, "b": b})
    assert report.passed


def test_row_softmax_equal_logits():
    assert np.allclose(row_softmax(Tensor([[0.0, 0.0]])).values, [[0.5, 0.5]])


def test_row_softmax_values():
    out = row_softmax(Tensor([[1.0, 0.0]])).values
    assert out[0] == pytest.approx([0.7311, 0.2689], abs=1e-4)


def test_row_softmax_masked_position_is_exactly_zero():
    out = row_softmax(Tensor([[5.0, 9.0]]), mask=np.array([[True, False]])).values
    assert out.tolist() == [[1.0, 0.0]]


def test_row_softmax_fully_masked_row():
    with pytest.raises(DegenerateInputError):
        row_softmax(Tensor([[1.0, 2.0], [3.0, 4.0]]), mask=np.array([[True, True], [False, False]]))


def test_row_softmax_large_logits_stay_finite():
    out = row_softmax(Tensor([[1000.0, 999.0, -1000.0]])).values
    assert np.isfinite(out).all()
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


def test_row_softmax_gradient():
    rng = make_rng(9)
    x = param(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)
    report = gradient_check(lambda: reduce_sum(multiply(row_softmax(x, mask), w)), {"x": x})
    assert report.passed


def test_pointwise_basics():
    assert sigmoid(Tensor([0.0])).values[0] == 0.5
    assert tanh(Tensor([0.0])).values[0] == 0.0
    assert relu(Tensor([-3.0])).values[0] == 0.0


def test_relu_gradient_in_dead_region():
    x = param([-3.0])
    with ComputeTape() as tape:
        tape.backward(reduce_sum(relu(x)))
    assert x.grad.tolist() == [0.0]


def test_pointwise_dispatch():
    out = pointwise("scale", Tensor([2.0]), factor=0.5)
    assert out.values.tolist() == [1.0]
    with pytest.raises(ConfigurationError):
        pointwise("softplus", Tensor([1.0]))


def test_add_shape_mismatch():
    with pytest.raises(DimensionError):
        add(Tensor([1.0, 2.0]), Tensor([1.0]))


def test_sigmoid_stays_inside_open_interval():
    out = sigmoid(Tensor([-1000.0, 1000.0])).values
    assert 0.0 < out[0] and out[1] < 1.0


def test_log_sigmoid_is_stable():
    out = log_sigmoid(Tensor([-1000.0, 0.0, 1000.0])).values
    assert out[0] == pytest.approx(-1000.0)
    assert out[1] == pytest.approx(np.log(0.5))
    assert out[2] == pytest.approx(0.0)


def test_gather_and_concat_gradients():
    rng = make_rng(10)
    table = param(rng.normal(size=(5, 3)))
    other = param(rng.normal(size=(4, 2)))
    ids = np.array([0, 3, 3, 4])

    def loss():
        rows = concat([gather(table, ids), other], axis=-1)
        return reduce_sum(reshape(multiply(rows, rows), (20,)))

    assert gradient_check(loss, {"table": table, "other": other}).passed


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        gather(Tensor(np.zeros((3, 2))), np.array([3]))


def test_no_recording_outside_a_tape():
    x = param([1.0, 2.0])
    y = reduce_sum(multiply(x, x))
    assert y.values == 5.0
    assert x.grad is None


def test_tape_records_in_execution_order():
    x = param([1.0])
    with ComputeTape() as tape:
        y = tanh(x)
        reduce_sum(sigmoid(y))
    assert [r.op for r in tape.records] == ["tanh", "sigmoid", "reduce_sum"]


# dropout

def test_dropout_rate_zero_is_identity():
    x = Tensor(np.arange(6.0))
    out = dropout(x, 0.0, training=True, rng=make_rng(0))
    assert np.array_equal(out.values, x.values)


def test_dropout_inference_is_identity():
    x = Tensor(np.arange(6.0))
    assert dropout(x, 0.5, training=False) is x


def test_dropout_is_deterministic_per_seed():
    x = Tensor(np.ones(100))
    first = dropout(x, 0.5, training=True, rng=make_rng(4, 1)).values
    second = dropout(x, 0.5, training=True, rng=make_rng(4, 1)).values
    assert np.array_equal(first, second)


def test_dropout_preserves_expectation():
    x = Tensor(np.ones(100_000))
    out = dropout(x, 0.3, training=True, rng=make_rng(5)).values
    assert out.mean() == pytest.approx(1.0, abs=0.02)


def test_dropout_rejects_bad_rate():
    with pytest.raises(ConfigurationError):
        dropout(Tensor([1.0]), 1.0, training=True, rng=make_rng(0))


# adam

def test_adam_zero_gradient_leaves_params():
    p = param([1.5, -2.0])
    p.accumulate(np.zeros(2))
    adam_step({"p": p}, AdamState())
    assert p.values.tolist() == [1.5, -2.0]


def test_adam_first_step_is_lr_sized():
    p = param([0.0])
    p.accumulate(np.array([1.0]))
    state = adam_step({"p": p}, AdamState(lr=0.001))
    assert p.values[0] == pytest.approx(-0.001, abs=1e-9)
    assert state.step == 1
    assert p.grad is None


def test_adam_converges_on_quadratic():
    x = param([0.0])
    state = AdamState(lr=0.01)
    for _ in range(2000):
        with ComputeTape() as tape:
            diff = add(x, Tensor([-3.0]))
            tape.backward(reduce_sum(multiply(diff, diff)))
        adam_step({"x": x}, state)
    assert x.values[0] == pytest.approx(3.0, abs=0.01)
    assert state.step == 2000


def test_adam_requires_every_gradient():
    a, b = param([1.0]), param([2.0])
    a.accumulate(np.array([1.0]))
    with pytest.raises(UninitializedGradientError):
        adam_step({"a": a, "b": b}, AdamState())
    # nothing moved
    assert a.values[0] == 1.0


# gradient check

def test_gradient_check_sum_of_params():
    a, b = param([1.0, 2.0]), param([[3.0], [4.0]])
    report = gradient_check(lambda: add(reduce_sum(a), reduce_sum(b)), {"a": a, "b": b})
    assert report.max_error == pytest.approx(0.0, abs=1e-9)


def test_gradient_check_catches_a_wrong_backward_rule():
    x = param([0.5, -1.5, 2.0])

    def bad_square(t):
        # the true derivative is 2 * x
        return tensor._emit("bad_square", t.values ** 2, (t,), lambda g: tensor._send(t, g * t.values))

    report = gradient_check(lambda: reduce_sum(bad_square(x)), {"x": x})
    assert not report.passed


def test_gradient_check_rejects_nondeterministic_loss():
    x = param([1.0])
    calls = []

    def loss():
        calls.append(1)
        return reduce_sum(multiply(x, Tensor([float(len(calls))])))

    with pytest.raises(DeterminismError):
        gradient_check(loss, {"x": x})
