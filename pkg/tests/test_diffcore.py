import numpy as np
import pytest

from abcran import diffcore as dc
from fdcheck import check_graph, primitive_cases, random_composite, rel_err, numeric_grad

def test_square_gradient():
    tape = dc.Tape()
    x = tape.leaf(3.0)
    dc.backward(tape, dc.square(x))
    assert tape.grad(x) == 6.0


def test_linear_form_gradient():
    tape = dc.Tape()
    w = dc.Parameter("w", np.array([1.0, -2.0, 0.5]))
    x = np.array([4.0, 5.0, 6.0])
    grads = dc.backward(tape, dc.sum_(tape.param(w) * x))
    np.testing.assert_array_equal(grads["w"], x)


def test_mean_gradient_uniform():
    tape = dc.Tape()
    x = tape.leaf(np.arange(5.0))
    dc.backward(tape, dc.mean(x))
    np.testing.assert_array_equal(tape.grad(x), np.full(5, 0.2))


def test_conv1d_same_padding_shape():
    tape = dc.Tape()
    y = dc.conv1d(tape.leaf(np.ones((1, 1, 5))), tape.leaf(np.ones((1, 1, 3))), tape.leaf(np.zeros(1)), 1, 1)
    assert y.shape == (1, 1, 5)
    np.testing.assert_array_equal(y.value[0, 0], [2, 3, 3, 3, 2])


def test_conv1d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 9)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    tape = dc.Tape()
    y = dc.conv1d(tape.constant(x), tape.constant(w), tape.constant(b), stride=2, padding=1).value
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
    ref = np.zeros_like(y)
    for n in range(2):
        for o in range(4):
            for l in range(y.shape[2]):
                ref[n, o, l] = b[o] + np.sum(w[o] * xp[n, :, 2 * l:2 * l + 3])
    np.testing.assert_allclose(y, ref, rtol=1e-13)


@pytest.mark.parametrize("seed", range(100))
def test_every_primitive_gradient(seed):
    rng = np.random.default_rng(seed)
    for name, build, inputs in primitive_cases(rng):
        err = check_graph(build, inputs, seed)
        assert err < 1e-5, (name, err)


@pytest.mark.parametrize("seed", range(30))
def test_random_composite_gradient(seed):
    build, inputs = random_composite(np.random.default_rng(1000 + seed))
    assert check_graph(build, inputs, seed) < 1e-5


def test_maxpool_tie_goes_to_lowest_index():
    tape = dc.Tape()
    x = tape.leaf(np.array([[[2.0, 2.0, 1.0, 1.0, 5.0, 3.0]]]))
    y = dc.maxpool1d(x, 2)
    np.testing.assert_array_equal(y.value, [[[2.0, 1.0, 5.0]]])
    dc.backward(tape, dc.sum_(y))
    np.testing.assert_array_equal(tape.grad(x), [[[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]]])


def test_sqrt_guard():
    tape = dc.Tape()
    x = tape.leaf(np.array([0.0, 4.0]))
    y = dc.sqrt(x)
    dc.backward(tape, dc.sum_(y))
    assert y.value[0] == np.sqrt(dc.SQRT_EPS)
    np.testing.assert_array_equal(tape.grad(x), [0.0, 0.25])


def test_lstm_zero_weights_give_zero_state():
    tape = dc.Tape()
    x = tape.constant(np.random.default_rng(0).normal(size=(3, 2)))
    h0 = tape.constant(np.zeros((3, 4)))
    h, c = dc.lstm_cell(x, h0, h0, tape.constant(np.zeros((6, 16))), tape.constant(np.zeros(16)))
    assert np.all(h.value == 0) and np.all(c.value == 0)


def test_lstm_saturated_forget_gate():
    rng = np.random.default_rng(1)
    hidden = 3
    w = rng.normal(size=(2 + hidden, 4 * hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 100.0
    x, h0, c0 = rng.normal(size=(2, 2)), rng.normal(size=(2, hidden)), rng.normal(size=(2, hidden))
    tape = dc.Tape()
    _, c = dc.lstm_cell(tape.constant(x), tape.constant(h0), tape.constant(c0), tape.constant(w), tape.constant(b))
    z = np.concatenate([x, h0], axis=1) @ w + b
    i = 1 / (1 + np.exp(-z[:, :hidden]))
    g = np.tanh(z[:, 2 * hidden:3 * hidden])
    np.testing.assert_allclose(c.value, c0 + i * g, rtol=1e-12, atol=1e-12)


def test_lstm_gradient_check():
    rng = np.random.default_rng(2)
    hidden, width = 4, 4
    inputs = [rng.normal(size=(2, width)), rng.normal(size=(2, hidden)), rng.normal(size=(2, hidden)),
              rng.normal(size=(width + hidden, 4 * hidden)) * 0.5, rng.normal(size=4 * hidden) * 0.5]

    def build(tape, x, h, c, w, b):
        h1, c1 = dc.lstm_cell(x, h, c, w, b)
        return dc.concat([h1, c1], axis=-1)

    assert check_graph(build, inputs) < 1e-5


def test_attention_single_key_returns_value():
    rng = np.random.default_rng(3)
    tape = dc.Tape()
    v = rng.normal(size=(2, 1, 5))
    ctx = dc.dot_attention(tape.constant(rng.normal(size=(2, 3))), tape.constant(rng.normal(size=(2, 1, 3))), tape.constant(v))
    np.testing.assert_array_equal(ctx.value, v[:, 0, :])


def test_attention_orthogonal_query_uniform_weights():
    tape = dc.Tape()
    q = np.array([[1.0, 0.0, 0.0]])
    keys = np.array([[[0.0, 1.0, 0.0], [0.0, 0.0, 2.0], [0.0, -3.0, 1.0], [0.0, 0.0, 0.0]]])
    vals = np.random.default_rng(4).normal(size=(1, 4, 2))
    ctx = dc.dot_attention(tape.constant(q), tape.constant(keys), tape.constant(vals))
    np.testing.assert_allclose(ctx.value, vals.mean(axis=1), rtol=1e-14)


def test_attention_gradient_check():
    rng = np.random.default_rng(5)
    inputs = [rng.normal(size=(2, 3)), rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 4))]
    assert check_graph(lambda t, q, k, v: dc.dot_attention(q, k, v), inputs) < 1e-5


def test_attention_empty_sequence():
    tape = dc.Tape()
    with pytest.raises(ValueError):
        dc.dot_attention(tape.constant(np.ones((1, 2))), tape.constant(np.ones((1, 0, 2))), tape.constant(np.ones((1, 0, 2))))


def test_backward_twice_is_an_error():
    tape = dc.Tape()
    x = tape.leaf(2.0)
    y = dc.square(x)
    dc.backward(tape, y)
    with pytest.raises(dc.TapeError):
        dc.backward(tape, y)


def test_non_scalar_output_rejected():
    tape = dc.Tape()
    with pytest.raises(dc.TapeError):
        dc.backward(tape, dc.square(tape.leaf(np.ones(3))))


def test_use_after_reset():
    tape = dc.Tape()
    x = tape.leaf(np.ones(3))
    tape.reset()
    with pytest.raises(dc.TapeError):
        dc.square(x)
    # the tape itself is reusable after a reset
    y = tape.leaf(2.0)
    dc.backward(tape, dc.square(y))
    assert tape.grad(y) == 4.0


def test_non_finite_is_a_hard_error():
    tape = dc.Tape()
    x = tape.leaf(np.array([1e200]))
    with pytest.raises(dc.NonFiniteError), np.errstate(over="ignore"):
        dc.square(x)


@pytest.mark.parametrize("op", [
    lambda t: dc.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3)))),
    lambda t: dc.add(t.leaf(np.ones((2, 3))), t.leaf(np.ones((3, 2)))),
    lambda t: dc.conv1d(t.leaf(np.ones((1, 2, 5))), t.leaf(np.ones((1, 3, 3))), t.leaf(np.zeros(1))),
    lambda t: dc.dense(t.leaf(np.ones((2, 3))), t.leaf(np.ones((4, 2))), t.leaf(np.zeros(2))),
])
def test_shape_mismatch(op):
    with pytest.raises(ValueError):
        op(dc.Tape())


def test_parameter_gradients_and_untrainable():
    tape = dc.Tape()
    a = dc.Parameter("a", np.array([1.0, 2.0]))
    frozen = dc.Parameter("frozen", np.array([3.0, 4.0]), trainable=False)
    loss = dc.sum_(tape.param(a) * tape.param(frozen))
    grads = dc.backward(tape, loss)
    assert set(grads) == {"a"}
    np.testing.assert_array_equal(grads["a"], [3.0, 4.0])


def test_duplicate_parameter_names():
    with pytest.raises(ValueError):
        dc.parameters_by_name([dc.Parameter("p", np.zeros(1)), dc.Parameter("p", np.zeros(2))])


def test_fan_out_accumulates():
    tape = dc.Tape()
    x = tape.leaf(np.array([1.5, -2.0]))
    y = dc.sum_(x * x + dc.tanh(x) + x)
    dc.backward(tape, y)
    xv = np.array([1.5, -2.0])
    np.testing.assert_allclose(tape.grad(x), 2 * xv + (1 - np.tanh(xv) ** 2) + 1, rtol=1e-14)


def test_determinism():
    def run():
        rng = np.random.default_rng(7)
        build, inputs = random_composite(rng)
        tape = dc.Tape()
        leaves = [tape.leaf(v) for v in inputs]
        out = dc.sum_(build(tape, *leaves))
        dc.backward(tape, out)
        return out.value.tobytes(), [tape.grad(l).tobytes() for l in leaves]

    assert run() == run()


def test_numeric_grad_oracle_itself():
    x = np.array([0.3, -1.2])
    g = numeric_grad(lambda: float(np.sum(np.sin(x))), x)
    assert rel_err(g, np.cos(x)) < 1e-9
