"""Central finite-difference oracle and the primitive catalogue used by the gradient tests."""
from __future__ import annotations

import numpy as np

from abcran import diffcore as dc

STEP = 1e-6


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is restored afterwards)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_graph(build, inputs: list[np.ndarray], seed: int = 0) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``build(tape, *tensors)`` returns a tensor; it is contracted with fixed
    random weights to a scalar so every output element matters.
    """
    rng = np.random.default_rng(seed)
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    probe = {}

    def scalar(tape, out):
        if "w" not in probe:
            probe["w"] = rng.normal(size=out.shape)
        return dc.sum_(dc.mul(out, probe["w"]))

    tape = dc.Tape()
    leaves = [tape.leaf(x) for x in inputs]
    loss = scalar(tape, build(tape, *leaves))
    dc.backward(tape, loss)
    analytic = [tape.grad(t).copy() for t in leaves]

    def value():
        t2 = dc.Tape()
        return float(scalar(t2, build(t2, *[t2.constant(x) for x in inputs])).value)

    worst = 0.0
    for x, ga in zip(inputs, analytic):
        worst = max(worst, rel_err(ga, numeric_grad(value, x)))
    return worst


def _shape(rng, ndim, lo=1, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi, size=ndim))


def primitive_cases(rng: np.random.Generator):
    """One random (name, build, inputs) instance of every primitive."""
    s = _shape(rng, 2, 2, 5)
    b, cin, cout = (int(v) for v in rng.integers(1, 4, size=3))
    length = int(rng.integers(4, 9))
    k = int(rng.choice([1, 3, 5]))
    inner = int(rng.integers(1, 5))
    axis = int(rng.integers(0, 2))
    return [
        ("add", lambda t, x, y: dc.add(x, y), [rng.normal(size=s), rng.normal(size=s)]),
        ("add_broadcast", lambda t, x, y: dc.add(x, y), [rng.normal(size=s), rng.normal(size=s[-1:])]),
        ("sub", lambda t, x, y: dc.sub(x, y), [rng.normal(size=s), rng.normal(size=s)]),
        ("mul", lambda t, x, y: dc.mul(x, y), [rng.normal(size=s), rng.normal(size=s)]),
        ("square", lambda t, x: dc.square(x), [rng.normal(size=s)]),
        ("matmul", lambda t, x, y: dc.matmul(x, y), [rng.normal(size=(s[0], inner)), rng.normal(size=(inner, s[1]))]),
        ("matmul_batched", lambda t, x, y: dc.matmul(x, y),
         [rng.normal(size=(2, s[0], inner)), rng.normal(size=(2, inner, s[1]))]),
        ("dense", lambda t, x, w, c: dc.dense(x, w, c),
         [rng.normal(size=(s[0], inner)), rng.normal(size=(inner, s[1])), rng.normal(size=(s[1],))]),
        ("conv1d", lambda t, x, w, c: dc.conv1d(x, w, c, stride=1, padding=k // 2),
         [rng.normal(size=(b, cin, length)), rng.normal(size=(cout, cin, k)), rng.normal(size=(cout,))]),
        ("conv1d_strided", lambda t, x, w, c: dc.conv1d(x, w, c, stride=2, padding=1),
         [rng.normal(size=(b, cin, length)), rng.normal(size=(cout, cin, 3)), rng.normal(size=(cout,))]),
        ("maxpool1d", lambda t, x: dc.maxpool1d(x, 2), [rng.normal(size=(b, cin, length))]),
        ("upsample1d", lambda t, x: dc.upsample1d(x, 2), [rng.normal(size=(b, cin, length))]),
        ("tanh", lambda t, x: dc.tanh(x), [rng.normal(size=s)]),
        ("sigmoid", lambda t, x: dc.sigmoid(x), [3 * rng.normal(size=s)]),
        ("relu", lambda t, x: dc.relu(x), [rng.normal(size=s) + np.sign(rng.normal(size=s)) * 0.01]),
        ("softmax", lambda t, x: dc.softmax(x, axis=axis), [rng.normal(size=s)]),
        ("concat", lambda t, x, y: dc.concat([x, y], axis=axis), [rng.normal(size=s), rng.normal(size=s)]),
        ("stack", lambda t, x, y: dc.stack([x, y], axis=1), [rng.normal(size=s), rng.normal(size=s)]),
        ("slice", lambda t, x: x[..., 1:], [rng.normal(size=s)]),
        ("reshape", lambda t, x: dc.reshape(x, (-1,)), [rng.normal(size=s)]),
        ("transpose", lambda t, x: dc.transpose(x, (1, 0)), [rng.normal(size=s)]),
        ("sum", lambda t, x: dc.sum_(x, axis=axis), [rng.normal(size=s)]),
        ("mean", lambda t, x: dc.mean(x, axis=axis), [rng.normal(size=s)]),
        ("variance", lambda t, x: dc.variance(x, axis=-1), [rng.normal(size=s)]),
        ("sqrt", lambda t, x: dc.sqrt(x), [rng.uniform(0.1, 2.0, size=s)]),
    ]


UNARY_CHAIN = [
    lambda x, w: dc.tanh(x),
    lambda x, w: dc.sigmoid(x),
    lambda x, w: dc.square(x) * 0.5,
    lambda x, w: dc.matmul(x, w),
    lambda x, w: dc.add(x, dc.tanh(x)),
    lambda x, w: dc.softmax(x, axis=-1),
    lambda x, w: dc.mul(x, dc.sigmoid(x)),
]


def random_composite(rng: np.random.Generator):
    """A random chain of up to 6 ops over a square matrix input and weight."""
    n = int(rng.integers(2, 5))
    ops = [UNARY_CHAIN[i] for i in rng.integers(0, len(UNARY_CHAIN), size=int(rng.integers(1, 7)))]

    def build(tape, x, w):
        for op in ops:
            x = op(x, w)
        return x

    return build, [rng.normal(size=(n, n)), rng.normal(size=(n, n)) / n]
