"""A small define-by-run reverse-mode autodiff engine over float64 arrays.

A :class:`Tape` records every operation in creation order, which is already a
topological order of the graph, so :func:`backward` simply walks the record in
reverse.  A tape is single use: after one backward pass it must be reset (or
discarded) before another.

Only the primitives the autoencoder and its losses need are provided.
Binary elementwise ops broadcast numpy-style; every op checks that its output
is finite and raises :class:`NonFiniteError` otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

SQRT_EPS = 1e-30


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a tape (second backward, use after reset, non-scalar output)."""


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    trainable: bool = True

    def __post_init__(self) -> None:
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class Tensor:
    __slots__ = ("value", "tape", "parents", "backward_fn", "op", "index", "requires_grad", "param")

    def __init__(self, value, tape, parents=(), backward_fn=None, op="leaf", requires_grad=False, param=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.param = param
        self.index = tape._append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


class Tape:
    def __init__(self) -> None:
        self._nodes: list[Tensor] = []
        self._params: dict[int, Tensor] = {}
        self._grads: dict[int, np.ndarray] = {}
        self._state = "recording"

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, node: Tensor) -> int:
        if self._state != "recording":
            raise TapeError(f"tape is {self._state}; reset it before recording")
        self._nodes.append(node)
        return len(self._nodes) - 1

    def leaf(self, value, requires_grad: bool = True) -> Tensor:
        return Tensor(_as_array(value), self, op="leaf", requires_grad=requires_grad)

    def constant(self, value) -> Tensor:
        return Tensor(_as_array(value), self, op="const", requires_grad=False)

    def param(self, p: Parameter) -> Tensor:
        """Leaf for a parameter; repeated calls return the same node."""
        node = self._params.get(id(p))
        if node is None or node.param is not p:
            node = Tensor(p.value, self, op="param", requires_grad=p.trainable, param=p)
            self._params[id(p)] = node
        return node

    def grad(self, t: Tensor) -> np.ndarray:
        if self._state != "done":
            raise TapeError("no backward pass has been run on this tape")
        g = self._grads.get(t.index)
        return np.zeros_like(t.value) if g is None else g

    def reset(self) -> None:
        for node in self._nodes:
            node.tape = None
        self._nodes = []
        self._params = {}
        self._grads = {}
        self._state = "recording"


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise TapeError("operands live on different (or reset) tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            if x.tape is None:
                raise TapeError("tensor belongs to a tape that was reset")
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


def _check(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite output from {op}")
    return value


def _node(op: str, value, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = _tape_of(*parents)
    value = _check(np.asarray(value, dtype=np.float64), op)
    req = any(p.requires_grad for p in parents)
    return Tensor(value, tape, tuple(parents), backward_fn if req else None, op, req)


def custom_op(op: str, value, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Record an op whose vector-Jacobian product is supplied by the caller.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    """
    tape = _tape_of(*parents)
    parents = [_lift(p, tape) for p in parents]
    return _node(op, value, parents, backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        return (_unbroadcast(g, sa) if ra else None, _unbroadcast(g, sb) if rb else None)

    return _node("add", a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        return (_unbroadcast(g, sa) if ra else None, _unbroadcast(-g, sb) if rb else None)

    return _node("sub", a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    ra, rb = a.requires_grad, b.requires_grad

    def backward(g):
        return (
            _unbroadcast(g * bv, av.shape) if ra else None,
            _unbroadcast(g * av, bv.shape) if rb else None,
        )

    return _node("mul", av * bv, (a, b), backward)


def square(x: Tensor) -> Tensor:
    xv = x.value
    return _node("square", xv * xv, (x,), lambda g: (2.0 * xv * g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _node("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split form avoids overflow warnings for large |x|
    xv = x.value
    e = np.exp(-np.abs(xv))
    y = np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _node("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sqrt(x: Tensor, eps: float = SQRT_EPS) -> Tensor:
    """``sqrt(max(x, eps))``; the gradient is zero where the guard is active."""
    live = x.value > eps
    y = np.sqrt(np.maximum(x.value, eps))
    return _node("sqrt", y, (x,), lambda g: (np.where(live, g / (2.0 * y), 0.0),))


# ----------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    y = x.value.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _node("sum", y, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape
    y = x.value.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _node("mean", y, (x,), backward)


def variance(x: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    """Population variance (divide by n)."""
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    centered = x.value - x.value.mean(axis=axes, keepdims=True)
    y = (centered * centered).mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (2.0 * centered * g / n,)

    return _node("variance", y, (x,), backward)


# ----------------------------------------------------------------------------
# shape manipulation

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node("transpose", np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def slice_(x: Tensor, idx) -> Tensor:
    """Basic indexing only (ints, slices, Ellipsis, None)."""
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[idx] += g
        return (out,)

    return _node("slice", x.value[idx], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    axis = axis % xs[0].ndim
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _node("concat", np.concatenate([x.value for x in xs], axis=axis), xs, backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    axis = axis % (xs[0].ndim + 1)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _node("stack", np.stack([x.value for x in xs], axis=axis), xs, backward)


# ----------------------------------------------------------------------------
# linear algebra and layers

def matmul(a, b) -> Tensor:
    """``a @ b`` for 2D or batched (broadcast leading dims) operands."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _node("matmul", av @ bv, (a, b), backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` over the last axis of ``x``."""
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[0] or b.shape != (wv.shape[1],):
        raise ValueError(f"dense shape mismatch: x{xv.shape} w{wv.shape} b{b.shape}")
    x2 = xv.reshape(-1, xv.shape[-1])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ wv.T).reshape(xv.shape), x2.T @ g2, g2.sum(axis=0)

    return _node("dense", xv @ wv + b.value, (x, w, b), backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x [B, Cin, L]`` with ``w [Cout, Cin, K]`` plus ``b [Cout]``."""
    xv, wv = x.value, w.value
    if xv.ndim != 3 or wv.ndim != 3 or xv.shape[1] != wv.shape[1] or b.shape != (wv.shape[0],):
        raise ValueError(f"conv1d shape mismatch: x{xv.shape} w{wv.shape} b{b.shape}")
    bsz, cin, length = xv.shape
    cout, _, k = wv.shape
    lp = length + 2 * padding
    lout = (lp - k) // stride + 1
    if lout < 1:
        raise ValueError("kernel longer than padded input")
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding))) if padding else xv
    # win[b, c, l, j] = xp[b, c, l*stride + j]
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :][:, :, :lout, :]
    y = np.einsum("bclk,ock->bol", win, wv, optimize=True) + b.value[None, :, None]

    def backward(g):
        gw = np.einsum("bol,bclk->ock", g, win, optimize=True)
        gb = g.sum(axis=(0, 2))
        if not x.requires_grad:
            return None, gw, gb
        gwin = np.einsum("bol,ock->bclk", g, wv, optimize=True)
        gxp = np.zeros((bsz, cin, lp))
        span = stride * (lout - 1) + 1
        for j in range(k):
            gxp[:, :, j:j + span:stride] += gwin[..., j]
        gx = gxp[:, :, padding:padding + length] if padding else gxp
        return gx, gw, gb

    return _node("conv1d", y, (x, w, b), backward)


def maxpool1d(x: Tensor, width: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last axis; ties go to the lowest index."""
    xv = x.value
    *lead, length = xv.shape
    lout = length // width
    win = xv[..., : lout * width].reshape(*lead, lout, width)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        out = np.zeros(xv.shape)
        out[..., : lout * width] = gw.reshape(*lead, lout * width)
        return (out,)

    return _node("maxpool1d", y, (x,), backward)


def upsample1d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling along the last axis."""
    xv = x.value

    def backward(g):
        out = g[..., 0::factor].copy()
        for j in range(1, factor):
            out += g[..., j::factor]
        return (out,)

    return _node("upsample1d", np.repeat(xv, factor, axis=-1), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node("softmax", y, (x,), backward)


def mse(pred: Tensor, target) -> Tensor:
    return mean(square(sub(pred, target)))


# ----------------------------------------------------------------------------
# recurrent and attention blocks

def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step.

    ``w`` has shape ``[in + hidden, 4 * hidden]`` acting on ``concat(x, h_prev)``;
    gate blocks are ordered input, forget, candidate, output.
    """
    hidden = h_prev.shape[-1]
    if w.shape != (x.shape[-1] + hidden, 4 * hidden) or c_prev.shape != h_prev.shape:
        raise ValueError(f"lstm shape mismatch: x{x.shape} h{h_prev.shape} c{c_prev.shape} w{w.shape}")
    z = dense(concat([x, h_prev], axis=-1), w, b)
    i = sigmoid(z[..., :hidden])
    f = sigmoid(z[..., hidden:2 * hidden])
    g = tanh(z[..., 2 * hidden:3 * hidden])
    o = sigmoid(z[..., 3 * hidden:])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def dot_attention(query: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    """Scaled dot-product attention of ``query [B, d]`` over ``keys [B, L, d]``.

    Returns the context ``[B, dv]`` built from ``values [B, L, dv]``.
    """
    if keys.ndim != 3 or keys.shape[1] == 0:
        raise ValueError("attention needs a nonempty key sequence")
    bsz, d = query.shape
    if keys.shape[0] != bsz or keys.shape[2] != d or values.shape[:2] != keys.shape[:2]:
        raise ValueError(f"attention shape mismatch: q{query.shape} k{keys.shape} v{values.shape}")
    scores = reshape(matmul(keys, reshape(query, (bsz, d, 1))), (bsz, 1, keys.shape[1]))
    weights = softmax(scores / np.sqrt(d), axis=-1)
    return reshape(matmul(weights, values), (bsz, values.shape[2]))


# ----------------------------------------------------------------------------

def backward(tape: Tape, output: Tensor) -> dict[str, np.ndarray]:
    """Run the reverse pass from a scalar ``output``.

    Returns gradients of every trainable parameter seen on the tape, keyed by
    parameter name.  Gradients of other leaves are available via ``tape.grad``.
    """
    if output.tape is not tape:
        raise TapeError("output does not belong to this tape")
    if tape._state == "done":
        raise TapeError("backward already ran on this tape; reset it first")
    if output.value.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    tape._state = "done"
    grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
    nodes = tape._nodes
    for idx in range(output.index, -1, -1):
        g = grads.get(idx)
        if g is None:
            continue
        node = nodes[idx]
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.index)
            grads[parent.index] = pg if prev is None else prev + pg
        # interior gradients are not kept
        del grads[idx]
    tape._grads = grads
    out: dict[str, np.ndarray] = {}
    for node in tape._params.values():
        if node.requires_grad:
            g = grads.get(node.index)
            out[node.param.name] = np.zeros_like(node.value) if g is None else g
    return out


def parameters_by_name(params: Iterable[Parameter]) -> dict[str, Parameter]:
    out: dict[str, Parameter] = {}
    for p in params:
        if p.name in out:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        out[p.name] = p
    return out
