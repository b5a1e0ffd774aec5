"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation on :class:`Tensor` objects performed while a :class:`Tape`
is active is appended to that tape.  :func:`backward` walks the tape in
reverse creation order, which is a valid topological order because a node
can only be created after its inputs.

All values are float64.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand dimensions are inconsistent."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ContractError(RuntimeError):
    """A caller violated an API precondition."""


_ACTIVE: list["Tape"] = []


class Tensor:
    """A float64 array that can take part in gradient computation."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    __array_priority__ = 100.0

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)


def parameter(value, name):
    """Create a leaf tensor that receives gradients."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations for reverse-mode differentiation.

    Use as a context manager; tapes nest, and operations are recorded on the
    innermost active one only.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def _make(value, parents, backward_fn):
    out = Tensor(value)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        _ACTIVE[-1].nodes.append(out)
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` following numpy broadcasting rules."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(tape, loss, params=None):
    """Accumulate d(loss)/d(parameter) for every parameter.

    Parameters
    ----------
    tape : Tape
        The tape that was active while ``loss`` was computed.
    loss : Tensor
        Scalar tensor.
    params : dict[str, Tensor], optional
        Parameters to report.  Parameters not on any path to ``loss`` get an
        exact zero gradient.

    Returns
    -------
    dict[str, numpy.ndarray]
        Gradients keyed like ``params`` (empty if ``params`` is None).
    """
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        raise ContractError("backward() needs a scalar Tensor loss")
    if params:
        for p in params.values():
            p.grad = None
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    grads = {}
    for key, p in (params or {}).items():
        grads[key] = np.zeros_like(p.value) if p.grad is None else p.grad
    return grads


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.value, b.shape))

    return _make(out, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: _accumulate(a, -g))


def square(a):
    a = as_tensor(a)
    return _make(a.value * a.value, (a,), lambda g: _accumulate(a, 2.0 * a.value * g))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: _accumulate(a, 0.5 * g / out))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: _accumulate(a, g * out))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: _accumulate(a, g / a.value))


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: _accumulate(a, g * (1.0 - out * out)))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)))


def relu(a):
    a = as_tensor(a)
    return _make(np.maximum(a.value, 0.0), (a,), lambda g: _accumulate(a, g * (a.value > 0)))


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.value)
    return _make(out, (a,), lambda g: _accumulate(a, g * _sigmoid(a.value)))


def identity(a):
    return as_tensor(a)


ACTIVATIONS = {
    "identity": identity,
    "tanh": tanh,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
}


# ---------------------------------------------------------------------------
# reductions and structure


def tsum(a, axis=None):
    a = as_tensor(a)
    out = a.value.sum(axis=axis)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(out, (a,), bw)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(a, index):
    a = as_tensor(a)
    basic = _is_basic(index)

    def bw(g):
        if not a.requires_grad:
            return
        # accumulate in place so repeated slicing of one parent stays linear
        if a.grad is None:
            a.grad = np.zeros_like(a.value)
        if basic:
            a.grad[index] += g
        else:
            np.add.at(a.grad, index, g)

    return _make(a.value[index], (a,), bw)


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in ts], axis=axis)
    sizes = np.cumsum([t.value.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            _accumulate(t, piece)

    return _make(out, tuple(ts), bw)


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.value for t in ts], axis=axis)

    def bw(g):
        for i, t in enumerate(ts):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(out, tuple(ts), bw)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for ``x`` of shape (..., in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != layer input width {weight.shape[1]}")
    out = x.value @ weight.value.T
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.value
        parents = (x, weight, bias)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.value)
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            _accumulate(weight, g2.T @ x.value.reshape(-1, x.shape[-1]))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out, parents, bw)


def lstm_cell(x, h, c, weight, bias):
    """Fused LSTM step returning the concatenation ``[h', c']``.

    Gate rows of ``weight`` are ordered input, forget, output, candidate and
    act on the concatenation ``[x, h]``.
    """
    x, h, c, weight, bias = (as_tensor(v) for v in (x, h, c, weight, bias))
    H = h.shape[-1]
    if weight.shape != (4 * H, x.shape[-1] + H) or bias.shape != (4 * H,):
        raise ShapeError("LSTM weight/bias do not match input and hidden sizes")
    if c.shape != h.shape:
        raise ShapeError("cell and hidden state shapes differ")
    xh = np.concatenate([x.value, h.value], axis=-1)
    a = xh @ weight.value.T + bias.value
    i = _sigmoid(a[..., :H])
    f = _sigmoid(a[..., H:2 * H])
    o = _sigmoid(a[..., 2 * H:3 * H])
    u = np.tanh(a[..., 3 * H:])
    c_new = f * c.value + i * u
    tc = np.tanh(c_new)
    h_new = o * tc

    def bw(g):
        gh, gc = g[..., :H], g[..., H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        da = np.concatenate(
            [
                dc * u * i * (1.0 - i),
                dc * c.value * f * (1.0 - f),
                gh * tc * o * (1.0 - o),
                dc * i * (1.0 - u * u),
            ],
            axis=-1,
        )
        if weight.requires_grad:
            _accumulate(weight, da.reshape(-1, 4 * H).T @ xh.reshape(-1, xh.shape[-1]))
        if bias.requires_grad:
            _accumulate(bias, da.reshape(-1, 4 * H).sum(axis=0))
        if x.requires_grad or h.requires_grad:
            dxh = da @ weight.value
            _accumulate(x, dxh[..., : x.shape[-1]])
            _accumulate(h, dxh[..., x.shape[-1]:])
        _accumulate(c, dc * f)

    return _make(np.concatenate([h_new, c_new], axis=-1), (x, h, c, weight, bias), bw)
