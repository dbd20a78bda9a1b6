"""Reverse-mode autodiff over numpy arrays.

Every op returns a new :class:`Tensor` holding its parents and a closure that
pushes the output gradient back to them. Gradients are never updated in
place, so parents may safely share gradient arrays.
"""
from __future__ import annotations

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward", "name")

    def __init__(self, value, parents=(), op="", requires_grad=False, name=None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=float)
        self.grad = None
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(node) into ``.grad`` of every node that needs it."""
        if self.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and dtype is None:
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=dtype or float))


def _pair(a, b):
    """Coerce a non-tensor operand to the dtype of its tensor partner."""
    if isinstance(a, Tensor):
        return a, as_tensor(b, None if isinstance(b, np.ndarray) else a.value.dtype)
    b = as_tensor(b)
    return as_tensor(a, None if isinstance(a, np.ndarray) else b.value.dtype), b


def constant(x, dtype=None) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype or float))


def parameter(x, name=None, dtype=None) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype or float), requires_grad=True, name=name)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.value)


def _accumulate(node: Tensor, g: np.ndarray):
    if node.requires_grad:
        node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    """Same shapes, or ``b`` broadcasting along leading axes (bias style), or scalars."""
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _node(value, parents, op, backward):
    out = Tensor(value, parents, op)
    if out.requires_grad:
        out._backward = backward
    return out


# --- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.value + b.value, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.value - b.value, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, (a, b), "mul", backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, 2.0 * a.value * g)

    return _node(a.value * a.value, (a,), "square", backward)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.value.T)
        if b.requires_grad:
            _accumulate(b, a.value.T @ g)

    return _node(a.value @ b.value, (a, b), "matmul", backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g.T)

    return _node(a.value.T, (a,), "transpose", backward)


# --- nonlinearities -----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _node(a.value * mask, (a,), "relu", backward)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and keeps the input dtype
    out = np.tanh(x * 0.5)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.value)

    def backward(g):
        _accumulate(a, g * s * (1.0 - s))

    return _node(s, (a,), "sigmoid", backward)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)

    def backward(g):
        _accumulate(a, g * (1.0 - t * t))

    return _node(t, (a,), "tanh", backward)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.value)

    def backward(g):
        _accumulate(a, g * e)

    return _node(e, (a,), "exp", backward)


def log(a: Tensor) -> Tensor:
    """Natural log with inputs clamped at 1e-12 (zero gradient below the clamp)."""
    clamped = np.maximum(a.value, LOG_FLOOR)

    def backward(g):
        _accumulate(a, g * (a.value > LOG_FLOOR) / clamped)

    return _node(np.log(clamped), (a,), "log", backward)


# --- structure ------------------------------------------------------------------


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), "concat", backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: incompatible shapes {tensors[0].shape} and {t.shape}")

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _node(np.stack([t.value for t in tensors], axis=axis), tuple(tensors), "stack", backward)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.value)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accumulate(a, full)

    return _node(a.value[idx], (a,), "slice", backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(a.value.reshape(shape), (a,), "reshape", backward)


# --- reductions -------------------------------------------------------------------


def _expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    def backward(g):
        _accumulate(a, np.array(_expand(g, a.shape, axis)))

    return _node(np.sum(a.value, axis=axis), (a,), "sum", backward)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.value.size if axis is None else a.shape[axis]

    def backward(g):
        _accumulate(a, np.array(_expand(g, a.shape, axis)) / count)

    return _node(np.mean(a.value, axis=axis), (a,), "mean", backward)


def min(a: Tensor, axis=-1) -> Tensor:  # noqa: A001
    """Minimum along ``axis``; the gradient goes to the first minimiser."""
    axis = axis % a.ndim
    idx = np.argmin(a.value, axis=axis)
    value = np.take_along_axis(a.value, np.expand_dims(idx, axis), axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.value)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        _accumulate(a, full)

    return _node(value, (a,), "min", backward)


def l2_norm(a: Tensor, axis=-1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as zero."""
    n = np.sqrt(np.sum(a.value * a.value, axis=axis))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        _accumulate(a, a.value * np.expand_dims(np.where(n > 0, g / safe, 0.0), axis))

    return _node(n, (a,), "l2_norm", backward)


# --- normalisation ------------------------------------------------------------------


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Per-feature normalisation of a (batch, features) tensor with batch statistics.

    Returns the output tensor together with the batch mean and biased variance.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.value.mean(axis=0)
    var = x.value.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv_std
    n = x.shape[0]

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, np.sum(g * xhat, axis=0))
        if beta.requires_grad:
            _accumulate(beta, np.sum(g, axis=0))
        if x.requires_grad:
            dxhat = g * gamma.value
            dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
            _accumulate(x, dx)

    out = _node(xhat * gamma.value + beta.value, (x, gamma, beta), "batchnorm", backward)
    return out, mu, var


def affine(x: Tensor, scale: np.ndarray, shift: np.ndarray, gamma: Tensor, beta: Tensor) -> Tensor:
    """``(x * scale + shift) * gamma + beta`` with fixed scale/shift (batchnorm eval mode)."""
    xhat = x.value * scale + shift

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, np.sum(g * xhat, axis=0))
        if beta.requires_grad:
            _accumulate(beta, np.sum(g, axis=0))
        _accumulate(x, g * gamma.value * scale)

    return _node(xhat * gamma.value + beta.value, (x, gamma, beta), "batchnorm_eval", backward)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Repeat each leading-axis row ``k`` times (row ``b`` becomes rows ``b*k .. b*k+k-1``)."""
    n = a.shape[0]

    def backward(g):
        _accumulate(a, g.reshape((n, k) + a.shape[1:]).sum(axis=1))

    return _node(np.repeat(a.value, k, axis=0), (a,), "repeat_rows", backward)


def lstm_gates(z: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """Fused LSTM update from gate pre-activations ``z`` = [i, f, g, o] (n, 4d).

    Returns ``(h, c_new)`` with ``c_new = s(f) c + s(i) tanh(g)`` and
    ``h = s(o) tanh(c_new)``.
    """
    d = c.shape[-1]
    if z.ndim != 2 or z.shape != (c.shape[0], 4 * d):
        raise ShapeError(f"lstm_gates: pre-activations {z.shape} vs cell state {c.shape}")
    act = _stable_sigmoid(z.value)
    act[:, 2 * d : 3 * d] = np.tanh(z.value[:, 2 * d : 3 * d])
    deriv = act * (1.0 - act)
    g_act = act[:, 2 * d : 3 * d]
    deriv[:, 2 * d : 3 * d] = 1.0 - g_act * g_act

    def act_backward(g):
        _accumulate(z, g * deriv)

    a = _node(act, (z,), "lstm_act", act_backward)
    i, f, gg, o = (act[:, j * d : (j + 1) * d] for j in range(4))
    c_val = f * c.value + i * gg

    def cell_backward(g):
        if a.requires_grad:
            full = np.zeros_like(act)
            full[:, :d] = g * gg
            full[:, d : 2 * d] = g * c.value
            full[:, 2 * d : 3 * d] = g * i
            _accumulate(a, full)
        if c.requires_grad:
            _accumulate(c, g * f)

    c_new = _node(c_val, (a, c), "lstm_cell", cell_backward)
    tc = np.tanh(c_val)

    def hidden_backward(g):
        if a.requires_grad:
            full = np.zeros_like(act)
            full[:, 3 * d :] = g * tc
            _accumulate(a, full)
        _accumulate(c_new, g * o * (1.0 - tc * tc))

    h = _node(o * tc, (a, c_new), "lstm_hidden", hidden_backward)
    return h, c_new
