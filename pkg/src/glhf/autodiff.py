"""Minimal reverse-mode automatic differentiation over dense 2-D float64 arrays.

Operations executed while a :class:`Tape` is active are recorded on it, in
execution order, whenever at least one input requires a gradient.  Outside a
tape nothing is recorded, so the same model code runs gradient-free at
inference time.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape():
    ...     y = total(tanh(w))
    >>> backward(y)
"""

from __future__ import annotations

import threading

import numpy as np

EPS_LN = 1e-5
EPS_DIV = 1e-12

_state = threading.local()


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GuardError(ArithmeticError):
    pass


class Tensor:
    """A 2-D float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad=False, _leaf=True):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got ndim={arr.ndim}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._leaf = _leaf
        self.grad = np.zeros_like(arr) if (requires_grad and _leaf) else None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __truediv__ = lambda self, other: div(self, other)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731


class Tape:
    """Ordered record of differentiable operations.

    Each entry is ``(inputs, output, backward_rule)``; entries are appended in
    execution order, so the list is topological by construction.  A tape is
    bound to the thread that activates it.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def reset(self):
        self.records.clear()


def active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data, inputs, rule, name):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {name}")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out._leaf = not needs
    out.grad = None
    if needs:
        tape.records.append((inputs, out, rule))
    return out


def _scalar_like(b):
    return b.data.shape == (1, 1)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g).reshape(1, 1)


def _check_binary(a, b, name):
    if a.shape != b.shape and not _scalar_like(b):
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- products


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), rule, "matmul")


def transpose(a):
    a = as_tensor(a)
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    sb = b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    sb = b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape

    def rule(g):
        return g * bd, _unbroadcast(g * ad, sb)

    return _emit(ad * bd, (a, b), rule, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    if np.any(np.abs(b.data) < EPS_DIV):
        raise GuardError("div: denominator magnitude below guard")
    ad, bd, sb = a.data, b.data, b.shape

    def rule(g):
        return g / bd, _unbroadcast(-g * ad / (bd * bd), sb)

    return _emit(ad / bd, (a, b), rule, "div")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a):
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def absolute(a):
    a = as_tensor(a)
    s = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def clamp(a, lower, upper):
    """Clamp into ``[lower, upper]``; gradient is zero on clamped entries.

    Bounds are arrays broadcastable against the rows of ``a``.
    """
    a = as_tensor(a)
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    y = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(y, (a,), lambda g: (np.where(inside, g, 0.0),), "clamp")


_KINDS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "abs": absolute,
    "neg": neg,
}


def elementwise(a, b=None, kind="add"):
    """Dispatch to a pointwise op by name; ``b`` is unused for unary kinds."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("tanh", "sigmoid", "abs", "neg"):
        return fn(a)
    if b is None:
        raise DimensionError(f"{kind} needs a second operand")
    return fn(a, b)


# ---------------------------------------------------------------- shaping


def add_bias(x, b):
    """Add a 1 x cols row vector to every row of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.shape != (1, x.shape[1]):
        raise DimensionError(f"add_bias: bias {b.shape} for input {x.shape}")
    return _emit(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)), "add_bias")


def tile(col, cols):
    """Repeat an n x 1 column ``cols`` times."""
    col = as_tensor(col)
    if col.shape[1] != 1:
        raise DimensionError(f"tile expects a column, got {col.shape}")
    y = np.repeat(col.data, cols, axis=1)
    return _emit(y, (col,), lambda g: (g.sum(axis=1, keepdims=True),), "tile")


def layer_norm(x, gain, bias, eps=EPS_LN):
    """Per-row normalization over columns followed by an affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[1]
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise DimensionError(f"layer_norm: gain {gain.shape}, bias {bias.shape} for {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _emit(xhat * gd + bias.data, (x, gain, bias), rule, "layer_norm")


# ---------------------------------------------------------------- reductions


def total(x):
    x = as_tensor(x)
    shape = x.shape
    return _emit(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def mean(x):
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return _emit(np.array([[x.data.mean()]]), (x,), lambda g: (np.full(shape, g[0, 0] / n),), "mean")


def rowmax(x):
    """Max of each row as an n x 1 column; ties route gradient to the first index."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=1)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def rule(g):
        out = np.zeros(shape)
        out[rows, idx] = g[:, 0]
        return (out,)

    return _emit(x.data[rows, idx][:, None].copy(), (x,), rule, "rowmax")


def reduce(x, kind):
    x = as_tensor(x)
    if x.data.size == 0:
        raise DimensionError("reduce of an empty tensor")
    if kind == "mean":
        return mean(x)
    if kind == "sum":
        return total(x)
    if kind == "rowmax":
        return rowmax(x)
    raise ValueError(f"unknown reduction {kind!r}")


def detach(x):
    """Value copy that blocks gradient flow."""
    return Tensor(as_tensor(x).data.copy())


def custom(inputs, data, rule, name="custom"):
    """Record an op with a caller-supplied vector-Jacobian rule.

    ``rule(g)`` must return one gradient array per input.
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    return _emit(np.asarray(data, dtype=np.float64), inputs, rule, name)


# ---------------------------------------------------------------- backward


def backward(root, tape=None):
    """Accumulate d(root)/d(leaf) into the ``grad`` of every leaf that requires it.

    Repeated calls accumulate.  If ``tape`` is omitted the innermost active
    tape is used.
    """
    if root.shape != (1, 1):
        raise DimensionError(f"backward root must be 1x1, got {root.shape}")
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("backward() needs the tape the graph was recorded on")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones((1, 1))}
    for inputs, out, rule in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, rule(g)):
            if not t.requires_grad:
                continue
            if t._leaf:
                t.grad += gi
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


def zero_grad(params):
    for p in params:
        p.zero_grad()


def numerical_grad(fn, arrays, h=1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = a[i]
            a[i] = orig + h
            fp = fn(*arrays)
            a[i] = orig - h
            fm = fn(*arrays)
            a[i] = orig
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximum over entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0
