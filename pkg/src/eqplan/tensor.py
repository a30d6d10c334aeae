"""A small reverse-mode autodiff over numpy arrays.

Only the operations the planner needs are provided. Every op checks shapes
explicitly; the only implicit broadcast is a 2D weight matrix shared over the
leading batch axes of ``matmul``/``linear``. Values are float64 throughout.

A :class:`Tape` records the executed ops in order. Tensors that are not attached
to a tape are constants: ops on constants only run the forward pass, which is
how inference avoids any recording overhead.
"""
from __future__ import annotations

import numpy as np

from . import _accel


class ShapeError(ValueError):
    pass


class Tape:
    """Ordered record of executed ops on one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}

    def param(self, value, name: str) -> "Tensor":
        if name in self.leaves:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), tape=self, op="param", name=name)
        self.nodes.append(t)
        self.leaves[name] = t
        return t

    def params(self, values: dict) -> dict:
        return {name: self.param(v, name) for name, v in values.items()}


class Tensor:
    __slots__ = ("data", "tape", "parents", "vjp", "op", "name")

    def __init__(self, data, tape=None, parents=(), vjp=None, op="const", name=None):
        self.data = data
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def const(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _make(data, parents, vjp, op) -> Tensor:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    if tape is None:
        return Tensor(data, op=op)
    t = Tensor(data, tape=tape, parents=parents, vjp=vjp, op=op)
    tape.nodes.append(t)
    return t


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


# ---------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Either both operands are 2D, or exactly one is 2D and is shared across the
    leading batch axes of the other.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or (a.ndim > 2 and b.ndim > 2):
        raise ShapeError(f"matmul: unsupported operand ranks {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:
            # b batched: (..., k, n); g (..., m, n)
            m, n = g.shape[-2:]
            ga = np.tensordot(g.reshape(-1, m, n), bd.reshape(-1, bd.shape[-2], n),
                              axes=([0, 2], [0, 2]))
            gb = ad.T @ g
            return ga, gb
        k, n = bd.shape
        ga = g @ bd.T
        gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully connected layer ``x @ w + b`` over the last axis of ``x``."""
    if w.ndim != 2 or b.ndim != 1 or x.shape[-1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise ShapeError(f"linear: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data
    fan_in, fan_out = wd.shape

    def vjp(g):
        g2 = g.reshape(-1, fan_out)
        return g @ wd.T, xd.reshape(-1, fan_in).T @ g2, g2.sum(axis=0)

    return _make(out, (x, w, b), vjp, "linear")


# ------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int) -> Tensor:  # noqa: A001
    shape = a.shape
    ax = axis % a.ndim
    return _make(a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape),), "sum")


def mean(a: Tensor, axis: int) -> Tensor:
    shape = a.shape
    ax = axis % a.ndim
    n = shape[ax]
    if n == 0:
        raise ShapeError("mean: empty axis")
    return _make(a.data.mean(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape) / n,), "mean")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if a.shape[-1] < 1:
        raise ShapeError("softmax: empty axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), vjp, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (a,), vjp, "log_softmax")


# ------------------------------------------------------------ R^2 helpers


def rowwise_l2norm(a: Tensor) -> Tensor:
    """Euclidean norm over a trailing axis of size 2. Zero rows get a zero gradient."""
    if a.shape[-1] != 2:
        raise ShapeError(f"rowwise_l2norm: last axis must be 2, got {a.shape}")
    x = a.data
    n = np.sqrt(x[..., 0] * x[..., 0] + x[..., 1] * x[..., 1])

    def vjp(g):
        safe = np.where(n > 0.0, n, 1.0)
        unit = np.where((n > 0.0)[..., None], x / safe[..., None], 0.0)
        return (g[..., None] * unit,)

    return _make(n, (a,), vjp, "rowwise_l2norm")


def rowdot(a, b) -> Tensor:
    """Dot product of matching R^2 rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("rowdot", a, b)
    if a.shape[-1] != 2:
        raise ShapeError(f"rowdot: last axis must be 2, got {a.shape}")
    ad, bd = a.data, b.data
    out = ad[..., 0] * bd[..., 0] + ad[..., 1] * bd[..., 1]
    return _make(out, (a, b), lambda g: (g[..., None] * bd, g[..., None] * ad), "rowdot")


def mirror(q: Tensor, k: Tensor) -> Tensor:
    """Reflect each R^2 row of ``q`` when its inner product with ``k`` is negative.

    ``out = q - 2 <q,k>/<k,k> k`` on the reflected rows; zero keys pass ``q``
    through unchanged.
    """
    _same_shape("mirror", q, k)
    if q.shape[-1] != 2:
        raise ShapeError(f"mirror: last axis must be 2, got {q.shape}")
    qd, kd = q.data, k.data
    out = _accel.mirror_forward(qd, kd)
    return _make(out, (q, k), lambda g: _accel.mirror_backward(qd, kd, g), "mirror")


# -------------------------------------------------------------- structure


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of size ``n`` at ``axis`` by repetition."""
    ax = axis % (a.ndim + 1)
    out = np.broadcast_to(np.expand_dims(a.data, ax), a.shape[:ax] + (n,) + a.shape[ax:])
    return _make(out, (a,), lambda g: (g.sum(axis=ax),), "expand")


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] != tensors[0].shape[:ax] or t.shape[ax + 1:] != tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(tensors, axis: int) -> Tensor:
    return concat([expand(t, axis, 1) for t in tensors], axis)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def take(a: Tensor, index, axis: int) -> Tensor:
    """Static integer or slice indexing along one axis."""
    ax = axis % a.ndim
    sl = (slice(None),) * ax + (index,)
    out = a.data[sl]
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[sl] = g
        return (full,)

    return _make(out, (a,), vjp, "take")


def gather(a: Tensor, idx) -> Tensor:
    """Pick ``a[b, idx[b]]`` for every batch row ``b``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"gather: index shape {idx.shape} does not match batch {a.shape[0]}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _make(out, (a,), vjp, "gather")


def pairwise_diff(a: Tensor) -> Tensor:
    """``out[:, i, j] = a[:, i] - a[:, j]`` over axis 1."""
    x = a.data
    out = x[:, :, None] - x[:, None, :]
    return _make(out, (a,), lambda g: (g.sum(axis=2) - g.sum(axis=1),), "pairwise_diff")


# ------------------------------------------------------ non-differentiable


def argmax(x, axis=-1):
    """Index of the maximum; ties resolve to the lowest index."""
    return np.argmax(x.data if isinstance(x, Tensor) else x, axis=axis)


def argmin(x, axis=-1):
    """Index of the minimum; ties resolve to the lowest index."""
    return np.argmin(x.data if isinstance(x, Tensor) else x, axis=axis)


# --------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse sweep over ``tape``; returns d loss / d param for every parameter."""
    if loss.tape is not tape:
        raise ValueError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node.vjp is None:
            if node.op == "param" and g is not None:
                grads[("leaf", node.name)] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent.tape is None or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)
    out = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(("leaf", name))
        out[name] = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
    return out


def first_nonfinite(tape: Tape):
    """First recorded node whose value contains NaN or Inf, or None."""
    for node in tape.nodes:
        if not np.all(np.isfinite(node.data)):
            return node
    return None
