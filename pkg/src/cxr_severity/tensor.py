"""Dense tensors, differentiable primitives and a reverse-mode tape.

A :class:`Tensor` is an immutable wrapper around a row-major numpy array.
Every numeric operation goes through :func:`apply_primitive`, which records a
node on the active :class:`Tape` whenever one of its inputs is being watched.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, ShapeError

PRECISIONS = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
_DTYPE_NAMES = {v: k for k, v in PRECISIONS.items()}

_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tensor:
    """Immutable N-d array of f32 or f64 values."""

    __slots__ = ("data", "_tape", "_node")

    def __init__(self, data, precision: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if precision is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in _DTYPE_NAMES else PRECISIONS["f64"]
        else:
            if precision not in PRECISIONS:
                raise ContractError(f"unknown precision {precision!r}")
            dtype = PRECISIONS[precision]
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        arr.setflags(write=False)
        self.data = arr
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        # trusted fast path: arr is owned by the caller and not shared
        t = cls.__new__(cls)
        arr = np.asarray(arr, order="C")
        arr.setflags(write=False)
        t.data = arr
        t._tape = None
        t._node = None
        return t

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def elems(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def precision(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    @property
    def node(self) -> int | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got dims {list(self.dims)}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(dims={self.dims}, precision={self.precision})"

    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __mul__(self, other):
        return apply_primitive("mul", [self, other])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])


def as_tensor(x, precision: str | None = None) -> Tensor:
    if isinstance(x, Tensor) and (precision is None or x.precision == precision):
        return x
    return Tensor(x, precision)


# --------------------------------------------------------------------------
# primitive registry


class Primitive(NamedTuple):
    forward: Callable[..., np.ndarray]
    # backward(g, inputs, out, **attrs) -> one gradient (or None) per input
    backward: Callable[..., Sequence[np.ndarray | None]]
    check: Callable[..., None] | None = None


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(name, forward, backward, check=None):
    PRIMITIVES[name] = Primitive(forward, backward, check)


def _dims(arrs):
    return " vs ".join(str(list(a.shape)) for a in arrs)


def _same_dims(name):
    def check(arrs, **_):
        if len(arrs) != 2:
            raise ShapeError(f"{name}: expects 2 inputs, got {len(arrs)}")
        if arrs[0].shape != arrs[1].shape:
            raise ShapeError(f"{name}: dimension mismatch {_dims(arrs)}")

    return check


def _arity(name, n):
    def check(arrs, **_):
        if len(arrs) != n:
            raise ShapeError(f"{name}: expects {n} input(s), got {len(arrs)}")

    return check


def _check_matmul(arrs, **_):
    a, b = arrs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: dimension mismatch {_dims(arrs)}")


def _check_reshape(arrs, shape, **_):
    (a,) = arrs
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {list(a.shape)} as {list(shape)}")


def _channel_axis(ndim):
    # (C,H,W) / (N,C,H,W) carry channels third from the end; vectors use the last axis
    return ndim - 3 if ndim >= 3 else ndim - 1


def _check_concat(arrs, **_):
    if not arrs:
        raise ShapeError("concat_channels: no inputs")
    ref = arrs[0]
    ax = _channel_axis(ref.ndim)
    for a in arrs[1:]:
        if a.ndim != ref.ndim or a.shape[:ax] + a.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ShapeError(f"concat_channels: dimension mismatch {_dims(arrs)}")


def _check_pad(arrs, pad, **_):
    (a,) = arrs
    if a.ndim < 2 or pad < 0:
        raise ShapeError(f"pad2d: needs >= 2 dims and pad >= 0, got {list(a.shape)} pad={pad}")


def _check_bias_add(arrs, **_):
    x, b = arrs
    if x.ndim < 1 or b.ndim != 1 or x.shape[_channel_axis(x.ndim)] != b.shape[0]:
        raise ShapeError(f"bias_add: dimension mismatch {_dims(arrs)}")


def _bias_shape(x, b):
    shape = [1] * x.ndim
    shape[_channel_axis(x.ndim)] = b.shape[0]
    return b.reshape(shape)


def _reduce_axes(x, axis):
    if axis is None:
        return tuple(range(x.ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % x.ndim for a in axes)


def _expand_grad(g, x, axis):
    axes = _reduce_axes(x, axis)
    shape = [1 if i in axes else n for i, n in enumerate(x.shape)]
    return np.broadcast_to(g.reshape(shape), x.shape)


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


register_primitive(
    "add", lambda a, b: a + b, lambda g, ins, out: (g, g), _same_dims("add"))
register_primitive(
    "sub", lambda a, b: a - b, lambda g, ins, out: (g, -g), _same_dims("sub"))
register_primitive(
    "mul", lambda a, b: a * b,
    lambda g, ins, out: (g * ins[1], g * ins[0]), _same_dims("mul"))
register_primitive(
    "matmul", lambda a, b: a @ b,
    lambda g, ins, out: (g @ ins[1].T, ins[0].T @ g), _check_matmul)
register_primitive(
    "relu", lambda a: np.maximum(a, 0),
    lambda g, ins, out: (g * (ins[0] > 0),), _arity("relu", 1))
register_primitive(
    "exp", np.exp, lambda g, ins, out: (g * out,), _arity("exp", 1))
register_primitive(
    "log", np.log, lambda g, ins, out: (g / ins[0],), _arity("log", 1))
register_primitive(
    "sum",
    lambda a, axis=None: np.asarray(a.sum(axis=_reduce_axes(a, axis))),
    lambda g, ins, out, axis=None: (_expand_grad(g, ins[0], axis),),
    _arity("sum", 1))
register_primitive(
    "mean",
    lambda a, axis=None: np.asarray(a.mean(axis=_reduce_axes(a, axis))),
    lambda g, ins, out, axis=None: (
        _expand_grad(g, ins[0], axis)
        / int(np.prod([ins[0].shape[i] for i in _reduce_axes(ins[0], axis)])),),
    _arity("mean", 1))
register_primitive(
    "reshape", lambda a, shape: a.reshape(shape),
    lambda g, ins, out, shape: (g.reshape(ins[0].shape),), _check_reshape)
register_primitive(
    "concat_channels",
    lambda *arrs: np.concatenate(arrs, axis=_channel_axis(arrs[0].ndim)),
    lambda g, ins, out: tuple(
        np.split(g, np.cumsum([a.shape[_channel_axis(a.ndim)] for a in ins])[:-1],
                 axis=_channel_axis(g.ndim))),
    _check_concat)
register_primitive(
    "pad2d",
    lambda a, pad: np.pad(a, [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]),
    lambda g, ins, out, pad: (
        g[..., pad:g.shape[-2] - pad, pad:g.shape[-1] - pad],),
    _check_pad)
register_primitive(
    "bias_add", lambda x, b: x + _bias_shape(x, b),
    lambda g, ins, out: (
        g, g.sum(axis=tuple(i for i in range(g.ndim) if i != _channel_axis(g.ndim)))),
    _check_bias_add)
register_primitive(
    "softmax", _softmax,
    lambda g, ins, out: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
    _arity("softmax", 1))
register_primitive(
    "log_softmax", _log_softmax,
    lambda g, ins, out: (g - np.exp(out) * g.sum(axis=-1, keepdims=True),),
    _arity("log_softmax", 1))


# --------------------------------------------------------------------------
# tape


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    trainable: bool = False


class Tape:
    """Records primitive applications for reverse-mode differentiation.

    Use as a context manager; tensors become differentiable once passed
    through :meth:`watch`.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.outputs: list[int] = []
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def watch(self, t, trainable: bool = True) -> Tensor:
        t = as_tensor(t)
        out = Tensor._wrap(t.data)
        out._tape = self
        out._node = self._append(Node("leaf", (), t.data, trainable=trainable))
        return out

    def _bind(self, t: Tensor) -> int:
        if t._tape is self:
            return t._node
        return self._append(Node("leaf", (), t.data, trainable=False))

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "leaf"]

    def replay(self) -> list[np.ndarray]:
        """Recompute every node value from the leaf values."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "leaf":
                values.append(node.value)
            else:
                prim = PRIMITIVES[node.kind]
                values.append(np.asarray(
                    prim.forward(*[values[i] for i in node.inputs], **node.attrs)))
        return values

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
        grads = backward(self, loss)
        out = []
        for t in wrt:
            if t._tape is not self:
                raise ContractError("gradient requested for a tensor not watched on this tape")
            g = grads.get(t._node)
            out.append(g if g is not None else Tensor._wrap(np.zeros_like(t.data)))
        return out


def current_tape() -> Tape | None:
    return _active_tape.get()


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    if kind not in PRIMITIVES:
        raise ContractError(f"unknown primitive {kind!r}")
    prim = PRIMITIVES[kind]
    tensors = [as_tensor(x) for x in inputs]
    arrs = [t.data for t in tensors]
    if len({a.dtype for a in arrs}) > 1:
        raise ShapeError(f"{kind}: precision mismatch {[t.precision for t in tensors]}")
    if prim.check is not None:
        prim.check(arrs, **attrs)
    value = np.asarray(prim.forward(*arrs, **attrs))
    if value.dtype != arrs[0].dtype:
        value = value.astype(arrs[0].dtype)
    out = Tensor._wrap(value)
    tape = _active_tape.get()
    if tape is not None and any(t._tape is tape for t in tensors):
        ids = tuple(tape._bind(t) for t in tensors)
        out._tape = tape
        out._node = tape._append(Node(kind, ids, out.data, attrs))
    return out


def backward(tape: Tape, loss) -> dict[int, Tensor]:
    """Return d(loss)/d(leaf) for every trainable leaf reachable from ``loss``."""
    if isinstance(loss, Tensor):
        if loss._tape is not tape:
            raise ContractError("loss tensor was not recorded on this tape")
        loss_id = loss._node
    else:
        loss_id = int(loss)
    root = tape.nodes[loss_id]
    if root.value.size != 1:
        raise ContractError(
            f"backward needs a scalar loss, got dims {list(root.value.shape)}")

    grads: dict[int, np.ndarray] = {loss_id: np.ones_like(root.value)}
    for i in range(loss_id, -1, -1):
        node = tape.nodes[i]
        g = grads.get(i)
        if g is None or node.kind == "leaf":
            continue
        ins = [tape.nodes[j].value for j in node.inputs]
        in_grads = PRIMITIVES[node.kind].backward(g, ins, node.value, **node.attrs)
        for j, gj in zip(node.inputs, in_grads):
            if gj is not None:
                grads[j] = grads[j] + gj if j in grads else gj
    result = {}
    for j, g in grads.items():
        node = tape.nodes[j]
        if node.kind == "leaf" and node.trainable:
            result[j] = Tensor._wrap(np.asarray(g, dtype=node.value.dtype).reshape(node.value.shape))
    return result


# --------------------------------------------------------------------------
# thin functional wrappers


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def relu(a):
    return apply_primitive("relu", [a])


def exp(a):
    return apply_primitive("exp", [a])


def log(a):
    return apply_primitive("log", [a])


def tsum(a, axis=None):
    return apply_primitive("sum", [a], axis=axis)


def mean(a, axis=None):
    return apply_primitive("mean", [a], axis=axis)


def reshape(a, shape):
    return apply_primitive("reshape", [a], shape=tuple(shape))


def concat_channels(*ts):
    return apply_primitive("concat_channels", list(ts))


def pad2d(a, pad: int):
    return apply_primitive("pad2d", [a], pad=int(pad))


def bias_add(x, b):
    return apply_primitive("bias_add", [x, b])


def softmax(x):
    return apply_primitive("softmax", [x])


def log_softmax(x):
    return apply_primitive("log_softmax", [x])


def cross_entropy(logits, onehot):
    """Mean cross-entropy over the leading (batch) axis of ``logits``."""
    logp = log_softmax(logits)
    total = tsum(mul(logp, onehot))
    n = logits.dims[0] if len(logits.dims) > 1 else 1
    return mul(total, Tensor(np.full((), -1.0 / n), as_tensor(logits).precision))
