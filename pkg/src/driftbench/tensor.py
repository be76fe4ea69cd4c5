"""Minimal dense tensors with a dynamic reverse-mode tape.

Every differentiable op checks its output for NaN/Inf and, when any input
requires a gradient, appends a node to the calling thread's tape. ``backward``
replays that tape in reverse and then clears it, so each forward pass builds
a fresh graph.

Leaf tensors created with ``requires_grad=True`` own a zeroed gradient buffer
that ``backward`` accumulates into. Intermediate op outputs get their ``grad``
filled in only while ``backward`` runs.

All data is stored as float64.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractError, NumericError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

# backward(grad_out, needs) -> one gradient (or None) per input
BackwardFn = Callable[[np.ndarray, tuple], tuple]


class TapeNode:
    __slots__ = ("name", "output", "inputs", "backward")

    def __init__(self, name: str, output: "Tensor", inputs: tuple, backward: BackwardFn):
        self.name = name
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.is_leaf = True

    # op results and internal constants: no copy, gradient filled lazily
    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.is_leaf = False
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, data: np.ndarray, inputs: tuple, backward: BackwardFn) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{name} produced a non-finite value")
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if needs:
        current_tape().record(TapeNode(name, out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(name: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------- binary ops


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("add", np.add, a, b)

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _emit("add", out, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("sub", np.subtract, a, b)

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _emit("sub", out, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("mul", np.multiply, a, b)

    def backward(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _emit("mul", out, (a, b), backward)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of two 2-D tensors (a vector on either side is allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    a2 = a.data if a.ndim == 2 else a.data[None, :]
    b2 = b.data if b.ndim == 2 else b.data[:, None]

    def backward(g, needs):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        da = (g2 @ b2.T).reshape(a.shape) if needs[0] else None
        db = (a2.T @ g2).reshape(b.shape) if needs[1] else None
        return da, db

    out = a.data @ b.data
    return _emit("matmul", np.asarray(out, dtype=np.float64), (a, b), backward)


# ------------------------------------------------------------------ unary ops


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)

    def backward(g, needs):
        return (g * s * (1.0 - s),)

    return _emit("sigmoid", s, (x,), backward)


def tanh(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(g, needs):
        return (g * (1.0 - y * y),)

    return _emit("tanh", y, (x,), backward)


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g, needs):
        return (g * mask,)

    return _emit("relu", np.where(mask, x.data, 0.0), (x,), backward)


def elementwise(op: str, *args: ArrayLike) -> Tensor:
    """Dispatch by name: add, sub, mul, sigmoid, tanh, relu."""
    table = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "tanh": tanh, "relu": relu}
    try:
        fn = table[op]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ------------------------------------------------------------ structural ops


def transpose(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {x.shape}")

    def backward(g, needs):
        return (g.T,)

    return _emit("transpose", x.data.T.copy(), (x,), backward)


def reshape(x: ArrayLike, shape: tuple) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None

    def backward(g, needs):
        return (g.reshape(x.shape),)

    return _emit("reshape", y, (x,), backward)


def getitem(x: ArrayLike, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    y = np.array(x.data[idx], dtype=np.float64)

    def backward(g, needs):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _emit("getitem", y, (x,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g, needs):
        parts = []
        for k, t in enumerate(ts):
            if not needs[k]:
                parts.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[k], bounds[k + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _emit("concat", y, ts, backward)


def tsum(x: ArrayLike) -> Tensor:
    x = as_tensor(x)

    def backward(g, needs):
        return (np.full(x.shape, float(g.reshape(-1)[0])),)

    return _emit("sum", np.array(x.data.sum()), (x,), backward)


def mean(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    n = x.size

    def backward(g, needs):
        return (np.full(x.shape, float(g.reshape(-1)[0]) / n),)

    return _emit("mean", np.array(x.data.mean()), (x,), backward)


# ------------------------------------------------------------- fused LSTM


def lstm_cell(W: Tensor, b: Tensor, x_t: Tensor, h: Tensor, C: Tensor) -> Tensor:
    """One LSTM step as a single tape node; returns ``[h_t | C_t]``.

    ``W`` is ``(H + I) x 4H`` with gate blocks ordered f, i, C~, o and acts on
    the concatenation ``[h, x_t]``.
    """
    W, b, x_t, h, C = (as_tensor(t) for t in (W, b, x_t, h, C))
    H = h.shape[-1]
    if W.shape != (H + x_t.shape[-1], 4 * H) or b.shape != (4 * H,) or C.shape != h.shape:
        raise ShapeError(f"lstm_cell: inconsistent shapes W{W.shape} b{b.shape} x{x_t.shape} h{h.shape} C{C.shape}")
    hx = np.concatenate([h.data, x_t.data], axis=-1)
    z = hx @ W.data + b.data
    f = expit(z[..., :H])
    i = expit(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = expit(z[..., 3 * H:])
    c_new = f * C.data + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    def backward(gout, needs):
        dh = gout[..., :H]
        dc = gout[..., H:] + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * C.data * f * (1.0 - f),
            dc * g * i * (1.0 - i),
            dc * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ], axis=-1)
        dz2 = dz.reshape(-1, 4 * H)
        dhx = dz @ W.data.T if (needs[2] or needs[3]) else None
        return (
            hx.reshape(-1, hx.shape[-1]).T @ dz2 if needs[0] else None,
            dz2.sum(axis=0) if needs[1] else None,
            dhx[..., H:] if needs[2] else None,
            dhx[..., :H] if needs[3] else None,
            dc * f if needs[4] else None,
        )

    return _emit("lstm_cell", np.concatenate([h_new, c_new], axis=-1), (W, b, x_t, h, C), backward)


# ------------------------------------------------------------ loss / dropout


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: ArrayLike, labels) -> Tensor:
    """Fused softmax + categorical cross-entropy in nats.

    ``logits`` is ``[G]`` with an integer label (scalar result) or ``[B, G]`` with
    ``B`` labels (per-row losses of shape ``[B]``).
    """
    logits = as_tensor(logits)
    if logits.ndim not in (1, 2):
        raise ShapeError(f"logits must be [G] or [B, G], got {logits.shape}")
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    n_classes = z.shape[1]
    if n_classes < 2:
        raise ShapeError("softmax_cross_entropy needs at least 2 classes")
    lab = np.atleast_1d(np.asarray(labels))
    if lab.shape != (z.shape[0],):
        raise ShapeError(f"expected {z.shape[0]} labels, got shape {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise IndexError("class labels must be integers")
    if np.any(lab < 0) or np.any(lab >= n_classes):
        raise IndexError(f"class label out of range [0, {n_classes})")

    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = log_norm - shifted[rows, lab]
    probs = np.exp(shifted - log_norm[:, None])

    def backward(g, needs):
        d = probs.copy()
        d[rows, lab] -= 1.0
        d *= np.reshape(g, (-1, 1))
        return (d[0] if single else d,)

    out = np.array(losses[0]) if single else losses
    return _emit("softmax_cross_entropy", out, (logits,), backward)


def dropout(x: ArrayLike, p: float, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; the identity in eval mode or when ``p == 0``."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs a seeded generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g, needs):
        return (g * mask,)

    return _emit("dropout", x.data * mask, (x,), backward)


# ------------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Gradients accumulate into leaves; the tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to the tape")
    tape = current_tape()
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(tape.nodes):
            g = node.output.grad
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            grads = node.backward(g, needs)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=np.float64)
                    else:
                        t.grad += gi
                elif t.grad is None:
                    # intermediate buffers are never updated in place, so
                    # sharing the array with a sibling input is safe
                    t.grad = gi
                else:
                    t.grad = t.grad + gi
    finally:
        tape.clear()
