"""Dense tensors recorded on an explicit reverse-mode gradient tape.

A :class:`Tape` is opened per forward pass::

    with Tape() as tape:
        loss = (w * w).sum()
    tape.backward(loss)
    w.grad  # -> 2 * w.data

Operations executed while no tape is active are not recorded, which makes
inference free of bookkeeping. Tensors default to float32; pass
``dtype=np.float64`` for gradient checking.
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from crossembed.errors import ContractError, NumericError, ShapeError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "crossembed_active_tape", default=None
)
_DEBUG = False

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def set_debug(enabled: bool) -> None:
    """Toggle the finite-output check run after every op."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic sugar; the real work lives in the module-level ops
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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of the differentiable ops of one forward pass.

    Nodes are appended as ops execute, so the list is already topologically
    sorted and the backward sweep is a plain reverse iteration.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple, backward: BackwardFn) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def reset(self) -> None:
        self.nodes = []

    def backward(self, root: Tensor) -> None:
        """Propagate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires it.

        Leaf gradients accumulate into existing ``.grad`` buffers. The tape is
        cleared afterwards.
        """
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if not self.nodes:
            raise ContractError("backward called on an empty tape")
        produced = {id(node.out) for node in self.nodes}
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        owned: set[int] = set()
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            owned.discard(id(node.out))
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    _accumulate(grads, owned, key, gi, inp.data)
                else:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    if isinstance(gi, _SliceGrad):
                        inp.grad[gi.index] += gi.value
                    else:
                        inp.grad += gi
        self.reset()


class _SliceGrad:
    """Gradient that is non-zero only on ``index`` (a basic, non-repeating index)."""

    __slots__ = ("index", "value")

    def __init__(self, index, value: np.ndarray):
        self.index = index
        self.value = value


def _accumulate(grads: dict, owned: set, key: int, gi, like: np.ndarray) -> None:
    prev = grads.get(key)
    if isinstance(gi, _SliceGrad):
        if prev is None:
            prev = np.zeros_like(like)
        elif key not in owned:
            prev = prev.copy()
        prev[gi.index] += gi.value
        grads[key] = prev
        owned.add(key)
    elif prev is None:
        grads[key] = gi
    elif key in owned:
        prev += gi
    else:
        grads[key] = prev + gi
        owned.add(key)


def backward(tape: Tape, root: Tensor) -> None:
    """Functional alias for :meth:`Tape.backward`."""
    tape.backward(root)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _make(data: np.ndarray, inputs: tuple, backward_fn: BackwardFn) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs if isinstance(t, Tensor)):
            raise NumericError("non-finite output from an op with finite inputs")
    req = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req, dtype=data.dtype)
    if req:
        tape = _ACTIVE_TAPE.get()
        if tape is not None:
            tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# binary elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b)
    return _make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b)
    return _make(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading batch axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims mismatch: {a.shape} @ {b.shape}") from None

    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes so weight products run as one 2-D GEMM
        K, N = b.shape
        a2 = a.data.reshape(-1, K)

        def bw_folded(g):
            g2 = g.reshape(-1, N)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make((a2 @ b.data).reshape(a.shape[:-1] + (N,)), (a, b), bw_folded)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# unary elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def hinge(x: Tensor) -> Tensor:
    """``max(x, 0)`` whose subgradient at exactly 0 takes the active branch."""
    mask = x.data >= 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make(y, (x,), lambda g: (g * y * (1 - y),))


_GELU_C = np.float32(math.sqrt(2.0 / math.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * (d * d * d))
    t = np.tanh(inner)
    y = 0.5 * d * (1 + t)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1 + t) + 0.5 * d * (1 - t * t) * dinner),)

    return _make(y.astype(x.dtype), (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (g * 0.5 / y,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(y, dtype=x.dtype), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    y = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _make(np.asarray(y, dtype=x.dtype), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make(y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated advanced indices accumulate in backward."""
    if isinstance(index, Tensor):
        raise ContractError("index with integer arrays, not Tensors")
    y = x.data[index]
    advanced = _is_advanced(index)

    def bw(g):
        if not advanced:
            return (_SliceGrad(index, g),)
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.ascontiguousarray(y), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        y = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"cannot stack shapes {shapes}") from None
    n = len(tensors)
    return _make(
        y, tensors, lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis))
    )


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; those entries get zero gradient."""
    mask = np.asarray(mask, dtype=bool)
    y = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return _make(y, (x,), lambda g: (np.where(mask, 0, g).astype(g.dtype),))


# ---------------------------------------------------------------------------
# fused ops


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain * xhat + bias``."""
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs last dim {h}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx.astype(x.dtype), dgain, dbias

    return _make(y.astype(x.dtype), (x, gain, bias), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the table gradient."""
    ids = np.asarray(ids)
    if ids.size and not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"ids must be integers, got {ids.dtype}")
    ids = ids.astype(np.int64)
    vocab = table.shape[0]
    bad = ids[(ids < 0) | (ids >= vocab)]
    if bad.size:
        raise IndexError(f"token id {int(bad.flat[0])} out of range for table of {vocab} rows")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], (table,), bw)


L2_EPS = 1e-12


def l2_normalize(x: Tensor, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """Divide by ``max(||x||_2, eps)`` along ``axis``."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    active = norm > eps

    def bw(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return ((g - np.where(active, y * proj, 0)) / denom,)

    return _make(y.astype(x.dtype), (x,), bw)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
