"""Reverse-mode automatic differentiation on numpy arrays.

Every vector-Jacobian product is itself written with differentiable
``Tensor`` operations, so a gradient returned by :func:`grad` with
``create_graph=True`` is an ordinary graph node and can be differentiated
again. That is what lets an outer loss see through the inner gradient steps
of the planner.

All data is float64. Binary operations follow numpy broadcasting; the
backward pass sums gradients back to each operand's shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "as_tensor",
    "parameter",
    "grad",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "concat",
    "stack",
    "huber",
    "softmax",
    "conv2d",
    "conv_transpose2d",
    "spatial_soft_argmax",
    "im2col",
    "col2im",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Operand lies outside the domain of the operation (log of <= 0, x / 0)."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording graph nodes (thread-local)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def enable_grad(enabled: bool = True):
    """Set whether operations record graph nodes (thread-local)."""
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


VJP = Callable[["Tensor", Sequence[bool]], Sequence["Tensor | None"]]


class Tensor:
    """A float64 array that may be a node of a computation graph.

    Leaves created with ``requires_grad=True`` are trainable parameters.
    Results of operations on such tensors keep references to their inputs
    and a vector-Jacobian product; constants keep neither.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: VJP | None = None

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        kind = "param" if self.requires_grad and not self._parents else (
            "node" if self.requires_grad else "const")
        return f"Tensor({kind}, shape={self.shape}, data={np.array2string(self.data, precision=4, threshold=8)})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def square(self):
        return square(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp: VJP) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src_shape = x.shape

    def vjp(g, need):
        return (broadcast_to(g, src_shape),)

    return _node(data, (x,), vjp)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src_shape = x.shape

    def vjp(g, need):
        return (sum_to(g, src_shape),)

    return _node(np.broadcast_to(x.data, shape).copy(), (x,), vjp)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src_shape = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src_shape} into {shape}") from None

    def vjp(g, need):
        return (reshape(g, src_shape),)

    return _node(data, (x,), vjp)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g, need):
        return (transpose(g, inverse),)

    return _node(np.transpose(x.data, axes), (x,), vjp)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    src_shape = x.shape

    def vjp(g, need):
        return (scatter(g, src_shape, index),)

    return _node(np.array(x.data[index]), (x,), vjp)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis
               for p in parts)


def scatter(x: Tensor, shape: tuple, index) -> Tensor:
    """Zeros of ``shape`` with ``x`` added at ``index`` (adjoint of indexing)."""
    data = np.zeros(shape)
    if _is_basic(index):
        data[index] = x.data
    else:
        np.add.at(data, index, x.data)

    def vjp(g, need):
        return (getitem(g, index),)

    return _node(data, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g, need):
        out = []
        for i, n in enumerate(need):
            if not n:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(sl)))
        return out

    return _node(data, tuple(tensors), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    expanded = []
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack needs equal shapes, got {shape} and {t.shape}")
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, shape[:ax] + (1,) + shape[ax:]))
    return concat(expanded, axis=axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src_shape = x.shape
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        kept_shape = (1,) * x.ndim
    else:
        axes = tuple(a % x.ndim for a in np.atleast_1d(axis))
        kept_shape = tuple(1 if i in axes else s for i, s in enumerate(src_shape))

    def vjp(g, need):
        return (broadcast_to(reshape(g, kept_shape), src_shape),)

    return _node(np.asarray(data), (x,), vjp)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _binary(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)

    def vjp(g, need):
        return (sum_to(g, a.shape) if need[0] else None,
                sum_to(g, b.shape) if need[1] else None)

    return _node(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)

    def vjp(g, need):
        return (sum_to(g, a.shape) if need[0] else None,
                sum_to(neg(g), b.shape) if need[1] else None)

    return _node(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)

    def vjp(g, need):
        return (sum_to(mul(g, b), a.shape) if need[0] else None,
                sum_to(mul(g, a), b.shape) if need[1] else None)

    return _node(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")

    def vjp(g, need):
        ga = sum_to(div(g, b), a.shape) if need[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if need[1] else None
        return ga, gb

    return _node(a.data / b.data, (a, b), vjp)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _node(-x.data, (x,), lambda g, need: (neg(g),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    out = _node(data, (x,), lambda g, need: (mul(g, out),))
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _node(np.log(x.data), (x,), lambda g, need: (div(g, x),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = _node(np.tanh(x.data), (x,), lambda g, need: (mul(g, 1.0 - square(out)),))
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    data = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = _node(data, (x,), lambda g, need: (mul(g, mul(out, 1.0 - out)),))
    return out


def softplus(x) -> Tensor:
    x = as_tensor(x)
    data = np.logaddexp(0.0, x.data)
    return _node(data, (x,), lambda g, need: (mul(g, sigmoid(x)),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = Tensor((x.data > 0).astype(np.float64))
    return _node(x.data * mask.data, (x,), lambda g, need: (mul(g, mask),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g, need: (mul(g, mul(x, 2.0)),))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the derivative is 1 on the closed interval."""
    x = as_tensor(x)
    mask = Tensor(((x.data >= lo) & (x.data <= hi)).astype(np.float64))
    return _node(np.clip(x.data, lo, hi), (x,), lambda g, need: (mul(g, mask),))


def huber(x, delta: float) -> Tensor:
    """Elementwise Huber: x^2/2 inside [-delta, delta], linear outside.

    At |x| == delta the quadratic branch's derivative is used, so the
    gradient ``clip(x, -delta, delta)`` is continuous.
    """
    if not delta > 0:
        raise DomainError(f"huber delta must be positive, got {delta}")
    x = as_tensor(x)
    ax = np.abs(x.data)
    data = np.where(ax <= delta, 0.5 * x.data * x.data, delta * ax - 0.5 * delta * delta)
    return _node(data, (x,), lambda g, need: (mul(g, clip(x, -delta, delta)),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(x - shift)
    return e / tsum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as err:
        raise ShapeError(str(err)) from None

    def vjp(g, need):
        ga = sum_to(matmul(g, swapaxes(b, -1, -2)), a.shape) if need[0] else None
        gb = sum_to(matmul(swapaxes(a, -1, -2), g), b.shape) if need[1] else None
        return ga, gb

    return _node(data, (a, b), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

KSIZE = 5
PAD = 2


def _out_size(n: int, stride: int) -> int:
    return -(-n // stride)


def im2col(x: Tensor, stride: int) -> Tensor:
    """Patches of a [B, C, H, W] batch as a [C*25, B*H'*W'] matrix (5x5, pad 2)."""
    B, C, H, W = x.shape
    Ho, Wo = _out_size(H, stride), _out_size(W, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    cols = np.empty((C, KSIZE, KSIZE, B, Ho, Wo))
    for i in range(KSIZE):
        for j in range(KSIZE):
            patch = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    shape = x.shape

    def vjp(g, need):
        return (col2im(g, shape, stride),)

    return _node(cols.reshape(C * KSIZE * KSIZE, B * Ho * Wo), (x,), vjp)


def col2im(cols: Tensor, shape: tuple, stride: int) -> Tensor:
    """Scatter-add patches back onto a [B, C, H, W] canvas; adjoint of im2col."""
    B, C, H, W = shape
    Ho, Wo = _out_size(H, stride), _out_size(W, stride)
    if cols.shape != (C * KSIZE * KSIZE, B * Ho * Wo):
        raise ShapeError(f"col2im: cols {cols.shape} do not fit image shape {shape}")
    blocks = cols.data.reshape(C, KSIZE, KSIZE, B, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * PAD, W + 2 * PAD))
    for i in range(KSIZE):
        for j in range(KSIZE):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                blocks[:, i, j].transpose(1, 0, 2, 3)

    def vjp(g, need):
        return (im2col(g, stride),)

    return _node(xp[:, :, PAD:PAD + H, PAD:PAD + W].copy(), (cols,), vjp)


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank - 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return x, False


def conv2d(x, kernels: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """5x5 convolution, zero padding 2, output size ceil(H / stride).

    ``x`` is [C, H, W] or [B, C, H, W]; ``kernels`` is [C_out, C_in, 5, 5].
    """
    x, squeeze = _batched(as_tensor(x), 4)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    cout, cin, kh, kw = kernels.shape
    if (kh, kw) != (KSIZE, KSIZE):
        raise ShapeError(f"kernels must be 5x5, got {kh}x{kw}")
    B, C, H, W = x.shape
    if C != cin:
        raise ShapeError(f"input has {C} channels, kernels expect {cin}")
    if H < KSIZE or W < KSIZE:
        raise ShapeError(f"input spatial size {H}x{W} smaller than 5x5")
    Ho, Wo = _out_size(H, stride), _out_size(W, stride)
    out = matmul(reshape(kernels, (cout, cin * KSIZE * KSIZE)), im2col(x, stride))
    out = transpose(reshape(out, (cout, B, Ho, Wo)), (1, 0, 2, 3))
    if bias is not None:
        out = out + reshape(bias, (1, cout, 1, 1))
    return reshape(out, out.shape[1:]) if squeeze else out


def conv_transpose2d(x, kernels: Tensor, bias: Tensor | None = None, stride: int = 1,
                     out_hw: tuple[int, int] | None = None) -> Tensor:
    """Adjoint of :func:`conv2d` in its input; ``kernels`` is [C_in, C_out, 5, 5].

    The output spatial size defaults to ``stride`` times the input size.
    """
    x, squeeze = _batched(as_tensor(x), 4)
    cin, cout, kh, kw = kernels.shape
    B, C, h, w = x.shape
    if C != cin:
        raise ShapeError(f"input has {C} channels, kernels expect {cin}")
    H, W = out_hw if out_hw is not None else (h * stride, w * stride)
    if (_out_size(H, stride), _out_size(W, stride)) != (h, w):
        raise ShapeError(f"output size {H}x{W} incompatible with input {h}x{w} at stride {stride}")
    flat = reshape(transpose(x, (1, 0, 2, 3)), (cin, B * h * w))
    cols = matmul(swapaxes(reshape(kernels, (cin, cout * KSIZE * KSIZE)), 0, 1), flat)
    out = col2im(cols, (B, cout, H, W), stride)
    if bias is not None:
        out = out + reshape(bias, (1, cout, 1, 1))
    return reshape(out, out.shape[1:]) if squeeze else out


def spatial_soft_argmax(features, temperature: float = 1.0) -> Tensor:
    """Expected (column, row) image coordinate per channel, each in [-1, 1].

    ``features`` is [C, H, W] or [B, C, H, W]; the result is [2C] or
    [B, 2C] laid out as (x_0, y_0, x_1, y_1, ...).
    """
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    f, squeeze = _batched(as_tensor(features), 4)
    B, C, H, W = f.shape
    p = softmax(reshape(f, (B, C, H * W)) * (1.0 / temperature), axis=-1)
    cols = np.linspace(-1.0, 1.0, W) if W > 1 else np.zeros(1)
    rows = np.linspace(-1.0, 1.0, H) if H > 1 else np.zeros(1)
    grid = np.stack([np.tile(cols, H), np.repeat(rows, W)], axis=1)  # [H*W, 2]
    # rounding can push an expectation a hair outside [-1, 1]
    out = clip(reshape(matmul(p, Tensor(grid)), (B, 2 * C)), -1.0, 1.0)
    return reshape(out, (2 * C,)) if squeeze else out


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _reaching(root: Tensor, targets: set[int]) -> tuple[list[Tensor], dict[int, bool]]:
    """Topological order of graph nodes under ``root`` that lead to a target."""
    reach: dict[int, bool] = {}
    order: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            hit = key in targets or any(reach.get(id(p), False) for p in node._parents)
            reach[key] = hit
            if hit:
                order.append(node)
            continue
        if key in reach:
            continue
        reach[key] = False
        stack.append((node, True))
        if key in targets and len(targets) == 1:
            continue
        for p in node._parents:
            if p.requires_grad and id(p) not in reach:
                stack.append((p, False))
    return order, reach


def grad(scalar: Tensor, wrt: Iterable[Tensor], create_graph: bool = True) -> list[Tensor]:
    """Gradient of a one-element tensor with respect to each of ``wrt``.

    With ``create_graph`` the returned tensors are graph nodes, so an
    expression containing them can be differentiated again. Tensors that
    ``scalar`` does not depend on get a zero gradient of matching shape.
    """
    wrt = list(wrt)
    if scalar.size != 1:
        raise ShapeError(f"grad needs a 1-element output, got shape {scalar.shape}")
    if not scalar.requires_grad:
        return [Tensor(np.zeros(w.shape)) for w in wrt]
    targets = {id(w) for w in wrt}
    order, reach = _reaching(scalar, targets)
    grads: dict[int, Tensor] = {id(scalar): Tensor(np.ones(scalar.shape))}
    with enable_grad(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or not node._parents:
                continue
            need = [p.requires_grad and reach.get(id(p), False) for p in node._parents]
            if not any(need):
                continue
            for p, n, pg in zip(node._parents, need, node._vjp(g, need)):
                if not n or pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = Tensor(np.zeros(w.shape))
        elif not create_graph:
            g = g.detach()
        out.append(g)
    return out
