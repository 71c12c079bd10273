"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive is a :class:`Function` subclass with a ``forward`` that works
on raw arrays and a ``backward`` that maps the output gradient to one gradient
per input. Calling a primitive on tensors that need gradients appends a node to
the active :class:`Tape`; :func:`backward` replays that tape in reverse and then
clears it.

Shapes must match exactly. The only implicit broadcast is :func:`bias_add`
(a vector added along the trailing axis); anything else goes through
:func:`broadcast_to`, which is an explicit op with its own reduction in the
backward pass.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .scan import affine_scan

DTYPE = np.float64

_tape_var: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("unmixers_tape", default=None)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("unmixers_grad", default=True)


def _all_finite(arr: np.ndarray) -> bool:
    # one reduction is much cheaper than isfinite().all(); it can only
    # false-positive on overflow, which is an error here anyway
    with np.errstate(over="ignore", invalid="ignore"):
        return bool(np.isfinite(arr.sum()))


class Tensor:
    """n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if not _all_finite(arr):
            raise NumericError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: tuple | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.tape_id = None
        t.name = None
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return Slice(index)(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("fn", "inputs", "out_shape")

    def __init__(self, fn, inputs, out_shape):
        self.fn = fn
        self.inputs = inputs
        self.out_shape = out_shape


class Tape:
    """Ordered record of the operations of one forward pass.

    Nodes are appended as operations execute, so inputs always precede the
    operation that consumes them. ``clear`` bumps a generation counter, which
    invalidates handles held by tensors from the previous pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, fn: "Function", inputs: Sequence[Tensor], out: Tensor) -> None:
        out.tape_id = (self, self.generation, len(self.nodes))
        out.requires_grad = True
        self.nodes.append(_Node(fn, tuple(inputs), out.data.shape))

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def __enter__(self) -> "Tape":
        self._token = _tape_var.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_var.reset(self._token)
        self.clear()


def current_tape() -> Tape:
    tape = _tape_var.get()
    if tape is None:
        tape = Tape()
        _tape_var.set(tape)
    return tape


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.tape_id is not None


class Function:
    """Base class for differentiable primitives.

    Subclasses implement ``forward(*arrays) -> array`` and
    ``backward(grad) -> tuple`` with one entry per input (``None`` allowed for
    inputs that never need a gradient). Values needed by ``backward`` are
    stashed on ``self`` during ``forward``.
    """

    def __call__(self, *inputs: Tensor) -> Tensor:
        arrays = [t.data for t in inputs]
        out_data = self.forward(*arrays)
        if not _all_finite(out_data):
            raise NumericError(f"{type(self).__name__} produced non-finite values")
        out = Tensor._from_op(out_data)
        if _grad_enabled.get() and any(_needs_grad(t) for t in inputs):
            current_tape().record(self, inputs, out)
        return out

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        return g, g


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class Scale(Function):
    def __init__(self, c: float):
        self.c = float(c)

    def forward(self, x):
        return x * self.c

    def backward(self, g):
        return (g * self.c,)


class BiasAdd(Function):
    def forward(self, x, b):
        return x + b

    def backward(self, g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


class Exp(Function):
    def forward(self, x):
        self.y = np.exp(x)
        return self.y

    def backward(self, g):
        return (g * self.y,)


class Softplus(Function):
    def forward(self, x):
        self.x = x
        return np.logaddexp(0.0, x)

    def backward(self, g):
        return (g * _sigmoid(self.x),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, g):
        return (g * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        self.y = _sigmoid(x)
        return self.y

    def backward(self, g):
        return (g * self.y * (1.0 - self.y),)


class Silu(Function):
    def forward(self, x):
        self.x = x
        self.s = _sigmoid(x)
        return x * self.s

    def backward(self, g):
        s = self.s
        return (g * (s + self.x * s * (1.0 - s)),)


ACTIVATIONS = {"relu": Relu, "silu": Silu, "sigmoid": Sigmoid}


# -------------------------------------------------------------- linear algebra


class MatMul(Function):
    """Matrix product over the last two axes.

    Leading (batch) axes must be identical on both operands, unless one
    operand is 2-D, in which case it is shared by every batch element.
    """

    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        a, b = self.a, self.b
        if b.ndim == 2 and a.ndim > 2:
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        elif a.ndim == 2 and b.ndim > 2:
            lead = tuple(range(b.ndim - 2))
            ga = np.tensordot(g, b, axes=(lead + (b.ndim - 1,), lead + (b.ndim - 1,)))
            gb = a.T @ g
        else:
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
        return ga, gb


def _check_matmul(a: Tensor, b: Tensor) -> None:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents disagree: {a.shape} @ {b.shape}")


# ------------------------------------------------------------------ reductions


class Sum(Function):
    def __init__(self, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, x):
        self.in_shape = x.shape
        return np.asarray(x.sum(axis=self.axis, keepdims=self.keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.in_shape).copy(),)


class SoftmaxAxis(Function):
    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, x):
        z = x - x.max(axis=self.axis, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=self.axis, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


class L1Loss(Function):
    def forward(self, pred, target):
        self.diff = pred - target
        return np.asarray(np.abs(self.diff).mean())

    def backward(self, g):
        d = np.sign(self.diff) * (g / self.diff.size)
        return d, -d


# -------------------------------------------------------------------- shaping


class Reshape(Function):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Transpose(Function):
    def __init__(self, axes):
        self.axes = tuple(axes)

    def forward(self, x):
        return np.ascontiguousarray(np.transpose(x, self.axes))

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.axes)),)


class Flip(Function):
    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, x):
        return np.flip(x, self.axis).copy()

    def backward(self, g):
        return (np.flip(g, self.axis),)


class BroadcastTo(Function):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        self.in_shape = x.shape
        return np.broadcast_to(x, self.shape)

    def backward(self, g):
        extra = g.ndim - len(self.in_shape)
        g = g.sum(axis=tuple(range(extra))) if extra else g
        axes = tuple(i for i, n in enumerate(self.in_shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)


class Slice(Function):
    def __init__(self, index):
        self.index = index

    def forward(self, x):
        self.in_shape = x.shape
        return np.array(x[self.index])

    def backward(self, g):
        out = np.zeros(self.in_shape)
        out[self.index] = g
        return (out,)


class Take(Function):
    """Gather along one axis with an integer index array of any shape."""

    def __init__(self, index: np.ndarray, axis: int):
        self.index = np.asarray(index, dtype=np.intp)
        self.axis = axis

    def forward(self, x):
        self.in_shape = x.shape
        self.axis = self.axis % x.ndim
        return np.take(x, self.index, axis=self.axis)

    def backward(self, g):
        out = np.zeros(self.in_shape)
        moved = np.moveaxis(out, self.axis, 0)
        gi = self.index.ndim
        gm = np.moveaxis(g, tuple(range(self.axis, self.axis + gi)), tuple(range(gi)))
        np.add.at(moved, self.index, gm)
        return (out,)


class Stack(Function):
    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, *xs):
        self.n = len(xs)
        return np.stack(xs, axis=self.axis)

    def backward(self, g):
        return tuple(np.take(g, i, axis=self.axis) for i in range(self.n))


class Concat(Function):
    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, *xs):
        self.sizes = [x.shape[self.axis] for x in xs]
        return np.concatenate(xs, axis=self.axis)

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


# --------------------------------------------------------------- sequence ops


class CausalConv1d(Function):
    """Depthwise causal convolution along axis -2 of a ``(..., L, d)`` input."""

    def forward(self, x, kernel, bias):
        w = kernel.shape[0]
        length = x.shape[-2]
        pad = [(0, 0)] * x.ndim
        pad[-2] = (w - 1, 0)
        xp = np.pad(x, pad)
        self.xp, self.kernel, self.length = xp, kernel, length
        y = np.broadcast_to(bias, x.shape).copy()
        for j in range(w):
            y += kernel[j] * xp[..., j:j + length, :]
        return y

    def backward(self, g):
        xp, kernel, length = self.xp, self.kernel, self.length
        w = kernel.shape[0]
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel)
        g2 = g.reshape(-1, g.shape[-1])
        for j in range(w):
            gxp[..., j:j + length, :] += g * kernel[j]
            gk[j] = (xp[..., j:j + length, :].reshape(-1, g.shape[-1]) * g2).sum(axis=0)
        return gxp[..., w - 1:, :], gk, g2.sum(axis=0)


class LinearRecurrence(Function):
    """h[t] = a[t] * h[t-1] + b[t] along ``axis`` with h[-1] = 0.

    The adjoint is the same recurrence run backwards in time:
    lam[t] = g[t] + a[t+1] * lam[t+1], giving db = lam and da = lam * h[t-1].
    """

    def __init__(self, axis: int, method: str = "sequential"):
        self.axis = axis
        self.method = method

    def forward(self, a, b):
        ax = self.axis % a.ndim
        self.ax = ax
        am = np.moveaxis(a, ax, 0)
        bm = np.moveaxis(b, ax, 0)
        h = affine_scan(am, bm, self.method)
        if not _all_finite(h):
            bad = ~np.isfinite(h.reshape(h.shape[0], -1)).all(axis=1)
            step = int(np.argmax(bad))
            raise NumericError(f"non-finite scan state at step {step}")
        self.a_m, self.h_m = am, h
        return np.moveaxis(h, 0, ax)

    def backward(self, g):
        am, h = self.a_m, self.h_m
        gm = np.moveaxis(g, self.ax, 0)
        a_next = np.concatenate([am[1:], np.ones_like(am[:1])], axis=0)
        lam = affine_scan(a_next[::-1], gm[::-1], self.method)[::-1]
        h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]], axis=0)
        ga = lam * h_prev
        return np.moveaxis(ga, 0, self.ax), np.moveaxis(lam, 0, self.ax)


# ------------------------------------------------------------- public wrappers


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return Add()(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return Sub()(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return Mul()(a, b)


def scale(x: Tensor, c: float) -> Tensor:
    return Scale(c)(x)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the trailing axis (the one allowed broadcast)."""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add: bias {b.shape} does not match trailing axis of {x.shape}")
    return BiasAdd()(x, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_matmul(a, b)
    return MatMul()(a, b)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else bias_add(y, bias)


def exp(x: Tensor) -> Tensor:
    return Exp()(x)


def softplus(x: Tensor) -> Tensor:
    return Softplus()(x)


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn()(x)


def relu(x: Tensor) -> Tensor:
    return Relu()(x)


def silu(x: Tensor) -> Tensor:
    return Silu()(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid()(x)


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    return SoftmaxAxis(_norm_axis(axis, x.ndim, "softmax_axis"))(x)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axis = _norm_axis(axis, x.ndim, "sum")
    return Sum(axis, keepdims)(x)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[_norm_axis(axis, x.ndim, "mean")]
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_same(pred, target, "l1_loss")
    return L1Loss()(pred, target)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and math.prod(shape) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    try:
        np.empty(x.shape).reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Reshape(shape)(x)


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            raise DimensionError("transpose needs rank >= 2")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    return Transpose([a % x.ndim for a in axes])(x)


def flip(x: Tensor, axis: int) -> Tensor:
    return Flip(_norm_axis(axis, x.ndim, "flip"))(x)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None
    if np.broadcast_shapes(x.shape, shape) != shape:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}")
    return BroadcastTo(shape)(x)


def take(x: Tensor, index, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim, "take")
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= x.shape[ax]):
        raise DimensionError(f"take: index out of range for axis of length {x.shape[ax]}")
    return Take(index, ax)(x)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in xs}
    if len(shapes) != 1:
        raise DimensionError(f"stack: inputs differ in shape {sorted(shapes)}")
    return Stack(_norm_axis(axis, xs[0].ndim + 1, "stack"))(*xs)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    ax = _norm_axis(axis, xs[0].ndim, "concat")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    return Concat(ax)(*xs)


def causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution of ``x`` (..., L, d) with ``kernel`` (w, d).

    The input is left-padded with w-1 zeros, so
    ``y[t, c] = sum_j kernel[j, c] * x[t - w + 1 + j, c] + bias[c]``.
    """
    if kernel.ndim != 2 or kernel.shape[0] < 1:
        raise DimensionError(f"conv kernel must be (w >= 1, d), got {kernel.shape}")
    if x.ndim < 2 or x.shape[-1] != kernel.shape[1] or bias.shape != (kernel.shape[1],):
        raise DimensionError(
            f"conv feature mismatch: input {x.shape}, kernel {kernel.shape}, bias {bias.shape}")
    return CausalConv1d()(x, kernel, bias)


def linear_recurrence(a: Tensor, b: Tensor, axis: int = 0, method: str = "sequential") -> Tensor:
    _check_same(a, b, "linear_recurrence")
    if method not in ("sequential", "parallel"):
        raise ContractError(f"unknown scan method {method!r}")
    return LinearRecurrence(_norm_axis(axis, a.ndim, "linear_recurrence"), method)(a, b)


# ------------------------------------------------------------------- backward


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``root`` depends on.

    Gradients accumulate into existing ``.grad`` buffers, and fan-out inside
    the graph is summed. The tape that recorded ``root`` is cleared afterwards.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    seed = np.ones(root.shape)
    if root.tape_id is None:
        if not root.requires_grad:
            raise ContractError("root does not require grad and was not recorded on a tape")
        root.grad = seed if root.grad is None else root.grad + seed
        return
    tape, gen, idx = root.tape_id
    if gen != tape.generation:
        raise ContractError("root belongs to a tape that has already been cleared")

    grads: dict[int, np.ndarray] = {idx: seed}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    nodes = tape.nodes
    for i in range(idx, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        in_grads = node.fn.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if t.tape_id is not None and t.tape_id[0] is tape and t.tape_id[1] == gen:
                j = t.tape_id[2]
                grads[j] = gi if j not in grads else grads[j] + gi
            elif t.requires_grad and t.tape_id is None:
                key = id(t)
                leaves[key] = t
                leaf_grads[key] = gi if key not in leaf_grads else leaf_grads[key] + gi
    for key, t in leaves.items():
        g = np.asarray(leaf_grads[key], dtype=DTYPE).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.clear()


# ------------------------------------------------------------------ gradcheck


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-5) -> float:
    """Largest relative error between autodiff and central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape():
        out = f(leaf)
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
        backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    numeric = numerical_grad(f, base, eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


def numerical_grad(f: Callable[[Tensor], Tensor], base: np.ndarray, eps: float) -> np.ndarray:
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    probe = base.copy()
    pflat = probe.reshape(-1)
    with no_grad():
        for i in range(base.size):
            orig = pflat[i]
            pflat[i] = orig + eps
            fp = _scalar(f(Tensor(probe)))
            pflat[i] = orig - eps
            fm = _scalar(f(Tensor(probe)))
            pflat[i] = orig
            flat[i] = (fp - fm) / (2 * eps)
    return grad


def _scalar(t: Tensor) -> float:
    v = float(np.asarray(t.data).reshape(-1)[0])
    if not math.isfinite(v):
        raise NumericError("function evaluated to a non-finite value")
    return v


def parameters_grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Like :func:`grad_check`, but over a set of leaf tensors used by a closure."""
    params = list(params)
    for p in params:
        p.grad = None
    with Tape():
        backward(loss_fn())
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar(loss_fn())
                flat[i] = orig - eps
                fm = _scalar(loss_fn())
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * eps)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
            if p.size:
                worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
