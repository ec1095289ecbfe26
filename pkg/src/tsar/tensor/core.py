"""Dense tensors with reverse-mode differentiation to arbitrary order.

Every primitive records a :class:`Function` node when gradient mode is on and
one of its inputs requires a gradient.  Backward rules are themselves written
with differentiable tensor operations, so running :func:`grad` with
``create_graph=True`` leaves a graph that can be differentiated again.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
import warnings
from typing import Iterator, Sequence

import numpy as np

_counter = itertools.count()


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.strict = False
        self.tapes: list = []


_state = _State()


class ShapeError(ValueError):
    """Raised when operand shapes do not fit the requested primitive."""


class NonFiniteError(FloatingPointError):
    """Raised in strict mode when a primitive receives NaN or inf."""


class UnusedInputWarning(UserWarning):
    pass


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def set_grad_enabled(mode: bool) -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = bool(mode)
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


@contextlib.contextmanager
def strict_mode(enabled: bool = True) -> Iterator[None]:
    """Reject non-finite primitive inputs while active."""
    prev = _state.strict
    _state.strict = enabled
    try:
        yield
    finally:
        _state.strict = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional float array that can take part in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "creator", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.creator: Function | None = None
        self.name = name

    # -- array-ish properties ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, threshold=8)}{flag})"

    # -- operators -------------------------------------------------------------
    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return _fast_tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return Add.apply(self, self._wrap(other))

    def __radd__(self, other):
        return Add.apply(self._wrap(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._wrap(other))

    def __rsub__(self, other):
        return Sub.apply(self._wrap(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._wrap(other))

    def __rmul__(self, other):
        return Mul.apply(self._wrap(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._wrap(other))

    def __rtruediv__(self, other):
        return Div.apply(self._wrap(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, self._wrap(other))

    def __rmatmul__(self, other):
        return MatMul.apply(self._wrap(other), self)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # -- methods ---------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=_norm_axis(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        axes = _norm_axis(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(axes))

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    @property
    def T(self):
        return self.transpose()

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def relu(self):
        return Relu.apply(self)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def sum_to(self, shape):
        return sum_to(self, shape)


def _norm_axis(axis, ndim: int) -> tuple[int, ...] | None:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _fast_tensor(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr if isinstance(arr, np.ndarray) else np.asarray(arr)
    t.requires_grad = False
    t.creator = None
    t.name = None
    return t


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# graph nodes
# ---------------------------------------------------------------------------


class Function:
    """One recorded primitive application.

    Subclasses implement ``forward`` on raw arrays and ``backward`` on
    Tensors.  ``attrs`` must fully describe the op so a tape can replay it.
    """

    inputs: tuple[Tensor, ...] = ()
    seq: int = -1

    @property
    def needs(self) -> tuple[bool, ...]:
        """Which input gradients the current backward pass must produce."""
        return self.__dict__.get("_needs") or tuple(t.requires_grad for t in self.inputs)

    def __init__(self, **attrs):
        self.attrs = attrs
        for key, value in attrs.items():
            setattr(self, key, value)

    @classmethod
    def apply(cls, *inputs: Tensor, **attrs) -> Tensor:
        fn = cls.__new__(cls)
        fn.attrs = attrs
        fn.__dict__.update(attrs)
        state = _state
        if state.strict:
            for t in inputs:
                if not np.all(np.isfinite(t.data)):
                    raise NonFiniteError(f"{cls.__name__}: non-finite input")
        out = _fast_tensor(fn.forward(*[t.data for t in inputs]))
        if state.grad_enabled:
            for t in inputs:
                if t.requires_grad:
                    fn.inputs = inputs
                    fn.seq = next(_counter)
                    out.requires_grad = True
                    out.creator = fn
                    for tape in state.tapes:
                        tape._record(fn, out)
                    break
        return out

    def forward(self, *xs: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, g: Tensor, out: Tensor) -> tuple[Tensor | None, ...]:  # pragma: no cover
        raise NotImplementedError

    def replay(self, *xs: np.ndarray) -> np.ndarray:
        return type(self)(**self.attrs).forward(*xs)

    @property
    def kind(self) -> str:
        return type(self).__name__


def _const(arr: np.ndarray) -> Tensor:
    return Tensor(arr)


def _reduce_shape(shape: tuple[int, ...], target: tuple[int, ...]):
    lead = len(shape) - len(target)
    axes = list(range(lead))
    for i, n in enumerate(target):
        if n == 1 and shape[lead + i] != 1:
            axes.append(lead + i)
    return tuple(axes), lead


class SumTo(Function):
    def forward(self, x):
        if x.shape == tuple(self.shape):
            return x
        axes, lead = _reduce_shape(x.shape, tuple(self.shape))
        out = x.sum(axis=axes, keepdims=True)
        if lead:
            out = out.reshape(out.shape[lead:])
        return out

    def backward(self, g, out):
        return (broadcast_to(g, self.inputs[0].shape),)


class BroadcastTo(Function):
    def forward(self, x):
        return np.broadcast_to(x, self.shape).copy()

    def backward(self, g, out):
        return (sum_to(g, self.inputs[0].shape),)


def sum_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return SumTo.apply(x, shape=shape)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return BroadcastTo.apply(x, shape=shape)


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g, out):
        a, b = self.inputs
        return (
            sum_to(g, a.shape) if self.needs[0] else None,
            sum_to(g, b.shape) if self.needs[1] else None,
        )


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g, out):
        a, b = self.inputs
        return (
            sum_to(g, a.shape) if self.needs[0] else None,
            sum_to(-g, b.shape) if self.needs[1] else None,
        )


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, g, out):
        return (-g,)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g, out):
        a, b = self.inputs
        return (
            sum_to(g * b, a.shape) if self.needs[0] else None,
            sum_to(g * a, b.shape) if self.needs[1] else None,
        )


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g, out):
        a, b = self.inputs
        ga = gb = None
        if self.needs[0]:
            ga = sum_to(g / b, a.shape)
        if self.needs[1]:
            gb = sum_to(-(g * out) / b, b.shape)
        return ga, gb


class Pow(Function):
    def forward(self, x):
        return x**self.exponent

    def backward(self, g, out):
        (x,) = self.inputs
        p = self.exponent
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (g * (x * 2.0),)
        return (g * (x ** (p - 1.0) * p),)


class Exp(Function):
    def forward(self, x):
        return np.exp(x)

    def backward(self, g, out):
        return (g * out,)


class Log(Function):
    def forward(self, x):
        return np.log(x)

    def backward(self, g, out):
        return (g / self.inputs[0],)


class Sigmoid(Function):
    def forward(self, x):
        # exp of a non-positive argument only, so large |x| never overflows
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
        # saturated values are pulled one ulp inside so gates stay in the open interval
        lo = np.finfo(y.dtype).smallest_subnormal
        return np.clip(y, lo, np.nextafter(y.dtype.type(1), y.dtype.type(0)))

    def backward(self, g, out):
        return (g * (out * (1.0 - out)),)


class Relu(Function):
    def forward(self, x):
        return np.maximum(x, 0)

    def backward(self, g, out):
        mask = (self.inputs[0].data > 0).astype(g.dtype)
        return (g * _const(mask),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
        return a @ b

    def backward(self, g, out):
        a, b = self.inputs
        ga = sum_to(g @ b.swapaxes(-1, -2), a.shape) if self.needs[0] else None
        gb = sum_to(a.swapaxes(-1, -2) @ g, b.shape) if self.needs[1] else None
        return ga, gb


class Sum(Function):
    def forward(self, x):
        return x.sum(axis=self.axis, keepdims=self.keepdims)

    def backward(self, g, out):
        x = self.inputs[0]
        if not self.keepdims:
            shape = list(x.shape)
            for a in self.axis:
                shape[a] = 1
            g = g.reshape(tuple(shape))
        return (broadcast_to(g, x.shape),)


class Reshape(Function):
    def forward(self, x):
        return x.reshape(self.shape)

    def backward(self, g, out):
        return (g.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, x):
        return x.transpose(self.axes)

    def backward(self, g, out):
        inv = tuple(np.argsort(self.axes))
        return (g.transpose(inv),)


class GetItem(Function):
    def forward(self, x):
        return np.array(x[self.index])

    def backward(self, g, out):
        return (SetItemZeros.apply(g, index=self.index, shape=self.inputs[0].shape),)


class SetItemZeros(Function):
    """Scatter ``g`` into a zero array at ``index`` (adjoint of indexing)."""

    def forward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        np.add.at(out, self.index, g)
        return out

    def backward(self, gg, out):
        return (gg[self.index],)


class Gather(Function):
    """Pick entries of the flattened input at fixed flat indices."""

    def forward(self, x):
        return x.reshape(-1)[self.flat_index]

    def backward(self, g, out):
        return (Scatter.apply(g, flat_index=self.flat_index, shape=self.inputs[0].shape),)


class Scatter(Function):
    def forward(self, g):
        size = int(np.prod(self.shape))
        flat = np.bincount(self.flat_index.reshape(-1), weights=g.reshape(-1), minlength=size)
        return flat.astype(g.dtype, copy=False).reshape(self.shape)

    def backward(self, gg, out):
        return (Gather.apply(gg, flat_index=self.flat_index),)


class LogSumExp(Function):
    """log(sum(exp(x))) over the last axis, keeping that axis as size 1."""

    def forward(self, x):
        m = x.max(axis=-1, keepdims=True)
        return m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))

    def backward(self, g, out):
        x = self.inputs[0]
        return (g * (x - out).exp(),)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def _collect(output: Tensor, targets: set[int]) -> list[tuple[Function, Tensor, tuple[bool, ...]]]:
    """Nodes between ``output`` and the target tensors, latest first.

    Traversal stops at targets, and nodes with no path to a target are
    dropped, so repeated calls inside a long unrolled loop stay linear.
    """
    seen: set[int] = set()
    nodes: list[tuple[Function, Tensor]] = []
    stack = [output] if output.creator is not None and id(output) not in targets else []
    while stack:
        t = stack.pop()
        fn = t.creator
        if id(fn) in seen:
            continue
        seen.add(id(fn))
        nodes.append((fn, t))
        for inp in fn.inputs:
            if inp.creator is not None and inp.requires_grad and id(inp) not in targets and id(inp.creator) not in seen:
                stack.append(inp)
    nodes.sort(key=lambda pair: pair[0].seq)
    relevant: set[int] = set()
    kept = []
    for fn, out in nodes:
        needs = tuple(
            inp.requires_grad
            and (id(inp) in targets or (inp.creator is not None and id(inp.creator) in relevant))
            for inp in fn.inputs
        )
        if any(needs):
            relevant.add(id(fn))
            kept.append((fn, out, needs))
    kept.reverse()
    return kept


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Tensor | None = None,
    create_graph: bool = False,
    allow_unused: bool = True,
) -> list[Tensor]:
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    With ``create_graph`` the returned tensors carry their own graph and can
    be differentiated again.  Inputs the output does not depend on get a zero
    gradient and an :class:`UnusedInputWarning` (or an error when
    ``allow_unused`` is false).
    """
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"grad: loss must be a scalar, got shape {output.shape}")
        grad_output = _fast_tensor(np.ones_like(output.data))
    targets = {id(t) for t in inputs}
    grads: dict[int, Tensor] = {id(output): grad_output}
    with set_grad_enabled(create_graph):
        for fn, out, needs in _collect(output, targets):
            g = grads.get(id(out))
            if g is None:
                continue
            fn._needs = needs
            try:
                in_grads = fn.backward(g, out)
            finally:
                fn._needs = None
            for inp, gi, need in zip(fn.inputs, in_grads, needs):
                if gi is None or not need:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
    result = []
    unused = []
    for i, t in enumerate(inputs):
        g = grads.get(id(t))
        if g is None:
            if not allow_unused:
                raise ValueError(f"input {i} is not connected to the output")
            unused.append(i)
            g = _fast_tensor(np.zeros_like(t.data))
        elif not create_graph and g.creator is not None:
            g = _fast_tensor(g.data)
        result.append(g)
    if unused:
        warnings.warn(f"inputs {unused} do not affect the output; returning zeros", UnusedInputWarning, stacklevel=2)
    return result
