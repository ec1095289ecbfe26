"""Explicit computation records over the implicit graph.

A :class:`Tape` watches a set of root tensors (parameters) and records every
node created while it is active, in creation order.  It can compute gradients
for its roots and replay its forward computation from new root values.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import Function, ShapeError, Tensor, _state, grad


@dataclass(frozen=True)
class GradMode:
    create_graph: bool = False


class GradientMap(dict):
    """``root index -> gradient`` plus the indices the loss did not reach."""

    unused: frozenset[int] = frozenset()


class Tape:
    def __init__(self, roots: Sequence[Tensor] = ()):
        self.nodes: list[Function] = []
        self.outputs: list[Tensor] = []
        self.roots: list[Tensor] = []
        self.watch(*roots)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            t.requires_grad = True
            self.roots.append(t)

    def _record(self, fn: Function, out: Tensor) -> None:
        self.nodes.append(fn)
        self.outputs.append(out)

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def check_order(self) -> bool:
        """True when every recorded input was produced before its consumer."""
        position = {id(out): i for i, out in enumerate(self.outputs)}
        for i, fn in enumerate(self.nodes):
            for inp in fn.inputs:
                j = position.get(id(inp))
                if j is not None and j >= i:
                    return False
        return True

    def replay(self, values: Mapping[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every recorded output from (possibly new) root arrays.

        ``values`` maps root index to a replacement array; roots not listed
        keep their current data.
        """
        env: dict[int, np.ndarray] = {}
        for i, root in enumerate(self.roots):
            env[id(root)] = np.asarray(values[i]) if values and i in values else root.data
        results = []
        for fn, out in zip(self.nodes, self.outputs):
            arrays = [env.get(id(t), t.data) for t in fn.inputs]
            value = fn.replay(*arrays)
            env[id(out)] = value
            results.append(value)
        return results

    def gradient(self, loss: Tensor, mode: GradMode = GradMode()) -> GradientMap:
        return backward(self, loss, mode)


def backward(tape: Tape, loss: Tensor, mode: GradMode = GradMode()) -> GradientMap:
    """d(loss)/d(root) for every root on ``tape``.

    Roots the loss does not depend on come back as zeros and are listed in
    ``GradientMap.unused``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")

    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        grads = grad(loss, tape.roots, create_graph=mode.create_graph, allow_unused=True)
    reached = _reachable(loss)
    out = GradientMap(enumerate(grads))
    out.unused = frozenset(i for i, r in enumerate(tape.roots) if id(r) not in reached)
    return out


def _reachable(loss: Tensor) -> set[int]:
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.creator is not None:
            stack.extend(t.creator.inputs)
    return seen


def grad_check(
    fn: Callable[..., Tensor],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
    dtype=np.float64,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` receives Tensors built from ``params`` and must return a scalar.
    The error for each entry is ``|analytic - numeric| / max(1, |numeric|)``.
    Both gradients are computed at ``dtype``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = [np.array(p, dtype=dtype) for p in params]

    def value(arrays) -> float:
        return float(fn(*[Tensor(a) for a in arrays]).data)

    first, second = value(base), value(base)
    if first != second and not (np.isnan(first) and np.isnan(second)):
        raise ValueError("grad_check: fn is not deterministic (two forward passes disagree)")

    leaves = [Tensor(a.copy(), requires_grad=True) for a in base]
    loss = fn(*leaves)
    if loss.size != 1:
        raise ShapeError(f"grad_check: fn must return a scalar, got shape {loss.shape}")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        analytic = [g.data for g in grad(loss, leaves)]

    worst = 0.0
    for k, arr in enumerate(base):
        flat = arr.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = float(flat[idx])
            up = value(base)
            flat[idx] = orig - eps
            lo = float(flat[idx])
            down = value(base)
            flat[idx] = orig
            # divide by the step actually taken after rounding to dtype
            numeric = (up - down) / (hi - lo)
            err = abs(analytic[k].reshape(-1)[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
