"""Gradient and meta-gradient self-checks.

Every layer primitive is compared against central finite differences on
randomized inputs; the unrolled meta-gradient is compared against the
closed form on a two-parameter quadratic and against finite differences on
a small TSAR model.

Tolerances per dtype.  Central differences with step ``h`` carry truncation
error O(h^2) and rounding error O(eps/h); the best step is h ~ eps^(1/3),
giving relative error ~ eps^(2/3).  At fp64 that is ~4e-11, far below the
1e-4 requirement.  At fp32 (eps = 1.19e-7) it is ~2.4e-5, and the checked
primitives chain a few dozen roundings (instance norm also divides by a
small standard deviation), so the fp32 tolerance is 500 * eps^(2/3) ~ 1.2e-2.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data.datasets import synthetic_glyphs
from .meta import inner_loop, meta_gradient, unroll
from .model import ClassifierConfig, RegulatorConfig, build, forward, init_regulation_bias, set_phase
from .tensor import Tensor, core, grad, nn, softmax_xent
from .tensor.tape import grad_check


def _tolerance(dtype) -> dict:
    eps = float(np.finfo(dtype).eps)
    if np.dtype(dtype) == np.float64:
        return {"step": 1e-6, "tol": 1e-4}
    return {"step": eps ** (1 / 3), "tol": 500 * eps ** (2 / 3)}


THRESHOLDS = {name: _tolerance(name) for name in ("float64", "float32")}


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.threshold)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28} err={self.error:.3e}  tol={self.threshold:.1e}"


# ---------------------------------------------------------------------------
# primitive cases
# ---------------------------------------------------------------------------


def _spread(rng, shape, gap=0.05):
    """Distinct values ``gap`` apart and at least ``gap / 4`` from zero.

    Keeps max-pool argmax and relu signs stable under finite-difference steps.
    """
    n = int(np.prod(shape))
    grid = rng.permutation(n) - n // 2
    return ((grid + rng.uniform(0.25, 0.75)) * gap).reshape(shape)


def primitive_case(kind: str, rng: np.random.Generator) -> tuple[Callable[..., Tensor], list[np.ndarray]]:
    """A scalar function of one primitive plus random inputs for it.

    Outputs are contracted with a fixed random tensor so that every output
    element contributes to the gradient.
    """
    n = int(rng.integers(1, 3))

    def project(shape):
        r = rng.normal(size=shape)
        return lambda out: (out * Tensor(r.astype(out.dtype))).sum()

    if kind == "conv2d":
        c, o, h = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(4, 6))
        x, w = rng.normal(size=(n, c, h, h)), rng.normal(size=(o, c, 3, 3))
        proj = project((n, o, h - 2, h - 2))
        return (lambda x, w: proj(nn.conv2d(x, w))), [x, w]
    if kind == "maxpool2d":
        h = int(rng.integers(2, 6))
        proj = project((n, 2, h // 2, h // 2))
        return (lambda x: proj(nn.maxpool2d(x))), [_spread(rng, (n, 2, h, h))]
    if kind == "instance_norm":
        h = int(rng.integers(2, 5))
        proj = project((n, 2, h, h))
        return (lambda x: proj(nn.instance_norm(x))), [rng.normal(size=(n, 2, h, h))]
    if kind == "relu":
        proj = project((n, 7))
        return (lambda x: proj(nn.relu(x))), [_spread(rng, (n, 7), 0.1)]
    if kind == "linear":
        k, f = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        proj = project((n, k))
        return (lambda x, w, b: proj(nn.linear(x, w, b))), [rng.normal(size=(n, f)), rng.normal(size=(k, f)), rng.normal(size=k)]
    if kind == "sigmoid":
        proj = project((n, 5))
        return (lambda x: proj(nn.sigmoid(x))), [rng.normal(scale=3.0, size=(n, 5))]
    if kind == "elementwise_mul":
        proj = project((n, 4))
        return (lambda a, b: proj(nn.mul(a, b))), [rng.normal(size=(n, 4)), rng.normal(size=(n, 4))]
    if kind == "softmax_xent":
        k = int(rng.integers(2, 6))
        labels = rng.integers(0, k, size=n)
        return (lambda z: nn.softmax_xent(z, labels)), [rng.normal(scale=2.0, size=(n, k))]
    raise ValueError(f"unknown primitive {kind!r}")


def check_primitives(instances: int = 50, dtype="float64", seed: int = 0, kinds=None) -> list[CheckResult]:
    """Worst relative error per primitive over ``instances`` random cases."""
    th = THRESHOLDS[np.dtype(dtype).name]
    rng = np.random.default_rng(seed)
    out = []
    for kind in kinds or sorted(nn.PRIMITIVES):
        worst = 0.0
        for _ in range(instances):
            fn, params = primitive_case(kind, rng)
            worst = max(worst, grad_check(fn, params, eps=th["step"], dtype=dtype))
        out.append(CheckResult(kind, worst, th["tol"]))
    return out


# ---------------------------------------------------------------------------
# meta-gradients on a quadratic
# ---------------------------------------------------------------------------


@dataclass
class Quadratic:
    """Inner loss 0.5 x'Ax - b'x, outer loss 0.5 |x - c|^2, for x in R^2."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray

    @classmethod
    def random(cls, seed: int = 0) -> "Quadratic":
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(2, 2))
        return cls(m @ m.T + np.eye(2), rng.normal(size=(2, 1)), rng.normal(size=(2, 1)))

    def inner(self, params) -> Tensor:
        x = params["x"]
        return (x.T @ (Tensor(self.A) @ x)).sum() * 0.5 - (Tensor(self.b) * x).sum()

    def outer(self, params) -> Tensor:
        d = params["x"] - Tensor(self.c)
        return (d * d).sum() * 0.5

    def rollout(self, x0: np.ndarray, lr: float, steps: int) -> np.ndarray:
        x = x0.copy()
        for _ in range(steps):
            x = x - lr * (self.A @ x - self.b)
        return x

    def objective(self, x0, lr, steps) -> float:
        d = self.rollout(x0, lr, steps) - self.c
        return float(0.5 * (d * d).sum())

    def exact_meta_gradient(self, x0, lr, steps) -> np.ndarray:
        jac = np.linalg.matrix_power(np.eye(2) - lr * self.A, steps)
        return jac.T @ (self.rollout(x0, lr, steps) - self.c)

    def first_order_gradient(self, x0, lr, steps) -> np.ndarray:
        return self.rollout(x0, lr, steps) - self.c


def quadratic_meta_gradient(q: Quadratic, x0: np.ndarray, lr: float, steps: int, order: str = "second") -> np.ndarray:
    params = {"x": Tensor(x0.copy(), requires_grad=True)}
    inner = unroll(params, [q.inner] * steps, lr, ["x"], create_graph=order == "second")
    return meta_gradient(params, inner, q.outer(inner.params), order)["x"]


def check_quadratic(steps=(1, 2, 3), lr: float = 0.1, seed: int = 0, h: float = 1e-6) -> list[CheckResult]:
    """Second-order meta-gradient vs finite differences, and the first-order gap.

    The first-order gradient omits the (I - lr*A)^K Jacobian, so its gap to
    the exact gradient must equal ((I - lr*A)^K - I) applied to the outer
    gradient at the adapted point.
    """
    q = Quadratic.random(seed)
    x0 = np.random.default_rng(seed + 1).normal(size=(2, 1))
    out = []
    for k in steps:
        g2 = quadratic_meta_gradient(q, x0, lr, k, "second")
        fd = np.zeros_like(x0)
        for i in range(2):
            e = np.zeros_like(x0)
            e[i] = h
            fd[i] = (q.objective(x0 + e, lr, k) - q.objective(x0 - e, lr, k)) / (2 * h)
        out.append(CheckResult(f"meta second-order K={k}", float(np.abs(g2 - fd).max()), 1e-5))
        g1 = quadratic_meta_gradient(q, x0, lr, k, "first")
        jac = np.linalg.matrix_power(np.eye(2) - lr * q.A, k)
        expected_gap = (jac.T - np.eye(2)) @ q.first_order_gradient(x0, lr, k)
        out.append(CheckResult(f"meta first-order gap K={k}", float(np.abs((g2 - g1) - expected_gap).max()), 1e-10))
    return out


def check_tsar_meta(seed: int = 0, entries: int = 6, h: float = 1e-6) -> list[CheckResult]:
    """Unrolled meta-gradient of a tiny gated model vs finite differences."""
    ds = synthetic_glyphs(3, 2, in_shape=(3, 22, 22), seed=seed)
    clf = ClassifierConfig(in_shape=(3, 22, 22), conv_channels=3, num_classes=3, pool_last=False)
    model = init_regulation_bias(build(clf, RegulatorConfig(conv_channels=3), seed=seed), -1.0)
    set_phase(model, "meta_outer")
    x_in, y_in = ds.images[:3], ds.labels[:3]
    x_out, y_out = ds.images[3:], ds.labels[3:]

    def objective(arrays):
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        inner = inner_loop(model, params, x_in, y_in, 0.3, create_graph=True)
        return params, inner, softmax_xent(forward(model, x_out, inner.params), y_out)

    params, inner, loss = objective(model.params)
    g = meta_gradient(params, inner, loss, "second")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in ("clf.c1.w", "clf.cp.w", "reg.out.c2.b", "reg.c1.w", "reg.out.cp.w", "clf.c3.b"):
        arr = model.params[name]
        for _ in range(max(1, entries // 6)):
            idx = tuple(int(rng.integers(s)) for s in arr.shape)
            up, down = dict(model.params), dict(model.params)
            up[name] = arr.copy()
            down[name] = arr.copy()
            up[name][idx] += h
            down[name][idx] -= h
            fd = (float(objective(up)[2].data) - float(objective(down)[2].data)) / (2 * h)
            worst = max(worst, abs(g[name][idx] - fd) / max(1.0, abs(fd)))
    return [CheckResult("meta tsar unrolled", worst, 1e-5)]


# ---------------------------------------------------------------------------
# fault injection
# ---------------------------------------------------------------------------

FAULT_TARGETS = {
    "conv2d": nn.Conv2d,
    "maxpool2d": nn.MaxPool2d,
    "instance_norm": nn.InstanceNorm,
    "relu": core.Relu,
    "sigmoid": core.Sigmoid,
    "linear": core.MatMul,
    "elementwise_mul": core.Mul,
    "softmax_xent": core.LogSumExp,
}


@contextlib.contextmanager
def inject_fault(kind: str, scale: float = 1.01):
    """Temporarily scale every input gradient of one primitive's backward."""
    cls = FAULT_TARGETS[kind]
    original = cls.backward

    def corrupted(self, g, out):
        return tuple(None if gi is None else gi * scale for gi in original(self, g, out))

    cls.backward = corrupted
    try:
        yield
    finally:
        cls.backward = original


def run_all(dtype="float64", instances: int = 50, fault: str | None = None, seed: int = 0) -> list[CheckResult]:
    ctx = inject_fault(fault) if fault else contextlib.nullcontext()
    with ctx:
        results = check_primitives(instances, dtype, seed)
        if np.dtype(dtype) == np.float64:
            results += check_quadratic()
            results += check_tsar_meta(seed)
    return results
