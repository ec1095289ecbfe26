"""Layer primitives used by the classifier and regulator networks.

All convolutions are 'valid' (no padding) with stride 1.  Weights may carry a
leading per-sample axis, ``(N, O, C, kh, kw)``, so that each image in a batch
can be processed with its own gated kernel.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import (
    Function,
    Gather,
    LogSumExp,
    Relu,
    Scatter,
    ShapeError,
    Sigmoid,
    Tensor,
    is_grad_enabled,
    sum_to,
)

INSTANCE_NORM_EPS = 1e-5


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N,C,OH,OW,kh,kw
    oh, ow = win.shape[2], win.shape[3]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int) -> np.ndarray:
    n, c, h, w = shape
    oh, ow = h - kh + 1, w - kw + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + oh, j : j + ow] += cols[:, :, i, j]
    return out


class Im2col(Function):
    def forward(self, x):
        return _im2col(x, self.kh, self.kw)

    def backward(self, g, out):
        return (Col2im.apply(g, shape=self.inputs[0].shape, kh=self.kh, kw=self.kw),)


class Col2im(Function):
    def forward(self, cols):
        return _col2im(cols, self.shape, self.kh, self.kw)

    def backward(self, g, out):
        return (Im2col.apply(g, kh=self.kh, kw=self.kw),)


_exact = threading.local()


def exact_conv_enabled() -> bool:
    return getattr(_exact, "on", False)


@contextlib.contextmanager
def exact_conv(enabled: bool = True):
    """Use the ordered-accumulation convolution kernel while active.

    The default kernel is im2col + GEMM, whose BLAS summation order is not
    reproducible by a naive loop; the exact kernel is.
    """
    prev = exact_conv_enabled()
    _exact.on = enabled
    try:
        yield
    finally:
        _exact.on = prev


class Conv2d(Function):
    """Valid, stride-1 cross-correlation (im2col + GEMM, or exact loop)."""

    def forward(self, x, w):
        if exact_conv_enabled():
            return self._forward_exact(x, w)
        n = x.shape[0]
        kh, kw = w.shape[-2], w.shape[-1]
        oh, ow = x.shape[2] - kh + 1, x.shape[3] - kw + 1
        cols = _im2col(x, kh, kw)
        wf = w.reshape(w.shape[0], w.shape[1], -1) if w.ndim == 5 else w.reshape(w.shape[0], -1)
        return (wf @ cols).reshape(n, wf.shape[-2], oh, ow)

    @staticmethod
    def _forward_exact(x, w):
        # products accumulated one at a time in (channel, row, col) order
        n, c, h, wd = x.shape
        w5 = w if w.ndim == 5 else w[None]
        o, kh, kw = w5.shape[1], w5.shape[3], w5.shape[4]
        oh, ow = h - kh + 1, wd - kw + 1
        dtype = np.result_type(x.dtype, w.dtype)
        out = np.zeros((n, o, oh, ow), dtype=dtype)
        tmp = np.empty_like(out)
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    np.multiply(w5[:, :, ci, i, j, None, None], x[:, None, ci, i : i + oh, j : j + ow], out=tmp)
                    out += tmp
        return out

    def backward(self, g, out):
        x, w = self.inputs
        n = x.shape[0]
        kh, kw = w.shape[-2], w.shape[-1]
        k = x.shape[1] * kh * kw
        o = w.shape[-4]
        gf = g.reshape(n, o, g.shape[2] * g.shape[3])
        gx = gw = None
        if self.needs[1]:
            cols = Im2col.apply(x, kh=kh, kw=kw)
            wshape = (w.shape[0], o, k) if w.ndim == 5 else (o, k)
            gw = sum_to(gf @ cols.swapaxes(-1, -2), wshape).reshape(w.shape)
        if self.needs[0]:
            wf = w.reshape(w.shape[0], o, k) if w.ndim == 5 else w.reshape(o, k)
            gx = Col2im.apply(wf.swapaxes(-1, -2) @ gf, shape=x.shape, kh=kh, kw=kw)
        return gx, gw


class MaxPool2d(Function):
    """2x2/stride-2 pooling; ties go to the first element in row-major order."""

    def forward(self, x):
        n, c, h, w = x.shape
        ph, pw = h // 2, w // 2
        win = x[:, :, : 2 * ph, : 2 * pw].reshape(n, c, ph, 2, pw, 2).transpose(0, 1, 2, 4, 3, 5)
        arg = win.reshape(n, c, ph, pw, 4).argmax(axis=-1)
        di, dj = np.divmod(arg, 2)
        rows = 2 * np.arange(ph)[:, None] + di
        cols = 2 * np.arange(pw)[None, :] + dj
        base = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)
        self.flat_index = base[:, :, None, None] + rows * w + cols
        return x.reshape(-1)[self.flat_index]

    def backward(self, g, out):
        return (Scatter.apply(g, flat_index=self.flat_index, shape=self.inputs[0].shape),)

    def replay(self, x):
        return MaxPool2d().forward(x)


class InstanceNorm(Function):
    """Per-sample, per-channel normalisation over spatial dims, no affine."""

    def forward(self, x):
        mu = x.mean(axis=(2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(2, 3), keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + self.eps)
        return xc * self.inv_std

    def backward(self, g, out):
        if is_grad_enabled():
            x = self.inputs[0]
            xc = x - x.mean(axis=(2, 3), keepdims=True)
            inv = ((xc * xc).mean(axis=(2, 3), keepdims=True) + self.eps) ** -0.5
        else:
            inv = Tensor(self.inv_std)
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxh = (g * out).mean(axis=(2, 3), keepdims=True)
        return ((g - gm - out * gxh) * inv,)


# ---------------------------------------------------------------------------
# public functional surface
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Valid 3x3-style convolution of NCHW input with OIHW (or N-OIHW) kernel."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if w.ndim not in (4, 5):
        raise ShapeError(f"conv2d: kernel must be OIHW or N-OIHW, got shape {w.shape}")
    if w.shape[-3] != x.shape[1]:
        raise ShapeError(f"conv2d: kernel in-channels {w.shape[-3]} != input channels {x.shape[1]}")
    if w.ndim == 5 and w.shape[0] not in (1, x.shape[0]):
        raise ShapeError(f"conv2d: per-sample kernel batch {w.shape[0]} != input batch {x.shape[0]}")
    if x.shape[2] < w.shape[-2] or x.shape[3] < w.shape[-1]:
        raise ShapeError(f"conv2d: input spatial {x.shape[2:]} smaller than kernel {w.shape[-2:]}")
    return Conv2d.apply(x, w)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    return x + b.reshape(1, -1, 1, 1)


def maxpool2d(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be NCHW, got shape {x.shape}")
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2d: spatial dims {x.shape[2:]} collapse below 1")
    return MaxPool2d.apply(x)


def instance_norm(x: Tensor, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"instance_norm: input must be NCHW, got shape {x.shape}")
    if x.shape[2] * x.shape[3] < 2:
        # a single spatial element normalizes to exactly zero for every input
        raise ShapeError(f"instance_norm: needs at least 2 spatial elements, got {x.shape[2:]}")
    return InstanceNorm.apply(x, eps=eps)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"elementwise_mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    return a * b


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape (N, F).

    ``w`` is (K, F) or per-sample (N, K, F).
    """
    if x.ndim != 2:
        raise ShapeError(f"linear: input must be (N, F), got shape {x.shape}")
    if w.shape[-1] != x.shape[1]:
        raise ShapeError(f"linear: weight in-features {w.shape[-1]} != input features {x.shape[1]}")
    if w.ndim == 2:
        out = x @ w.swapaxes(0, 1)
    elif w.ndim == 3:
        if w.shape[0] not in (1, x.shape[0]):
            raise ShapeError(f"linear: per-sample weight batch {w.shape[0]} != input batch {x.shape[0]}")
        out = (w @ x.reshape(x.shape[0], x.shape[1], 1)).reshape(x.shape[0], w.shape[1])
    else:
        raise ShapeError(f"linear: weight must be 2-D or 3-D, got shape {w.shape}")
    if b is not None:
        out = out + b
    return out


def log_softmax(logits: Tensor) -> Tensor:
    return logits - LogSumExp.apply(logits)


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"softmax_xent: logits {logits.shape} do not match {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"softmax_xent: labels outside [0, {logits.shape[1]})")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(labels.size), labels] = 1.0
    nll = -(log_softmax(logits) * Tensor(onehot)).sum(axis=1)
    return nll.mean()


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def gather(x: Tensor, flat_index: np.ndarray) -> Tensor:
    return Gather.apply(x, flat_index=np.asarray(flat_index))


PRIMITIVES = {
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "instance_norm": instance_norm,
    "relu": relu,
    "linear": linear,
    "sigmoid": sigmoid,
    "elementwise_mul": mul,
    "softmax_xent": softmax_xent,
}


def primitive_forward(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch one named layer primitive."""
    try:
        op = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; expected one of {sorted(PRIMITIVES)}") from None
    return op(*inputs, **attrs)
