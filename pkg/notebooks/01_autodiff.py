"""Reverse-mode differentiation to any order.

Run with ``python3 notebooks/01_autodiff.py``.  Each ``# %%`` block is one
step of the walkthrough.
"""

# %% A scalar function and its first two derivatives
import numpy as np

from tsar.tensor import Tensor, Tape, conv2d, exact_conv, grad, grad_check, relu, sigmoid, softmax_xent

x = Tensor(np.array(2.0), requires_grad=True)
y = x * x * x
(dy,) = grad(y, [x], create_graph=True)  # keep the graph so dy can be differentiated again
(d2y,) = grad(dy, [x])
print(f"y = x^3 at 2: dy/dx = {float(dy.data)}, d2y/dx2 = {float(d2y.data)}")

# %% Layer primitives compose into a network loss
rng = np.random.default_rng(0)
images = Tensor(rng.normal(size=(2, 3, 8, 8)))
w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.2, requires_grad=True)
logits = relu(conv2d(images, w)).reshape(2, -1)[:, :5]
loss = softmax_xent(logits, [1, 3])
(gw,) = grad(loss, [w])
print("conv weight gradient shape:", gw.shape, "norm:", round(float(np.linalg.norm(gw.data)), 4))

# %% Finite-difference check: analytic vs central differences


def head(x, w):
    return softmax_xent(sigmoid(conv2d(x, w)).reshape(2, -1)[:, :4], [0, 2])


err = grad_check(head, [images.data, w.data])
print(f"max relative error vs central differences: {err:.2e}")

# %% Bit-exact convolution for reference comparisons
with exact_conv():
    slow = conv2d(images, w).data
fast = conv2d(images, w).data
print("GEMM vs naive loop, max abs difference:", float(np.abs(slow - fast).max()))

# %% A tape records the graph, replays it, and differentiates w.r.t. its roots
v = Tensor(rng.normal(size=5))
with Tape([v]) as tape:
    z = (sigmoid(v) * v).sum()
print("recorded nodes:", len(tape), "replay equal:", np.array_equal(tape.replay()[-1], z.data))
print("replayed at v = 0:", round(float(tape.replay({0: np.zeros(5)})[-1]), 6))
print("gradient w.r.t. root 0:", np.round(tape.gradient(z)[0].data, 4))
