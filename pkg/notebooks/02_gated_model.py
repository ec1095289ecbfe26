"""A classifier whose every weight is gated by a learned regulator.

Run with ``python3 notebooks/02_gated_model.py``.
"""

# %% Build the desk-scale model and look at its parameter groups
import numpy as np

from tsar.data import synthetic_glyphs
from tsar.model import build, forward, init_regulation_bias, param_shapes, preset, regulate, reset_for_transfer

clf, reg = preset("tiny", num_classes=10)
model = build(clf, reg, seed=0)
report = model.parameter_report()
print("parameters per group:", {k: v for k, v in report.items()})
print("encoding size:", model.encoding_dim)

# %% The full-size architecture is shape-checked without allocating it
big = param_shapes(*preset("paper", 963))
print("regulatory output rows for the class layer:", big["reg.out.cp.w"])

# %% Two initial regimes: almost everything suppressed, or half open
images = synthetic_glyphs(10, 7, seed=0).images[:64]
for mode in ("grow", "sculpt"):
    init_regulation_bias(model, mode)
    _, gates = regulate(model, images)
    g = np.concatenate([v.data.reshape(len(images), -1) for v in gates.values()], axis=1)
    print(f"{mode:>6}: mean gate {g.mean():.4f}  p99 {np.percentile(g, 99):.4f}  range ({g.min():.2e}, {g.max():.4f})")

# %% The forward pass uses gate * weight for every layer
logits = forward(model, images[:4])
print("logits:", logits.shape, "predictions:", logits.data.argmax(axis=1))

# %% Before sequential training the class layer is rebuilt for the new classes
reset_for_transfer(model, 20, seed=1)
print("new class layer:", model.params["clf.cp.w"].shape, "frozen:", sorted(model.frozen))
