"""Sequential training on unseen classes and how much is retained.

Run with ``python3 notebooks/04_domain_transfer.py``.  Uses a freshly built
model; point ``load_checkpoint`` at a meta-trained one for real numbers.
"""

# %% An unseen domain: glyphs with per-image ink and background colours
import numpy as np

from tsar.data import synthetic_glyphs
from tsar.model import build, init_regulation_bias, preset, variant_build
from tsar.transfer import TransferConfig, lr_grid_search, run_transfer, treatment_dataset

pool = synthetic_glyphs(40, 30, seed=5, domain=1)
clf, reg = preset("tiny", 20)
grow = init_regulation_bias(build(clf, reg, seed=0), "grow")
scratch = variant_build("scratch", clf, seed=0)

# %% Twenty tasks of ten images, one SGD step per image
# An untrained grow model keeps almost every gate shut, so it barely learns:
# expect chance-level retention until it has been meta-trained.
cfg = TransferConfig(num_tasks=20, images_per_task=10, lr=0.03, seed=0)
for name, m in (("grow", grow), ("scratch", scratch)):
    res = run_transfer(m, pool, cfg)
    print(f"{name:>7}: final retention {res.final_retention:.3f}  past tasks {res.past_task_retention:.3f}  "
          f"({len(res.retention_curve)} curve points)")

# %% Picking a learning rate: short runs per rate, divergent rates are skipped
grid = lr_grid_search(scratch, pool, [0.01, 0.03, 100.0], TransferConfig(num_tasks=5, images_per_task=5))
for row in grid.table:
    print(row)
print("selected:", grid.best_lr)

# %% Images ranked by the regulation they elicit
for kind in ("enhancing", "diminishing", "mixed"):
    cur = treatment_dataset(grow, pool, kind, count=10, seed=0)
    print(f"{kind:>11}: {len(cur.dataset)} images, from top pool {int((cur.source > 0).sum())}, ties {cur.ties}")
