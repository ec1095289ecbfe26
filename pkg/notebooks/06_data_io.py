"""Datasets, checkpoints and traces on disk.

Run with ``python3 notebooks/06_data_io.py``.
"""

# %% Synthetic glyphs stand in for hand-written characters
import tempfile
from pathlib import Path

import numpy as np

from tsar.data import (
    RegulationTrace,
    load_checkpoint,
    load_image_folder,
    read_trace,
    save_checkpoint,
    save_image_folder,
    synthetic_glyphs,
    write_trace,
)
from tsar.model import build, init_regulation_bias, preset

work = Path(tempfile.mkdtemp(prefix="tsar-io-"))
meta = synthetic_glyphs(5, 20, seed=0, split=(15, 5))
print("meta set:", meta.num_classes, "classes,", meta.counts("train")[0], "train /", meta.counts("test")[0], "test each")

# %% A folder of PNGs (one subfolder per class) loads back in lexicographic order
save_image_folder(meta, work / "glyphs")
loaded = load_image_folder(work / "glyphs", split_spec=(15, 5))
print("reloaded:", loaded.class_names, "max pixel error", float(np.abs(loaded.images - meta.images).max()))

# %% Checkpoints round-trip bit for bit and reject corruption
model = init_regulation_bias(build(*preset("tiny", 5), seed=0), "grow")
path = save_checkpoint(model, {"note": "demo"}, work / "model.tsar")
back, cfg = load_checkpoint(path)
print("bit-exact:", all(back.params[k].tobytes() == v.tobytes() for k, v in model.params.items()), cfg)
path.write_bytes(path.read_bytes()[:-3])
try:
    load_checkpoint(path)
except ValueError as exc:
    print("truncated file rejected:", exc)

# %% Traces are JSON lines: a header, then one record per step
trace = RegulationTrace("full", {"c3": (4, 2)})
for k in range(3):
    trace.append(k, task=0, cls=0, image=k, gates={"c3": np.full(8, 0.1 * k)})
p = write_trace(trace, work / "trace.jsonl")
print(len(p.read_text().splitlines()), "lines; round trip equal:", read_trace(p) == trace)
