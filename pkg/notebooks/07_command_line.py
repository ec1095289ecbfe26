"""The ``tsar`` command line, driven from Python.

Run with ``python3 notebooks/07_command_line.py``.  The same commands work
in a shell, e.g. ``tsar meta-train --mode grow --iters 1000 --out runs/grow``.
"""

# %% Gradient self-checks (exit code 0 when everything passes)
import json
import tempfile
from pathlib import Path

from tsar.cli import main

work = Path(tempfile.mkdtemp(prefix="tsar-cli-"))
print("gradcheck exit code:", main(["gradcheck", "--instances", "5"]))

# %% A very short meta-training run for two seeds
main(["meta-train", "--mode", "grow", "--iters", "3", "--seeds", "0,1", "--out", str(work / "meta")])

# %% Transfer from the meta-trained models, with a tracked trace and weight snapshots
main([
    "transfer", "--checkpoint", str(work / "meta"), "--seeds", "0,1", "--tasks", "5", "--images-per-task", "5",
    "--trace-detail", "full", "--record-weights", "--out", str(work / "transfer"),
])
doc = json.loads((work / "transfer" / "seed_0" / "result.json").read_text())
print("per-task retention:", [round(v, 2) for v in doc["per_task_retention"]])

# %% Analyses write CSV files plus a JSON manifest each
traces = [str(work / "transfer" / f"seed_{s}" / "trace.jsonl") for s in (0, 1)]
main(["analyze", *traces, "--modularity", "--spikes", "--cp-sign", "--class-nodes", "--out", str(work / "analysis")])
print(sorted(p.name for p in (work / "analysis").iterdir())[:8], "...")

# %% Bad settings exit with code 2 and name the offending field
print("exit code:", main(["transfer", "--mode", "grow", "--tasks", "0"]))
