"""Time-ordered regulation records and their JSON-lines persistence.

Detail levels:

* ``summary`` - per step, per layer: mean gate and fixed percentiles
* ``tracked`` - summary plus full gate values for a chosen set of synapses
* ``full``    - summary plus every gate value (desk scale only)

The first line of a trace file is a header; each later line is one step.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VERSION = 1
DETAILS = ("summary", "tracked", "full")
PERCENTILES = (1, 25, 50, 75, 99)


class TraceError(ValueError):
    pass


def summarize(gates: np.ndarray) -> dict:
    g = np.asarray(gates, dtype=np.float64).reshape(-1)
    return {"mean": float(g.mean()), "p": [float(v) for v in np.percentile(g, PERCENTILES)]}


@dataclass
class RegulationTrace:
    detail: str
    layer_shapes: dict[str, tuple[int, ...]]
    tracked: dict[str, np.ndarray | None] = field(default_factory=dict)
    weight_layers: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)
    steps: list[int] = field(default_factory=list)
    tasks: list[int] = field(default_factory=list)
    classes: list[int] = field(default_factory=list)
    images: list[int] = field(default_factory=list)
    summaries: dict[str, list[dict]] = field(default_factory=dict)
    gates: dict[str, list[np.ndarray]] = field(default_factory=dict)
    weights: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.detail not in DETAILS:
            raise TraceError(f"unknown detail level {self.detail!r}")
        self.layer_shapes = {k: tuple(v) for k, v in self.layer_shapes.items()}
        for layer in self.layer_shapes:
            self.summaries.setdefault(layer, [])
            if self.detail != "summary":
                self.gates.setdefault(layer, [])
                self.tracked.setdefault(layer, None)
        for layer in self.weight_layers:
            self.weights.setdefault(layer, [])

    def __len__(self) -> int:
        return len(self.steps)

    def num_synapses(self, layer: str) -> int:
        return int(np.prod(self.layer_shapes[layer]))

    def synapse_ids(self, layer: str) -> np.ndarray:
        """Flat indices (into the layer's weight array) of recorded synapses."""
        if self.detail == "summary":
            raise TraceError("summary traces record no per-synapse gates")
        ids = self.tracked.get(layer)
        return np.arange(self.num_synapses(layer)) if ids is None else np.asarray(ids)

    def append(self, step: int, task: int, cls: int, image: int, gates: dict[str, np.ndarray], weights=None) -> None:
        if self.steps and step <= self.steps[-1]:
            raise TraceError(f"steps must increase: {step} after {self.steps[-1]}")
        self.steps.append(int(step))
        self.tasks.append(int(task))
        self.classes.append(int(cls))
        self.images.append(int(image))
        for layer in self.layer_shapes:
            g = np.asarray(gates[layer], dtype=np.float64).reshape(-1)
            self.summaries[layer].append(summarize(g))
            if self.detail != "summary":
                ids = self.tracked.get(layer)
                self.gates[layer].append(g.copy() if ids is None else g[ids])
        for layer in self.weight_layers:
            self.weights[layer].append(np.asarray(weights[layer], dtype=np.float64).reshape(-1).copy())

    # -- accessors -----------------------------------------------------------
    def gate_matrix(self, layer: str) -> np.ndarray:
        """Recorded gates as ``(steps, synapses)``."""
        if self.detail == "summary":
            raise TraceError(f"layer {layer!r}: trace detail 'summary' holds no per-synapse gates")
        if layer not in self.gates:
            raise TraceError(f"layer {layer!r} not in trace")
        rows = self.gates[layer]
        return np.vstack(rows) if rows else np.zeros((0, len(self.synapse_ids(layer))))

    def weight_matrix(self, layer: str) -> np.ndarray:
        if layer not in self.weights:
            raise TraceError(f"no weight snapshots for layer {layer!r}")
        return np.vstack(self.weights[layer])

    def mean_series(self, layer: str) -> np.ndarray:
        return np.array([s["mean"] for s in self.summaries[layer]])

    def task_array(self) -> np.ndarray:
        return np.asarray(self.tasks)

    def validate(self) -> None:
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise TraceError("steps are not strictly increasing")
        pairs = list(zip(self.tasks, self.images))
        if len(set(pairs)) != len(pairs):
            raise TraceError("a (task, image) pair appears more than once")

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegulationTrace):
            return NotImplemented
        if (self.detail, self.layer_shapes, self.weight_layers) != (other.detail, other.layer_shapes, other.weight_layers):
            return False
        if (self.steps, self.tasks, self.classes, self.images) != (other.steps, other.tasks, other.classes, other.images):
            return False
        if self.summaries != other.summaries:
            return False
        for layer in self.tracked:
            a, b = self.tracked[layer], other.tracked.get(layer)
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        for store, ostore in ((self.gates, other.gates), (self.weights, other.weights)):
            for layer, rows in store.items():
                orows = ostore.get(layer, [])
                if len(rows) != len(orows) or not all(np.array_equal(x, y) for x, y in zip(rows, orows)):
                    return False
        return True


# ---------------------------------------------------------------------------
# JSON lines
# ---------------------------------------------------------------------------


def _header(trace: RegulationTrace) -> dict:
    return {
        "version": VERSION,
        "detail": trace.detail,
        "layers": {k: list(v) for k, v in trace.layer_shapes.items()},
        "tracked": {k: (None if v is None else [int(i) for i in v]) for k, v in trace.tracked.items()},
        "weights": list(trace.weight_layers),
        "percentiles": list(PERCENTILES),
        "meta": trace.meta,
    }


def write_trace(trace: RegulationTrace, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(json.dumps(_header(trace)) + "\n")
        for i in range(len(trace)):
            rec = {
                "step": trace.steps[i],
                "task": trace.tasks[i],
                "class": trace.classes[i],
                "image": trace.images[i],
                "summary": {layer: trace.summaries[layer][i] for layer in trace.layer_shapes},
            }
            if trace.detail != "summary":
                rec["gates"] = {layer: trace.gates[layer][i].tolist() for layer in trace.layer_shapes}
            if trace.weight_layers:
                rec["weights"] = {layer: trace.weights[layer][i].tolist() for layer in trace.weight_layers}
            fh.write(json.dumps(rec) + "\n")
    os.replace(tmp, path)
    return path


def read_trace(path) -> RegulationTrace:
    with open(path) as fh:
        first = fh.readline()
        if not first:
            raise TraceError(f"{path}: empty trace file")
        try:
            head = json.loads(first)
        except json.JSONDecodeError as e:
            raise TraceError(f"line 1: header is not valid JSON ({e.msg})") from None
        if head.get("version") != VERSION:
            raise TraceError(f"line 1: unsupported trace version {head.get('version')}")
        tracked = {k: (None if v is None else np.asarray(v, dtype=np.int64)) for k, v in head.get("tracked", {}).items()}
        trace = RegulationTrace(
            detail=head["detail"],
            layer_shapes={k: tuple(v) for k, v in head["layers"].items()},
            tracked=tracked,
            weight_layers=tuple(head.get("weights", [])),
            meta=head.get("meta", {}),
        )
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceError(f"line {lineno}: not valid JSON ({e.msg})") from None
            has_gates = "gates" in rec
            if has_gates != (trace.detail != "summary"):
                raise TraceError(f"line {lineno}: record does not match header detail {trace.detail!r}")
            trace.steps.append(rec["step"])
            trace.tasks.append(rec["task"])
            trace.classes.append(rec["class"])
            trace.images.append(rec["image"])
            for layer in trace.layer_shapes:
                trace.summaries[layer].append(rec["summary"][layer])
                if has_gates:
                    g = np.asarray(rec["gates"][layer], dtype=np.float64)
                    if len(g) != len(trace.synapse_ids(layer)):
                        raise TraceError(
                            f"line {lineno}: layer {layer!r} has {len(g)} gates, header declares "
                            f"{len(trace.synapse_ids(layer))}"
                        )
                    trace.gates[layer].append(g)
            for layer in trace.weight_layers:
                trace.weights[layer].append(np.asarray(rec["weights"][layer], dtype=np.float64))
    return trace
