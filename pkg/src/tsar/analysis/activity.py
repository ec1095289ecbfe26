"""Task-specific vs task-agnostic activity, modularity and time-lag histograms.

Activity of synapse ``i`` on task ``C`` is its mean gate over the task's
instances; its task-agnostic activity for ``C`` is the mean of its
task-specific activity over every other task.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ..data.trace import RegulationTrace

log = logging.getLogger(__name__)

MAX_LOG_RANK = 5.0


@dataclass
class ActivityTable:
    """Activities for every (task, synapse) pair of one layer.

    ``specific[t, s]`` and ``agnostic[t, s]`` are indexed by position in
    ``tasks`` and ``synapses``.
    """

    layer: str
    tasks: np.ndarray
    synapses: np.ndarray
    specific: np.ndarray
    agnostic: np.ndarray
    instances: np.ndarray

    def column(self, synapse: int) -> int:
        hit = np.flatnonzero(self.synapses == synapse)
        if not len(hit):
            raise KeyError(f"synapse {synapse} not recorded for layer {self.layer!r}")
        return int(hit[0])

    def row(self, task: int) -> int:
        hit = np.flatnonzero(self.tasks == task)
        if not len(hit):
            raise KeyError(f"task {task} not in trace")
        return int(hit[0])

    def log_ranks(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-task log ranks of both activities (0 = most active, 5 = least)."""
        return log_rank(self.specific), log_rank(self.agnostic)


def _task_means(gates: np.ndarray, tasks: np.ndarray):
    labels, inverse, counts = np.unique(tasks, return_inverse=True, return_counts=True)
    sums = np.zeros((len(labels), gates.shape[1]))
    np.add.at(sums, inverse, gates)
    return labels, sums / counts[:, None], counts


def activity_table(trace: RegulationTrace, layer: str) -> ActivityTable:
    gates = trace.gate_matrix(layer)
    tasks = trace.task_array()
    if len(tasks) == 0:
        raise ValueError("trace is empty")
    labels, specific, counts = _task_means(gates, tasks)
    T = len(labels)
    if T >= 2:
        # explicit sum over the other tasks (not total minus own) keeps T=2 exact
        others = 1.0 - np.eye(T)
        agnostic = others @ specific / (T - 1)
    else:
        agnostic = np.full_like(specific, np.nan)
    return ActivityTable(layer, labels, trace.synapse_ids(layer), specific, agnostic, counts)


def task_specific_activity(trace: RegulationTrace, synapse: int, layer: str, task: int) -> float:
    """Mean gate of ``synapse`` over the instances of ``task``."""
    table = activity_table(trace, layer)
    return float(table.specific[table.row(task), table.column(synapse)])


def task_agnostic_activity(trace: RegulationTrace, synapse: int, layer: str, task: int) -> float:
    """Mean task-specific activity of ``synapse`` over all tasks except ``task``."""
    table = activity_table(trace, layer)
    if len(table.tasks) < 2:
        raise ValueError("task-agnostic activity needs at least 2 tasks")
    return float(table.agnostic[table.row(task), table.column(synapse)])


def log_rank(activity: np.ndarray) -> np.ndarray:
    """Rank along the last axis (1 = most active), mapped to 5*log(r)/log(N).

    Tied activities share their average rank.
    """
    a = np.asarray(activity, dtype=np.float64)
    n = a.shape[-1]
    if n < 2:
        return np.zeros_like(a)
    r = rankdata(-a, method="average", axis=-1)
    # log(n)/log(n) can round just past 1; keep the last rank inside the top bin
    return np.minimum(MAX_LOG_RANK * np.log(r) / np.log(n), MAX_LOG_RANK)


# ---------------------------------------------------------------------------
# histograms
# ---------------------------------------------------------------------------


@dataclass
class Histogram2D:
    counts: np.ndarray
    x_edges: np.ndarray
    y_edges: np.ndarray

    @property
    def mass(self) -> float:
        return float(self.counts.sum())


def modularity_histogram(trace_or_table, layer: str | None = None, bins: int = 100) -> Histogram2D:
    """2-D histogram of (task-specific, task-agnostic) log rank over all pairs.

    Rows index the task-specific rank, columns the task-agnostic rank.
    """
    table = trace_or_table if isinstance(trace_or_table, ActivityTable) else activity_table(trace_or_table, layer)
    if len(table.tasks) < 2:
        raise ValueError("modularity needs at least 2 tasks")
    n_syn = len(table.synapses)
    if n_syn < bins:
        warnings.warn(f"{n_syn} synapses < {bins} bins; using {max(n_syn, 1)} bins", stacklevel=2)
        bins = max(n_syn, 1)
    spec, agn = table.log_ranks()
    edges = np.linspace(0.0, MAX_LOG_RANK, bins + 1)
    counts, xe, ye = np.histogram2d(spec.ravel(), agn.ravel(), bins=[edges, edges])
    return Histogram2D(counts, xe, ye)


def synapse_band(mean: np.ndarray, band: tuple[float, float]) -> np.ndarray:
    """Indices whose value lies between the band's lower and upper percentiles."""
    lo, hi = np.percentile(mean, band)
    return np.flatnonzero((mean >= lo) & (mean <= hi))


def timelag_histogram(
    trace: RegulationTrace,
    layer: str,
    band: tuple[float, float] = (75.0, 99.0),
    bins: int = 250,
    synapses: np.ndarray | None = None,
) -> Histogram2D:
    """Histogram of consecutive-step gate pairs (g_t, g_t+1) on [0, 1]^2.

    Synapses are chosen by the percentile ``band`` of their task-agnostic
    mean (overall mean for single-task traces) unless ``synapses`` gives
    column indices directly.
    """
    gates = trace.gate_matrix(layer)
    if gates.shape[0] < 2:
        raise ValueError("time-lag histogram needs at least 2 steps")
    if synapses is None:
        tasks = trace.task_array()
        if len(np.unique(tasks)) >= 2:
            ranking = activity_table(trace, layer).agnostic.mean(axis=0)
        else:
            ranking = gates.mean(axis=0)
        synapses = synapse_band(ranking, band)
    g = gates[:, synapses]
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, xe, ye = np.histogram2d(g[:-1].ravel(), g[1:].ravel(), bins=[edges, edges])
    return Histogram2D(counts, xe, ye)


# ---------------------------------------------------------------------------
# synthetic reference traces
# ---------------------------------------------------------------------------

RANDOM_MEAN = 0.5
RANDOM_SD = 0.2


def synthetic_trace(
    kind: str,
    num_synapses: int,
    num_tasks: int,
    rng: np.random.Generator | int | None = None,
    instances: int = 10,
    layer: str = "syn",
) -> RegulationTrace:
    """Reference traces for the modularity histogram.

    ``modular``: synapses split at random into ``num_tasks`` disjoint
    subsets; each synapse carries a constant random gate on its own task and
    0 on every other.  ``random``: independent Gaussian gates (mean 0.5,
    sd 0.2) clipped to [0, 1].  The module of every synapse is stored in
    ``trace.meta["module"]``.
    """
    rng = np.random.default_rng(rng)
    kind = kind.lower()
    steps = num_tasks * instances
    tasks = np.repeat(np.arange(num_tasks), instances)
    meta: dict = {"kind": kind}
    if kind == "modular":
        if num_synapses < num_tasks:
            raise ValueError("modular trace needs at least one synapse per task")
        module = np.empty(num_synapses, dtype=np.int64)
        for t, part in enumerate(np.array_split(rng.permutation(num_synapses), num_tasks)):
            module[part] = t
        level = rng.uniform(0.05, 1.0, size=num_synapses)
        gates = np.where(module[None, :] == tasks[:, None], level[None, :], 0.0)
        meta["module"] = module.tolist()
    elif kind == "random":
        gates = np.clip(rng.normal(RANDOM_MEAN, RANDOM_SD, size=(steps, num_synapses)), 0.0, 1.0)
        meta.update(mean=RANDOM_MEAN, sd=RANDOM_SD, clip=[0.0, 1.0])
    else:
        raise ValueError(f"unknown synthetic trace kind {kind!r}")
    trace = RegulationTrace("full", {layer: (num_synapses,)}, meta=meta)
    for k in range(steps):
        trace.append(k, int(tasks[k]), int(tasks[k]), k, {layer: gates[k]})
    return trace


def brute_force_activity(trace: RegulationTrace, layer: str) -> tuple[np.ndarray, np.ndarray]:
    """Loop-by-loop recount of both activities, for checking :func:`activity_table`."""
    gates = trace.gate_matrix(layer)
    tasks = list(trace.tasks)
    labels = sorted(set(tasks))
    n_syn = gates.shape[1]
    specific = np.zeros((len(labels), n_syn))
    for a, t in enumerate(labels):
        rows = [k for k, tk in enumerate(tasks) if tk == t]
        for s in range(n_syn):
            total = 0.0
            for k in rows:
                total += gates[k, s]
            specific[a, s] = total / len(rows)
    agnostic = np.full_like(specific, np.nan)
    if len(labels) >= 2:
        for a in range(len(labels)):
            for s in range(n_syn):
                others = [specific[b, s] for b in range(len(labels)) if b != a]
                agnostic[a, s] = sum(others) / len(others)
    return specific, agnostic
