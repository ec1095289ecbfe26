"""Regulation of the class-prediction layer by weight sign.

CP gates are recorded as a flat ``(num_classes * cp_in)`` vector per step,
row-major over the CP weight matrix, with concurrent weight snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data.trace import RegulationTrace, TraceError

UPSTREAM = ("c1", "c2", "c3")


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length series of at least 2 values")
    dx, dy = x - x.mean(), y - y.mean()
    denom = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    return float((dx * dy).sum() / denom) if denom > 0 else float("nan")


def _cp_arrays(trace: RegulationTrace, layer: str = "cp"):
    if trace.detail == "summary" or layer not in trace.gates:
        raise TraceError(f"trace holds no per-synapse gates for {layer!r}")
    if layer not in trace.weights:
        raise TraceError(f"trace holds no weight snapshots for {layer!r}")
    ids = trace.synapse_ids(layer)
    return trace.gate_matrix(layer), trace.weight_matrix(layer)[:, ids], ids


def _group_mean(gates: np.ndarray, mask: np.ndarray) -> np.ndarray:
    n = mask.sum(axis=1)
    total = np.where(mask, gates, 0.0).sum(axis=1)
    return np.divide(total, n, out=np.full(len(n), np.nan), where=n > 0)


def upstream_spikes(trace: RegulationTrace, layers=UPSTREAM, top_fraction: float = 0.1) -> np.ndarray:
    """Per step, the mean gate of the top ``top_fraction`` of upstream synapses.

    Synapses from all ``layers`` are pooled and ranked by their mean gate
    over the whole trace.
    """
    mats = [trace.gate_matrix(layer) for layer in layers]
    g = np.hstack(mats)
    k = max(1, int(round(top_fraction * g.shape[1])))
    top = np.argsort(-g.mean(axis=0), kind="stable")[:k]
    return g[:, top].mean(axis=1)


@dataclass
class CPReport:
    positive_gates: np.ndarray
    negative_gates: np.ndarray
    positive_mean: np.ndarray  # per step
    negative_mean: np.ndarray
    spikes: np.ndarray
    corr_positive: float
    corr_negative: float
    n_positive: int
    n_negative: int

    @property
    def negative_to_positive(self) -> float:
        return self.n_negative / self.n_positive if self.n_positive else float("inf")

    def summary(self) -> dict:
        def stats(v):
            return {"mean": float(v.mean()), "p": np.percentile(v, [1, 25, 50, 75, 99]).tolist()} if v.size else None

        return {
            "positive": stats(self.positive_gates),
            "negative": stats(self.negative_gates),
            "corr_positive": self.corr_positive,
            "corr_negative": self.corr_negative,
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
        }


def cp_sign_analysis(
    trace: RegulationTrace,
    upstream_layers=UPSTREAM,
    top_fraction: float = 0.1,
    layer: str = "cp",
) -> CPReport:
    """Split CP gates by the sign of their concurrent weight.

    Correlations are between first differences of the upstream spike
    series and of the per-step mean CP gate of each sign group.
    """
    gates, weights, _ = _cp_arrays(trace, layer)
    pos, neg = weights > 0, weights < 0
    pos_mean, neg_mean = _group_mean(gates, pos), _group_mean(gates, neg)
    spikes = upstream_spikes(trace, upstream_layers, top_fraction)
    ds = np.diff(spikes)

    def corr(series):
        d = np.diff(series)
        ok = np.isfinite(d)
        return pearson(ds[ok], d[ok]) if ok.sum() >= 2 else float("nan")

    return CPReport(
        positive_gates=gates[pos],
        negative_gates=gates[neg],
        positive_mean=pos_mean,
        negative_mean=neg_mean,
        spikes=spikes,
        corr_positive=corr(pos_mean),
        corr_negative=corr(neg_mean),
        n_positive=int(pos[-1].sum()),
        n_negative=int(neg[-1].sum()),
    )


# ---------------------------------------------------------------------------
# class-node dynamics
# ---------------------------------------------------------------------------


@dataclass
class NodeCurves:
    within_positive: np.ndarray  # (runs, K) percent change
    within_negative: np.ndarray
    after_positive: np.ndarray  # (runs, horizon)
    after_negative: np.ndarray

    @staticmethod
    def _band(a):
        return np.nanmean(a, axis=0), np.nanstd(a, axis=0)

    def summary(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {
            "within_positive": self._band(self.within_positive),
            "within_negative": self._band(self.within_negative),
            "after_positive": self._band(self.after_positive),
            "after_negative": self._band(self.after_negative),
        }


def _node_group_means(trace: RegulationTrace, num_classes: int, layer: str = "cp"):
    """Per step and class node: mean gate of its positive and negative weights."""
    gates, weights, ids = _cp_arrays(trace, layer)
    node = ids // (trace.num_synapses(layer) // num_classes)
    steps = gates.shape[0]
    pos = np.full((steps, num_classes), np.nan)
    neg = np.full((steps, num_classes), np.nan)
    for c in range(num_classes):
        cols = node == c
        pos[:, c] = _group_mean(gates[:, cols], weights[:, cols] > 0)
        neg[:, c] = _group_mean(gates[:, cols], weights[:, cols] < 0)
    return pos, neg


def _percent(x, ref):
    return 100.0 * (x - ref) / ref


def class_node_dynamics(traces, horizon: int | None = None, layer: str = "cp") -> NodeCurves:
    """Percent change of CP regulation on the current / previous class node.

    Within a task (task t >= 1): regulation of node t relative to its value
    at the final step of task t-1.  After a task: regulation of node t over
    the next ``horizon`` steps relative to its value at the task's final
    step.  Each run averages over its tasks; curves are returned per run.
    """
    traces = list(traces)
    if len(traces) < 2:
        raise ValueError("class-node dynamics needs at least 2 runs")
    shapes = {(len(t), tuple(np.unique(t.task_array()))) for t in traces}
    if len(shapes) != 1:
        raise ValueError("runs are not aligned: different step counts or task sets")
    runs = {k: [] for k in ("wp", "wn", "ap", "an")}
    for trace in traces:
        tasks = trace.task_array()
        labels = np.unique(tasks)
        num_classes = trace.layer_shapes[layer][0]
        pos, neg = _node_group_means(trace, num_classes, layer)
        ends = np.array([np.flatnonzero(tasks == t)[-1] for t in labels])
        K = int(np.min(np.bincount(np.searchsorted(labels, tasks))))
        H = horizon if horizon is not None else K
        wp, wn, ap, an = [], [], [], []
        for j, t in enumerate(labels):
            steps = np.flatnonzero(tasks == t)[:K]
            if j >= 1:
                ref = ends[j - 1]
                wp.append(_percent(pos[steps, t], pos[ref, t]))
                wn.append(_percent(neg[steps, t], neg[ref, t]))
            after = np.arange(ends[j] + 1, ends[j] + 1 + H)
            row_p = np.full(H, np.nan)
            row_n = np.full(H, np.nan)
            valid = after[after < len(tasks)]
            row_p[: len(valid)] = _percent(pos[valid, t], pos[ends[j], t])
            row_n[: len(valid)] = _percent(neg[valid, t], neg[ends[j], t])
            ap.append(row_p)
            an.append(row_n)
        for key, rows in zip(("wp", "wn", "ap", "an"), (wp, wn, ap, an)):
            runs[key].append(np.nanmean(np.vstack(rows), axis=0) if rows else np.full(K if key[0] == "w" else H, np.nan))
    return NodeCurves(*(np.vstack(runs[k]) for k in ("wp", "wn", "ap", "an")))
