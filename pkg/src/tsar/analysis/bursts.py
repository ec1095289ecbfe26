"""Burst-size distributions and log-log power-law fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data.trace import RegulationTrace

DEFAULT_THRESHOLDS = (0.25, 0.5, 0.75, 0.9)


@dataclass
class BurstDistribution:
    threshold: float
    counts: np.ndarray  # per step: synapses above threshold
    sizes: np.ndarray  # distinct burst sizes
    frequencies: np.ndarray  # how many steps had each size
    log_x: np.ndarray
    log_y: np.ndarray

    def as_dict(self) -> dict[int, int]:
        return {int(s): int(f) for s, f in zip(self.sizes, self.frequencies)}


def burst_counts(gates: np.ndarray, threshold: float) -> np.ndarray:
    return (np.asarray(gates) > threshold).sum(axis=1)


def spike_size_distribution(
    trace_or_gates, layer: str | None = None, thresholds=DEFAULT_THRESHOLDS, bins_per_decade: int = 5
) -> dict[float, BurstDistribution]:
    """Per threshold: how many steps saw each number of bursting synapses.

    A synapse bursts at a step when its gate exceeds the threshold.
    """
    gates = trace_or_gates.gate_matrix(layer) if isinstance(trace_or_gates, RegulationTrace) else np.asarray(trace_or_gates)
    out = {}
    for th in thresholds:
        if not 0.0 < th < 1.0:
            raise ValueError(f"threshold {th} outside (0, 1)")
        counts = burst_counts(gates, th)
        sizes, freqs = np.unique(counts, return_counts=True)
        nz = sizes > 0
        if nz.sum() >= 1:
            lx, ly = log_binned(sizes[nz], freqs[nz], bins_per_decade)
        else:
            lx = ly = np.zeros(0)
        out[float(th)] = BurstDistribution(float(th), counts, sizes, freqs, lx, ly)
    return out


def log_binned(sizes, freqs, bins_per_decade: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Density per logarithmic bin over integer sizes.

    Bins cover [1, max] with geometric edges; each bin's density is its total
    frequency divided by the number of integers it spans, placed at the
    geometric mean of its smallest and largest integer.  Empty bins are
    dropped.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    freqs = np.asarray(freqs, dtype=np.float64)
    if np.any(sizes < 1):
        raise ValueError("log binning needs sizes >= 1")
    top = sizes.max()
    n_bins = max(1, int(np.ceil(np.log10(top + 1) * bins_per_decade)))
    edges = np.unique(np.ceil(np.logspace(0, np.log10(top + 1), n_bins + 1)))
    if edges[-1] <= top:
        edges = np.append(edges, top + 1)
    total, _ = np.histogram(sizes, bins=edges, weights=freqs)
    lo, hi = edges[:-1], edges[1:] - 1
    width = hi - lo + 1
    keep = total > 0
    return np.sqrt(lo * hi)[keep], (total / width)[keep]


@dataclass(frozen=True)
class RegimeThresholds:
    r2_min: float = 0.9
    slope_min: float = -4.0
    slope_max: float = -1.0


@dataclass
class PowerLawFit:
    slope: float
    intercept: float
    r2: float
    n_bins: int
    regime: str

    @property
    def power_law_like(self) -> bool:
        return self.regime == "power-law-like"


def classify(slope: float, r2: float, thresholds: RegimeThresholds = RegimeThresholds()) -> str:
    if slope < thresholds.slope_min:
        return "suppressant-truncated"
    if slope > thresholds.slope_max:
        return "super-linear"
    return "power-law-like" if r2 >= thresholds.r2_min else "irregular"


def powerlaw_fit(
    sizes,
    freqs=None,
    bins_per_decade: int = 5,
    thresholds: RegimeThresholds = RegimeThresholds(),
) -> PowerLawFit:
    """Least-squares line through log10(density) vs log10(size) on log bins.

    ``freqs=None`` treats ``sizes`` as raw samples.  Zero sizes are ignored.
    """
    sizes = np.asarray(sizes)
    if freqs is None:
        sizes, freqs = np.unique(sizes, return_counts=True)
    freqs = np.asarray(freqs, dtype=np.float64)
    keep = (sizes > 0) & (freqs > 0)
    if keep.sum() < 3:
        raise ValueError("power-law fit needs at least 3 nonzero sizes")
    x, y = log_binned(sizes[keep], freqs[keep], bins_per_decade)
    if len(x) < 3:
        raise ValueError(f"power-law fit needs at least 3 nonzero bins, got {len(x)}")
    lx, ly = np.log10(x), np.log10(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    # a flat series has no variance to explain
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else float("nan")
    return PowerLawFit(float(slope), float(intercept), r2, len(x), classify(float(slope), r2, thresholds))
