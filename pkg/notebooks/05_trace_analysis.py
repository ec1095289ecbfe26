"""Reading regulation traces: modularity, time lags, bursts and power laws.

Run with ``python3 notebooks/05_trace_analysis.py``.  Reference traces are
synthetic so every number below has a known answer.
"""

# %% Two reference traces: strictly modular synapses vs random regulation
import numpy as np
from scipy.stats import spearmanr

from tsar.analysis import (
    activity_table,
    bootstrap_ci,
    mann_whitney_u,
    modularity_histogram,
    powerlaw_fit,
    spike_size_distribution,
    synthetic_trace,
    timelag_histogram,
)

modular = synthetic_trace("modular", 500, 5, rng=0)
random = synthetic_trace("random", 500, 5, rng=0)

# %% Modularity histogram: task-specific vs task-agnostic log rank per (synapse, task)
for name, tr in (("modular", modular), ("random", random)):
    h = modularity_histogram(tr, "syn")
    spec, agn = activity_table(tr, "syn").log_ranks()
    rho = spearmanr(spec.ravel(), agn.ravel()).statistic
    print(f"{name:>8}: histogram mass {h.mass:.0f}, rank correlation {rho:+.3f}")

# every modular synapse ranks better on its own task than it does elsewhere
module = np.asarray(modular.meta["module"])
spec, agn = activity_table(modular, "syn").log_ranks()
own = np.arange(len(module))
print("in-module pairs with the better task-specific rank:", np.mean(spec[module, own] < agn[module, own]))

# %% Time-lag histogram of the most active band of synapses
h = timelag_histogram(random, "syn", band=(75, 99))
print("time-lag pairs:", int(h.mass), "on a", h.counts.shape, "grid")

# %% Burst sizes per threshold and a log-log fit
bursts = spike_size_distribution(random, "syn", thresholds=(0.5, 0.75, 0.9))
for th, d in bursts.items():
    print(f"threshold {th}: burst sizes {d.sizes.min()}..{d.sizes.max()}")

sizes = np.arange(1, 5001)
fit = powerlaw_fit(sizes, 1e9 * sizes**-2.0)
print(f"synthetic s^-2: slope {fit.slope:.3f}, R^2 {fit.r2:.4f}, regime {fit.regime}")

# %% Statistics used to compare fleets of runs
print("99% bootstrap CI:", bootstrap_ci(np.random.default_rng(0).normal(0.3, 0.05, 40)))
print("Mann-Whitney:", mann_whitney_u([1, 2, 3], [4, 5, 6]))
