"""Geweke z-scores and batch-means MCSE on iid, AR(1) and drifting chains."""
import numpy as np

from sthmm.diagnostics import geweke, mcse_batch_means

rng = np.random.default_rng(0)
n = 5000
x = rng.standard_normal(n)
ar = np.empty(n)
ar[0] = 0.0
for t in range(1, n):
    ar[t] = 0.9 * ar[t - 1] + rng.standard_normal()
chains = {"iid": x, "AR(1), phi=0.9": ar, "iid + drift": x + 2.0 * np.arange(n) / n}

for name, c in chains.items():
    g = geweke(c)
    print(f"{name:<16} z={g.z:7.2f} {'pass' if g.passed else 'FAIL':<5} mcse={mcse_batch_means(c):.4f}")
