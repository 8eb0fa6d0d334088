"""
A random time that sees the future
==================================

rho = 1 on {|B_1| > K} and 0 elsewhere. The BDG ratio
E[(B*_rho)^2] / E[<B>_rho], taken over the paths where rho = 1, is at least
K^2 / 1, so no universal constant can bound it.

Run with ``python demos/indicator_counterexample.py``.
"""

import numpy as np
from scipy.stats import norm

from bdglab.bdg_lab import counterexample_indicator
from bdglab.experiments import terminal_values
from bdglab.paths import GridSpec

b1 = terminal_values(GridSpec(1.0, 4, 4, 1.0), seed=3, n_paths=1_000_000)
rows = counterexample_indicator(np.arange(6), b1)

print(f"{'K':>3} {'P(|B_1|>K)':>11} {'E[|B_1| | |B_1|>K]':>20} {'exact':>8}")
for row in rows:
    K = row["K"]
    exact = norm.pdf(K) / norm.sf(K)
    flag = "  (small tail)" if row["insufficient_sample"] else ""
    print(f"{K:3g} {row['fraction']:11.5f} {row['ratio']:20.4f} {exact:8.4f}{flag}")
