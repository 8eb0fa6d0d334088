"""
Optional stopping at three kinds of random time
===============================================

A bounded martingale stopped at a stopping time keeps its mean. The Williams
time is not a stopping time, yet it has the same property; the argmax of the
path on [0, 1] does not.

Run with ``python demos/optional_stopping.py`` (about a minute on one core).
"""

import numpy as np

from bdglab.enlargement import mean_test, richardson, standard_probe_family
from bdglab.experiments import simulate
from bdglab.paths import GridSpec

SEED = 7
N = 20_000

# Nested grids: every path is also observed on every 4th node, so the
# O(sqrt(dt)) bias of the pathwise maximum can be extrapolated away.
grid = GridSpec(horizon=1.0, n_steps=1024, extension_chunk=1024, hard_cap=4.0)

#%% The Williams time
# Paths still below level 1 at the hard cap are completed through the exact
# conditional law of the time given the path so far, so nothing is dropped.
r = simulate("pseudo_williams", grid, SEED, N, {"probes": {"unbounded": True}}, factor=4)
print(f"pseudo_williams: {int(r['capped'].sum())} of {N} paths completed past the cap")
for probe in standard_probe_family():
    rep = mean_test(r["probe_" + probe.name], probe.name, coarse=r["probe_c_" + probe.name],
                    factor=4)
    print(f"  {probe.name:24s} mean {rep.statistic:+.4f}  z {rep.z:+.2f}  {rep.verdict}")

# The unbounded probe is B frozen at t = 1; rho ^ 1 is again a pseudo-stopping
# time, so its mean is zero as well.
b1 = richardson(r["probe_brownian"], r["probe_c_brownian"], 4)
print(f"  E[B_(rho ^ 1)] = {b1.mean():+.4f} +- {b1.std(ddof=1) / np.sqrt(N):.4f}  (exact 0)")

# B itself, unfrozen, is not bounded: at the Williams time it equals the
# maximum before the last zero preceding T_1, a uniform variable on (0, 1).
w = simulate("pseudo_williams", grid, SEED, N, {"williams_mean": {}}, factor=4)
b = richardson(w["b_rho_completed"], w["b_rho_completed_c"], 4)
print(f"  E[B_rho] = {b.mean():.4f} +- {b.std(ddof=1) / np.sqrt(N):.4f}  (exact 0.5)")

#%% The argmax before 1
# Stopping B at its running maximum picks up a strictly positive mean,
# E[S_1] = sqrt(2 / pi).
r = simulate("argmax_before:1.0", grid, SEED, N, {"probes": {"unbounded": True}}, factor=4)
b = richardson(r["probe_brownian"], r["probe_c_brownian"], 4)
print(f"argmax_before:1.0: E[B_rho] = {b.mean():.4f}  (sqrt(2/pi) = {np.sqrt(2 / np.pi):.4f})")
print(f"  raw fine {r['probe_brownian'].mean():.4f}, raw coarse {r['probe_c_brownian'].mean():.4f}")
