"""
What breaks at an honest time
=============================

At the last zero of B before 1 the stopped path is no longer a martingale.
The Azema supermartingale Z_t = P(rho > t | F_t) tells how badly: its
running infimum up to rho is uniform, and integrands that grow like Z^-alpha
push the BDG ratio up without bound as the floor c shrinks.

Run with ``python demos/honest_times.py`` (a couple of minutes on one core).
"""

import numpy as np

from bdglab.azema import azema_bundle, closed_form_Z
from bdglab.bdg_lab import sweep_report, uniformity_diagnostics
from bdglab.enlargement import decompose, martingale_test
from bdglab.experiments import PROBE_TIMES, simulate
from bdglab.paths import GridSpec, generate_brownian
from bdglab.random_times import realize

SEED = 11
LAST_ZERO = "last_zero_before:1.0"

#%% Z on a handful of paths
grid = GridSpec(1.0, 256, 256, 1.0)
ens = generate_brownian(grid, SEED, 5)
rs = realize(LAST_ZERO, ens)
Z = closed_form_Z(LAST_ZERO, ens)
for row in range(5):
    k = rs.rho_index[row]
    print(f"path {row}: rho = {k * grid.dt:.3f}, Z just before rho = {Z[row, max(k - 1, 0)]:.3f}, "
          f"Z at 1 = {Z[row, -1]:.1f}")

#%% Doob-Meyer split Z = mu - A and the enlargement decomposition
b = azema_bundle(LAST_ZERO, ens, rs)
dec = decompose(ens, b, rs)
print("max |B^rho - (M_tilde + drift)| =",
      f"{np.abs(dec.stopped.values - dec.m_tilde - dec.drift).max():.1e}")

#%% Martingale tests on the stopped path and on M_tilde
r = simulate(LAST_ZERO, grid, SEED, 20_000, {"decomposition": {"alpha": 1.0, "c": 1e-2}})
for name, key in [("B stopped at rho", "dec_b_stopped"), ("M_tilde", "dec_b_tilde"),
                  ("adversarial, stopped", "dec_adv_stopped")]:
    rep = martingale_test(r[key], PROBE_TIMES, name=name)
    print(f"  {name:22s} worst z {rep.details['worst_z']:6.2f}  {rep.verdict}")

#%% The running infimum of Z up to rho is uniform
# A fine grid matters: Z only reaches small values close to a zero.
fine = GridSpec(1.0, 1 << 14, 1 << 14, 1.0)
r = simulate(LAST_ZERO, fine, SEED, 5_000, {"azema": {"bmo": False}})
d = uniformity_diagnostics(r["i_rho"])
print(f"I_rho: KS {d['ks_statistic']:.4f} (critical {d['critical']:.4f}), "
      f"mean log(1/I) {d['mean_log_inv']:.3f} (Exp(1) mean 1)")

#%% Adversarial sweep: H = (Z v c)^-alpha
cs = [1.0, 0.1, 0.01, 0.001]
for ident in (LAST_ZERO, "deterministic:1.0"):
    r = simulate(ident, GridSpec(1.0, 1024, 1024, 1.0), SEED, 20_000,
                 {"sweep": {"alpha": 2.0, "c_values": cs}})
    samples = {c: (r[f"sweep_num_{j}"], r[f"sweep_den_{j}"]) for j, c in enumerate(cs)}
    rep = sweep_report(2.0, cs, samples, SEED, n_resamples=200)
    print(f"{ident:20s} ratios " + " ".join(f"{x:.3f}" for x in rep.ratios)
          + f"  growth {rep.growth_factor:.2f}")
