"""Moment-ratio experiments at random times.

The ratio ``E[(M*_rho)^p] / E[<M>_rho^{p/2}]`` stays inside the BDG constants
for stopping and pseudo-stopping times. At honest times it does not: the
infimum ``I_rho`` of the Azema supermartingale is uniform, the BMO functional
``J`` has a heavy tail and integrands that load on small ``Z`` blow the ratio up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import rng
from .azema import rho_indices
from .errors import ConfigurationError
from .paths import IntegrandSpec, integrate

__all__ = [
    "MomentReport",
    "SweepReport",
    "bootstrap_ratio_ci",
    "stopped_functionals",
    "moment_ratio",
    "moment_ratio_from_samples",
    "bracket_ratio",
    "counterexample_indicator",
    "uniformity_diagnostics",
    "bmo_blowup_diagnostic",
    "sweep_functionals",
    "sweep_report",
    "adversarial_sweep",
]


@dataclass
class MomentReport:
    p: float
    lhs: float
    rhs: float
    ratio: float
    ci: tuple
    n_effective: int
    excluded_capped: int
    verdict: str = "ok"
    bracket: bool = False

    def to_dict(self) -> dict:
        return {"p": self.p, "lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio,
                "ci": [float(c) for c in self.ci], "n_effective": self.n_effective,
                "excluded_capped": self.excluded_capped, "verdict": self.verdict,
                "bracket": self.bracket}


def bootstrap_ratio_ci(num, den, seed: int = 0, n_resamples: int = 1000, level: float = 0.95):
    """Paired percentile bootstrap interval for ``mean(num) / mean(den)``."""
    num = np.asarray(num, float)
    den = np.asarray(den, float)

    def ratio(a, b, axis=-1):
        return a.mean(axis=axis) / b.mean(axis=axis)

    gen = rng.path_generator(seed, 0, "bootstrap")
    batch = max(1, int(2e7 // max(num.size, 1)))
    res = stats.bootstrap((num, den), ratio, paired=True, vectorized=True, n_resamples=n_resamples,
                          confidence_level=level, method="percentile", batch=batch, rng=gen)
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


def moment_ratio_from_samples(m_star, bracket_at_rho, p: float, excluded_capped: int = 0,
                              seed: int = 0, n_resamples: int = 1000,
                              bracket: bool = False, weights=None) -> MomentReport:
    """Plug-in ratio ``E[(M*)^p] / E[Q^{p/2}]`` with a bootstrap interval.

    With ``weights`` the inputs have shape ``(n, k)``: row ``i`` is a discrete
    conditional law over ``k`` outcomes, and its weighted moments are the samples.
    """
    if not p > 0:
        raise ConfigurationError(f"p must be positive, got {p}")
    rhs_s = np.asarray(m_star, float) ** p
    lhs_s = np.asarray(bracket_at_rho, float) ** (p / 2)
    if weights is not None:
        w = np.asarray(weights, float)
        rhs_s = np.where(w > 0, w * rhs_s, 0.0).sum(axis=1)
        lhs_s = np.where(w > 0, w * lhs_s, 0.0).sum(axis=1)
    n = int(rhs_s.size)
    lhs = float(lhs_s.mean()) if n else 0.0
    rhs = float(rhs_s.mean()) if n else 0.0
    if not lhs > 0:
        return MomentReport(p, lhs, rhs, float("nan"), (float("nan"), float("nan")), n,
                            excluded_capped, "degenerate", bracket)
    ci = bootstrap_ratio_ci(rhs_s, lhs_s, seed, n_resamples)
    return MomentReport(p, lhs, rhs, rhs / lhs, ci, n, excluded_capped, "ok", bracket)


def stopped_functionals(M, realizations, use_bracket: bool = False):
    """``(M*_rho, <M>_rho or [M]_rho, capped)`` for an ensemble and its realizations."""
    idx, capped = rho_indices(realizations, len(M))
    keep = ~capped
    rows = np.flatnonzero(keep)
    q = np.atleast_2d(M.bracket if use_bracket else M.qv)
    m_star = np.atleast_2d(M.running_max_abs)[rows, idx[keep]]
    return m_star, q[rows, idx[keep]], capped


def moment_ratio(M, realizations, p: float, seed: int = 0, n_resamples: int = 1000) -> MomentReport:
    """``E[(M*_rho)^p] / E[<M>_rho^{p/2}]`` over uncapped paths."""
    m_star, qv, capped = stopped_functionals(M, realizations)
    return moment_ratio_from_samples(m_star, qv, p, int(capped.sum()), seed, n_resamples)


def bracket_ratio(M, realizations, p: float, seed: int = 0, n_resamples: int = 1000) -> MomentReport:
    """As :func:`moment_ratio` with the bracket ``[M]`` of a jump martingale."""
    if M.kind != "jump":
        raise ConfigurationError(f"bracket_ratio needs a jump martingale, got kind {M.kind!r}")
    m_star, br, capped = stopped_functionals(M, realizations, use_bracket=True)
    return moment_ratio_from_samples(m_star, br, p, int(capped.sum()), seed, n_resamples,
                                     bracket=True)


def counterexample_indicator(K_grid, terminal, min_count: int = 30, level: float = 0.95):
    """Rows ``E[|B_1| ; |B_1| > K] / P(|B_1| > K)`` for each ``K``.

    ``terminal`` holds ``B_1`` per path (or an ensemble, whose node at time 1 is
    used). The interval is a t-interval for the conditional mean.
    """
    if hasattr(terminal, "values"):
        v = np.atleast_2d(terminal.values)
        terminal = v[:, terminal.grid.node(1.0)]
    x = np.abs(np.asarray(terminal, float))
    n = x.size
    q = stats.norm.isf((1 - level) / 2)
    rows = []
    for K in K_grid:
        sel = x[x > K]
        c = int(sel.size)
        row = {"K": float(K), "count": c, "fraction": c / n if n else 0.0,
               "insufficient_sample": c < min_count}
        if c:
            mean = float(sel.mean())
            se = float(sel.std(ddof=1) / np.sqrt(c)) if c > 1 else float("nan")
            row.update(ratio=mean, se=se, ci=[mean - q * se, mean + q * se])
        else:
            row.update(ratio=float("nan"), se=float("nan"), ci=[float("nan"), float("nan")])
        rows.append(row)
    return rows


def uniformity_diagnostics(I, alpha: float = 0.01, min_samples: int = 10_000) -> dict:
    """KS test of ``I`` against U(0, 1) plus summaries of ``log(1/I)``.

    The KS verdict compares ``D`` with the asymptotic critical value
    ``1.63 / sqrt(N)`` at ``alpha = 0.01`` (exact p-value reported alongside).
    """
    I = np.asarray(I, float)
    I = I[np.isfinite(I)]
    n = int(I.size)
    out = {"n": n, "alpha": alpha}
    if n == 0 or np.ptp(I) == 0:
        out.update(verdict="degenerate", value=float(I[0]) if n else None)
        return out
    ks = stats.kstest(I, "uniform")
    crit = float(stats.kstwobign.isf(alpha) / np.sqrt(n))
    # I = 0 only happens when rho sits on a node where Z vanishes (grid artifact)
    pos = I[I > 0]
    L = np.log(1.0 / pos)
    out.update(ks_statistic=float(ks.statistic), ks_pvalue=float(ks.pvalue), critical=crit,
               verdict="pass" if ks.statistic < crit else "fail",
               mean_log_inv=float(L.mean()) if L.size else float("nan"),
               max_log_inv=float(L.max()) if L.size else float("nan"),
               zero_count=int(n - pos.size), log_n=float(np.log(n)))
    if n < min_samples:
        out["note"] = f"fewer than {min_samples} samples"
    return out


def bmo_blowup_diagnostic(J, I, floored_steps: int = 0, total_steps: int | None = None,
                          flag_fraction: float = 0.05) -> dict:
    """Quantiles of ``J`` and the ``(J, 2(1 + log 1/I))`` scatter.

    The result is flagged discretization-limited when more than ``flag_fraction``
    of the integrated steps hit the division floor.
    """
    J = np.asarray(J, float)
    I = np.asarray(I, float)
    ok = np.isfinite(J)
    J, I = J[ok], I[ok]
    q50, q90, q99 = (float(v) for v in np.quantile(J, [0.5, 0.9, 0.99])) if J.size else (0.0,) * 3
    with np.errstate(divide="ignore"):
        bound = 2 * (1 + np.log(1.0 / I))
    frac = floored_steps / total_steps if total_steps else 0.0
    return {"n": int(J.size), "q50": q50, "q90": q90, "q99": q99,
            "q99_over_q50": q99 / q50 if q50 > 0 else float("nan"),
            "max": float(J.max()) if J.size else 0.0,
            "floored_steps": int(floored_steps), "floored_fraction": float(frac),
            "discretization_limited": bool(frac > flag_fraction),
            "scatter": np.column_stack([J, bound])}


@dataclass
class SweepReport:
    family: IntegrandSpec
    c_values: list
    ratios: list
    cis: list
    growth_factor: float
    monotone_violations: int
    significant_violations: int
    verdict: str
    n_effective: int = 0
    note: str = ""
    reports: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"alpha": self.family.alpha, "c_values": list(self.c_values),
                "ratios": list(self.ratios), "cis": [list(c) for c in self.cis],
                "growth_factor": self.growth_factor,
                "monotone_violations": self.monotone_violations,
                "significant_violations": self.significant_violations,
                "verdict": self.verdict, "n_effective": self.n_effective, "note": self.note}


def sweep_functionals(values, Z, rho_idx, alpha: float, c_values):
    """Per-path ``(M*_rho, sqrt(<M>_rho))`` for ``M = int (Z + c)^-alpha dB`` and every ``c``."""
    v = np.atleast_2d(values)
    rows = np.arange(v.shape[0])
    rho_idx = np.asarray(rho_idx)
    live = np.arange(v.shape[1])[None, :] <= rho_idx[:, None]
    out = {}
    for c in c_values:
        spec = IntegrandSpec.function_of_Z(alpha, c)
        M, qv = integrate(spec.weights(v, Z), v)
        m_star = np.where(live, np.abs(M), 0.0).max(axis=1)
        out[c] = (m_star, np.sqrt(qv[rows, rho_idx]))
    return out


def sweep_report(alpha: float, c_values, samples, seed: int = 0,
                 n_resamples: int = 1000) -> SweepReport:
    """Assemble the p = 1 ratios ``R(c)`` from :func:`sweep_functionals` output."""
    c_values = [float(c) for c in c_values]
    if any(b >= a for a, b in zip(c_values, c_values[1:])):
        raise ConfigurationError("c grid must be strictly decreasing")
    reports = [moment_ratio_from_samples(samples[c][0], samples[c][1] ** 2, 1.0, seed=seed,
                                         n_resamples=n_resamples) for c in c_values]
    ratios = [r.ratio for r in reports]
    cis = [r.ci for r in reports]
    # equal ratios up to rounding are not a drop
    viol = sum(b < a * (1 - 1e-12) for a, b in zip(ratios, ratios[1:]))
    sig = sum(cb[1] < ca[0] for ca, cb in zip(cis, cis[1:]))
    growth = ratios[-1] / ratios[0]
    overlap = cis[-1][0] <= cis[0][1] and cis[0][0] <= cis[-1][1]
    note = ""
    verdict = "determinate"
    if overlap:
        verdict = "inconclusive"
        note = "intervals at the ends of the c grid overlap; increase n_paths to resolve growth"
    return SweepReport(IntegrandSpec.function_of_Z(alpha, c_values[-1]), c_values, ratios, cis,
                       float(growth), int(viol), int(sig), verdict, reports[0].n_effective, note,
                       reports)


def adversarial_sweep(driver, Z, realizations, alpha: float = 1.0,
                      c_values=(1.0, 1e-1, 1e-2, 1e-3), seed: int = 0,
                      n_resamples: int = 1000) -> SweepReport:
    """Ratio growth of ``int (Z + c)^-alpha dB`` stopped at ``rho`` as ``c`` decreases."""
    idx, capped = rho_indices(realizations, len(driver))
    keep = ~capped
    samples = sweep_functionals(np.atleast_2d(driver.values)[keep], np.atleast_2d(Z)[keep],
                                idx[keep], alpha, c_values)
    return sweep_report(alpha, c_values, samples, seed, n_resamples)
