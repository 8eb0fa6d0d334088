"""Stopped martingales in the progressively enlarged filtration.

``decompose`` splits ``M_{t ^ rho}`` into a drift ``int_0^{t ^ rho} d<M, mu>_s / Z_s``
and a remainder ``m_tilde`` that should be a martingale once ``rho`` is made a
stopping time. ``martingale_test`` and ``optional_stopping_test`` check the two
martingale statements by Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import norm, rankdata

from .azema import EPSILON, AzemaBundle, rho_indices
from .errors import AlignmentError
from .paths import Ensemble, PathBundle

__all__ = [
    "DEFAULT_ALPHA",
    "DecompositionResult",
    "TestReport",
    "ProbeMartingale",
    "standard_probe_family",
    "brownian_probe",
    "decompose",
    "martingale_test",
    "mean_test",
    "richardson",
    "optional_stopping_test",
]

# two-sided level whose critical value is 3 standard errors
DEFAULT_ALPHA = 2 * norm.sf(3.0)


@dataclass
class DecompositionResult:
    """``stopped = m_tilde + drift`` on every path; ``drift`` is frozen after ``rho``."""

    stopped: PathBundle | Ensemble
    drift: np.ndarray
    m_tilde: np.ndarray
    floored_steps: int = 0


@dataclass
class TestReport:
    name: str
    statistic: float
    standard_error: float
    n_effective: int
    verdict: str
    alpha: float
    details: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    @property
    def z(self) -> float:
        if not self.standard_error > 0:
            return np.inf if self.statistic else 0.0
        return self.statistic / self.standard_error

    def to_dict(self) -> dict:
        out = {"name": self.name, "statistic": float(self.statistic),
               "se": float(self.standard_error), "n": int(self.n_effective),
               "verdict": self.verdict, "alpha": float(self.alpha)}
        if self.details:
            out["details"] = self.details
        return out


def critical_value(alpha: float, n_comparisons: int = 1) -> float:
    """Two-sided normal critical value with a Bonferroni split over ``n_comparisons``."""
    return float(norm.isf(alpha / (2 * max(n_comparisons, 1))))


def decompose(M, azema: AzemaBundle, rho, eps: float = EPSILON) -> DecompositionResult:
    """Split ``M`` stopped at ``rho`` into ``m_tilde + drift``.

    The drift increment on step ``k < rho`` is ``dM_k dmu_k / max(Z_k, eps)``, the
    product of same-step increments standing in for ``d<M, mu>``. Since ``mu`` is
    continuous only the continuous part of ``M`` counts, so pure-jump paths
    (kind ``jump``) carry no drift.
    """
    values = np.atleast_2d(np.asarray(M.values, dtype=float))
    mu = np.atleast_2d(azema.mu)
    Z = np.atleast_2d(azema.Z)
    if mu.shape != values.shape or Z.shape != values.shape:
        raise AlignmentError(
            f"martingale shape {values.shape} does not match Azema shapes {mu.shape}, {Z.shape}")
    idx, capped = rho_indices(rho, values.shape[0])
    if capped.any():
        raise AlignmentError("decompose needs uncapped realizations")
    n = values.shape[1]
    nodes = np.arange(n)
    live = nodes[None, :-1] < idx[:, None]
    z = Z[:, :-1]
    floored = int((live & (z < eps)).sum())
    if M.kind == "jump":
        inc = np.zeros_like(z)
    else:
        inc = np.where(live, np.diff(values, axis=1) * np.diff(mu, axis=1) / np.maximum(z, eps),
                       0.0)
    drift = np.zeros_like(values)
    drift[:, 1:] = np.cumsum(inc, axis=1)
    stop = np.minimum(nodes[None, :], idx[:, None])
    stopped_v = np.take_along_axis(values, stop, axis=1)
    m_tilde = stopped_v - drift
    if isinstance(M, PathBundle):
        stopped = PathBundle.from_values(M.grid, stopped_v[0], M.kind)
        return DecompositionResult(stopped, drift[0], m_tilde[0], floored)
    stopped = Ensemble.from_values(M.grid, stopped_v, M.kind, seed=M.seed, path_ids=M.path_ids)
    return DecompositionResult(stopped, drift, m_tilde, floored)


def martingale_test(X, probe_times=None, n_bins: int = 10, alpha: float = DEFAULT_ALPHA,
                    name: str = "martingale_test", min_paths: int = 10_000) -> TestReport:
    """Conditional-increment test on values ``X[path, j]`` at increasing probe times.

    For each consecutive pair of probes, paths are split into ``n_bins``
    equal-count bins by the rank of the value at the earlier probe, and the mean
    increment in every bin is standardized. The statistic is the bin mean with the
    largest ``|z|``; the verdict uses a Bonferroni critical value over all bins.
    """
    X = np.asarray(X, dtype=float)
    n, m = X.shape
    per_pair = []
    worst = (0.0, 0.0, 0.0, None)
    n_tests = 0
    for j in range(m - 1):
        x1, d = X[:, j], X[:, j + 1] - X[:, j]
        ranks = rankdata(x1, method="ordinal") - 1
        bins = ranks * n_bins // max(n, 1)
        cnt = np.bincount(bins, minlength=n_bins)
        s1 = np.bincount(bins, weights=d, minlength=n_bins)
        s2 = np.bincount(bins, weights=d * d, minlength=n_bins)
        worst_pair = 0.0
        for b in np.flatnonzero(cnt >= 2):
            mean = s1[b] / cnt[b]
            var = max(s2[b] / cnt[b] - mean * mean, 0.0) * cnt[b] / (cnt[b] - 1)
            se = np.sqrt(var / cnt[b])
            z = abs(mean) / se if se > 0 else (np.inf if mean != 0 else 0.0)
            n_tests += 1
            worst_pair = max(worst_pair, z)
            if z >= worst[0]:
                worst = (z, mean, se, (j, int(b)))
        per_pair.append(float(worst_pair))
    details = {"n_bins_tested": n_tests, "worst_z_per_pair": per_pair}
    if probe_times is not None:
        details["probe_times"] = [float(t) for t in probe_times]
    if n_tests == 0:
        return TestReport(name, 0.0, 0.0, n, "inconclusive", alpha, details)
    crit = critical_value(alpha, n_tests)
    details.update(critical_z=crit, worst_z=float(worst[0]),
                   worst_bin=list(worst[3]) if worst[3] else None)
    if n < min_paths:
        verdict = "inconclusive"
        details["note"] = f"fewer than {min_paths} effective paths"
    else:
        verdict = "pass" if worst[0] <= crit else "fail"
    return TestReport(name, float(worst[1]), float(worst[2]), n, verdict, alpha, details)


def richardson(fine, coarse, factor: int = 4):
    """Per-path extrapolation removing an error term proportional to ``sqrt(dt)``."""
    r = np.sqrt(factor)
    fine = np.asarray(fine, float)
    return fine + (fine - np.asarray(coarse, float)) / (r - 1)


def mean_test(samples, name: str, target: float = 0.0, alpha: float = DEFAULT_ALPHA,
              coarse=None, factor: int = 4, details=None) -> TestReport:
    """Test ``E[samples] = target``; with ``coarse`` the samples are extrapolated first."""
    fine = np.asarray(samples, float)
    details = dict(details or {})
    x = fine
    if coarse is not None:
        x = richardson(fine, coarse, factor)
        details.update(fine_mean=float(fine.mean()), coarse_mean=float(np.mean(coarse)),
                       fine_se=float(fine.std(ddof=1) / np.sqrt(fine.size)),
                       refinement_factor=factor)
    stat = float(x.mean() - target)
    se = float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else np.nan
    crit = critical_value(alpha)
    verdict = "pass" if abs(stat) <= crit * se else "fail"
    details["estimate"] = float(x.mean())
    return TestReport(name, stat, se, int(x.size), verdict, alpha, details)


@dataclass(frozen=True)
class ProbeMartingale:
    """A martingale ``M_t = g(t, B_t)`` frozen at a path-dependent node.

    ``g`` is evaluated at ``min(rho, freeze)``. ``domain_end`` marks probes that
    are only defined up to a fixed time; realizations beyond it skip the probe.
    """

    name: str
    state: callable
    freeze: callable
    bounded: bool = True
    domain_end: float | None = None
    description: str = ""

    def freeze_index(self, values, grid) -> np.ndarray:
        return np.asarray(self.freeze(np.atleast_2d(values), grid), dtype=np.int64)

    def value_at(self, values, grid, idx) -> np.ndarray:
        """``M`` at node ``idx`` of each row (``idx`` already capped at the freeze node)."""
        v = np.atleast_2d(values)
        idx = np.asarray(idx, dtype=np.int64)
        x = np.take_along_axis(v, idx.reshape(v.shape[0], -1), axis=1).reshape(idx.shape)
        return self.state(idx * grid.dt, x, grid)

    def stopped_value(self, values, grid, rho_idx) -> np.ndarray:
        thr = self.freeze_index(values, grid)
        return self.value_at(values, grid, np.minimum(rho_idx, thr))


def _horizon_node(v, grid):
    return np.full(v.shape[0], min(grid.node(1.0), v.shape[1] - 1))


def _m1_state(t, x, grid):
    t1 = grid.node(1.0) * grid.dt
    with np.errstate(divide="ignore", invalid="ignore"):
        before = ndtr(x / np.sqrt(np.maximum(t1 - t, 1e-300))) - 0.5
    return np.where(t < t1 - 1e-12, before, 0.5 * np.sign(x))


def _exit_freeze(a, b):
    def freeze(v, grid):
        n1 = grid.node(1.0)
        out = (v[:, :n1 + 1] <= a) | (v[:, :n1 + 1] >= b)
        return np.where(out.any(axis=1), out.argmax(axis=1), min(n1, v.shape[1] - 1))
    return freeze


def standard_probe_family(a: float = -0.5, b: float = 0.5, lam: float = 1.0):
    """Three bounded martingales, all frozen at time 1.

    * ``conditional_probability``: ``Phi(B_t / sqrt(1 - t)) - 1/2`` (= ``P(B_1 > 0 | F_t) - 1/2``);
    * ``two_sided_exit``: ``B`` stopped on leaving ``(a, b)``;
    * ``exponential_sine``: ``sin(lam B_t) exp(lam^2 t / 2)``.
    """
    if not a < 0 < b:
        raise ValueError("two-sided exit needs a < 0 < b")
    return [
        ProbeMartingale("conditional_probability", _m1_state, _horizon_node,
                        description="Phi(B_t/sqrt(1-t)) - 1/2, frozen at 1"),
        ProbeMartingale("two_sided_exit", lambda t, x, g: x, _exit_freeze(a, b),
                        description=f"B stopped at the exit of ({a:g}, {b:g}), frozen at 1"),
        ProbeMartingale("exponential_sine",
                        lambda t, x, g: np.sin(lam * x) * np.exp(lam * lam * t / 2),
                        _horizon_node,
                        description=f"sin({lam:g} B_t) exp({lam:g}^2 t/2), frozen at 1"),
    ]


def brownian_probe(frozen_at_one: bool = True) -> ProbeMartingale:
    """The unbounded probe ``M = B`` (frozen at 1 unless told otherwise)."""
    if frozen_at_one:
        return ProbeMartingale("brownian", lambda t, x, g: x, _horizon_node, bounded=False,
                               description="B_t, frozen at 1")
    return ProbeMartingale("brownian", lambda t, x, g: x,
                           lambda v, g: np.full(v.shape[0], v.shape[1] - 1), bounded=False,
                           domain_end=1.0, description="B_t on [0, 1]")


def optional_stopping_test(family, realizations, paths, coarse=None, coarse_realizations=None,
                           alpha: float = DEFAULT_ALPHA):
    """``E[M_rho] = 0`` for every probe in ``family``.

    ``paths`` is an ensemble covering every realization node; capped paths are
    dropped. Passing the nested ``coarse`` ensemble and its realizations turns on
    Richardson extrapolation in ``sqrt(dt)``.
    """
    idx, capped = rho_indices(realizations, len(paths))
    keep = ~capped
    v = np.atleast_2d(paths.values)[keep]
    grid = paths.grid
    rho = idx[keep]
    reports = []
    if coarse is not None:
        cidx, ccapped = rho_indices(coarse_realizations, len(coarse))
        keep_c = keep & ~ccapped
        vc = np.atleast_2d(coarse.values)[keep_c]
        factor = coarse.grid.dt / grid.dt
    for probe in family:
        if probe.domain_end is not None and (rho * grid.dt > probe.domain_end + 1e-12).any():
            reports.append(TestReport(probe.name, np.nan, np.nan, int(rho.size), "skipped", alpha,
                                      {"note": f"realizations beyond t = {probe.domain_end:g}"}))
            continue
        fine = probe.stopped_value(v, grid, rho)
        details = {"description": probe.description, "excluded_capped": int(capped.sum())}
        if coarse is None:
            reports.append(mean_test(fine, probe.name, alpha=alpha, details=details))
        else:
            fc = fine[keep_c[keep]]
            cval = probe.stopped_value(vc, coarse.grid, cidx[keep_c])
            reports.append(mean_test(fc, probe.name, alpha=alpha, coarse=cval,
                                     factor=int(round(factor)), details=details))
    return reports
