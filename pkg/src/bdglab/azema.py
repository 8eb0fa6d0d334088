"""Azema supermartingale ``Z_t = P(rho > t | F_t)``, its Doob-Meyer parts and ``I_rho``.

Closed forms are available as functions ``Z_t = F(t, B_t, S_t)`` of the driving
Brownian path (``S`` its running maximum):

* stopping time ``T``: ``Z = 1{t < T}``;
* ``last_zero_before(h)``: ``Z = 2 Phi(-|B_t| / sqrt(h - t))`` before ``h``, 0 after;
* ``argmax_before(h)``: ``Z = 2 Phi(-(S_t - B_t) / sqrt(h - t))`` before ``h``, 0 after;
* ``pseudo_williams``: ``Z = 1 - S_{t ^ T_1}``.

The martingale part is the left-point integral of ``dF/dx`` against the path;
``A = mu - Z``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import AlignmentError, UnsupportedTimeError
from .random_times import (RandomTimeSpec, RealizationSet, TimeRealization, first_hit_index,
                           parse_time)

__all__ = [
    "EPSILON",
    "AzemaBundle",
    "ZEstimate",
    "closed_form_Z",
    "z_derivative",
    "doob_meyer_split",
    "azema_bundle",
    "estimate_Z_empirical",
    "zero_after_probability",
    "infimum_I",
    "bmo_functional",
    "rho_indices",
]

EPSILON = 1e-8
_SQRT2PI = np.sqrt(2 * np.pi)


def _phi(x):
    return np.exp(-0.5 * x * x) / _SQRT2PI


def rho_indices(rho, n_rows: int | None = None):
    """``(index, capped)`` arrays from a realization, a realization set or raw indices."""
    if isinstance(rho, RealizationSet):
        return rho.rho_index, rho.capped
    if isinstance(rho, TimeRealization):
        idx = -1 if rho.capped else rho.rho_index
        return np.array([idx]), np.array([rho.capped])
    idx = np.atleast_1d(np.asarray(rho, dtype=np.int64))
    if n_rows is not None and idx.size == 1 and n_rows > 1:
        idx = np.full(n_rows, idx[0])
    return idx, idx < 0


def _values_grid(path):
    return np.atleast_2d(np.asarray(path.values, dtype=float)), path.grid


def _time_to_go(times, h):
    with np.errstate(invalid="ignore"):
        return np.sqrt(np.maximum(h - times, 0.0))


def closed_form_Z(spec, path) -> np.ndarray:
    """Closed-form ``Z`` on every node of ``path`` (shape of ``path.values``).

    Raises :class:`UnsupportedTimeError` for kinds without a closed form.
    """
    spec = parse_time(spec)
    v, grid = _values_grid(path)
    t = grid.times(v.shape[1])[None, :]
    kind = spec.kind
    if kind == "deterministic":
        Z = np.broadcast_to((t < grid.node(spec.param("t0")) * grid.dt - 1e-12) * 1.0, v.shape)
    elif kind in ("first_hit", "first_hit_capped"):
        a = spec.param("a")
        upto = None
        if kind == "first_hit_capped":
            upto = min(grid.node(spec.param("cap")), v.shape[1] - 1)
        T = first_hit_index(v, a, upto=upto)
        if kind == "first_hit_capped":
            T = np.where(T < 0, upto, T)
        T = np.where(T < 0, v.shape[1], T)
        Z = (np.arange(v.shape[1])[None, :] < T[:, None]) * 1.0
    elif kind in ("last_zero_before", "argmax_before"):
        h = spec.param("h")
        s = _time_to_go(t, h)
        x = np.abs(v) if kind == "last_zero_before" else np.maximum.accumulate(v, axis=1) - v
        before = t < h - 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            Z = np.where(before, 2 * ndtr(-x / np.where(before, s, 1.0)), 0.0)
    elif kind == "pseudo_williams":
        T = first_hit_index(v, 1.0)
        T = np.where(T < 0, v.shape[1], T)
        S = np.maximum.accumulate(v, axis=1)
        Z = np.where(np.arange(v.shape[1])[None, :] < T[:, None], 1.0 - np.minimum(S, 1.0), 0.0)
    else:
        raise UnsupportedTimeError(f"no closed-form Z for {spec.identifier}")
    Z = np.clip(np.array(Z, dtype=float), 0.0, 1.0)
    return Z[0] if np.ndim(path.values) == 1 else Z


def z_derivative(spec, path) -> np.ndarray:
    """``dF/dx`` at the left end of every step (one value per step).

    ``sign(0) = 0`` at the zero set, so the local-time part stays in ``A``.
    """
    spec = parse_time(spec)
    v, grid = _values_grid(path)
    t = grid.times(v.shape[1])[None, :-1]
    x = v[:, :-1]
    kind = spec.kind
    if kind in ("last_zero_before", "argmax_before"):
        h = spec.param("h")
        before = t < h - 1e-12
        s = np.where(before, _time_to_go(t, h), 1.0)
        if kind == "last_zero_before":
            d = -2 * np.sign(x) * _phi(x / s) / s
        else:
            gap = np.maximum.accumulate(v, axis=1)[:, :-1] - x
            d = 2 * _phi(gap / s) / s
        d = np.where(before, d, 0.0)
    elif kind in ("deterministic", "first_hit", "first_hit_capped", "pseudo_williams"):
        d = np.zeros_like(x)
    else:
        raise UnsupportedTimeError(f"no closed-form Z for {spec.identifier}")
    return d[0] if np.ndim(path.values) == 1 else d


@dataclass
class AzemaBundle:
    """``Z``, its martingale part ``mu``, increasing part ``A`` and ``<mu>``.

    Arrays have the shape of the driving path (1-D or path x node). ``I_rho``
    is filled when a realization is supplied; capped paths carry ``nan``.
    """

    Z: np.ndarray
    mu: np.ndarray | None
    A: np.ndarray | None
    qv_mu: np.ndarray | None
    I_rho: np.ndarray | float | None = None
    floored_steps: int = 0
    source: str = "closed_form"
    warning: str | None = None

    @property
    def d_mu(self) -> np.ndarray:
        return np.diff(self.mu, axis=-1)


def doob_meyer_split(spec, path, Z):
    """``(mu, A, qv_mu)`` with ``mu = Z_0 + sum dF/dx dB`` and ``A = mu - Z``."""
    dF = np.atleast_2d(z_derivative(spec, path))
    v = np.atleast_2d(np.asarray(path.values, dtype=float))
    Z2 = np.atleast_2d(Z)
    if Z2.shape != v.shape:
        raise AlignmentError(f"Z shape {Z2.shape} does not match path shape {v.shape}")
    mu = np.empty_like(v)
    mu[:, 0] = Z2[:, 0]
    mu[:, 1:] = Z2[:, :1] + np.cumsum(dF * np.diff(v, axis=1), axis=1)
    qv_mu = np.zeros_like(v)
    qv_mu[:, 1:] = np.cumsum(dF * dF * path.grid.dt, axis=1)
    A = mu - Z2
    if np.ndim(path.values) == 1:
        return mu[0], A[0], qv_mu[0]
    return mu, A, qv_mu


def infimum_I(Z, rho):
    """``min`` of ``Z`` over nodes before ``rho``; ``nan`` on capped paths.

    The node at ``rho`` itself is left out (left limit), so stopping times,
    whose ``Z`` jumps to 0 at ``rho``, get ``I = 1``; an empty range gives 1.
    """
    Z2 = np.atleast_2d(Z)
    idx, capped = rho_indices(rho, Z2.shape[0])
    nodes = np.arange(Z2.shape[1])[None, :]
    I = np.minimum(np.where(nodes < idx[:, None], Z2, np.inf).min(axis=1), 1.0)
    I = np.where(capped, np.nan, I)
    return float(I[0]) if np.ndim(Z) == 1 else I


def bmo_functional(bundle: AzemaBundle, rho, eps: float = EPSILON):
    """``J = sum_{k < rho} d<mu>_k / max(Z_k, eps)^2`` per path and the floored-step count."""
    Z = np.atleast_2d(bundle.Z)
    dq = np.diff(np.atleast_2d(bundle.qv_mu), axis=1)
    idx, capped = rho_indices(rho, Z.shape[0])
    live = np.arange(dq.shape[1])[None, :] < idx[:, None]
    z = Z[:, :-1]
    floored = live & (z < eps)
    J = np.where(live, dq / np.maximum(z, eps) ** 2, 0.0).sum(axis=1)
    J = np.where(capped, np.nan, J)
    return J, int(floored.sum())


def azema_bundle(spec, path, rho=None, ensemble_estimate=None, eps: float = EPSILON) -> AzemaBundle:
    """Closed-form bundle, or the binned empirical ``Z`` when no closed form exists.

    The empirical fallback needs ``ensemble_estimate`` (a :class:`ZEstimate`) and
    leaves ``mu``, ``A`` and ``qv_mu`` empty.
    """
    spec = parse_time(spec)
    try:
        Z = closed_form_Z(spec, path)
    except UnsupportedTimeError:
        if ensemble_estimate is None:
            raise
        msg = f"no closed-form Z for {spec.identifier}; using the binned empirical estimate"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        Z = ensemble_estimate.lookup(path.grid.times(np.shape(path.values)[-1]), path.values)
        I = infimum_I(Z, rho) if rho is not None else None
        return AzemaBundle(Z, None, None, None, I, 0, "empirical", msg)
    mu, A, qv_mu = doob_meyer_split(spec, path, Z)
    bundle = AzemaBundle(Z, mu, A, qv_mu)
    if rho is not None:
        bundle.I_rho = infimum_I(Z, rho)
        _, bundle.floored_steps = bmo_functional(bundle, rho, eps)
    return bundle


@dataclass
class ZEstimate:
    """Binned estimate of ``P(rho > t | t-bin, state-bin)``.

    Each time bin is sampled at the grid node nearest its centre. ``counts`` and
    ``survivors`` add across ensembles, so partial estimates merge with ``+``.
    """

    t_edges: np.ndarray
    state_edges: np.ndarray
    t_nodes: np.ndarray
    counts: np.ndarray
    survivors: np.ndarray

    @property
    def estimate(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.survivors / np.maximum(self.counts, 1), np.nan)

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    @property
    def standard_error(self) -> np.ndarray:
        p = self.estimate
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.sqrt(p * (1 - p) / self.counts)

    def __add__(self, other: "ZEstimate") -> "ZEstimate":
        if not (np.array_equal(self.t_edges, other.t_edges)
                and np.array_equal(self.state_edges, other.state_edges)):
            raise AlignmentError("cannot merge Z estimates with different binning")
        return ZEstimate(self.t_edges, self.state_edges, self.t_nodes,
                         self.counts + other.counts, self.survivors + other.survivors)

    def lookup(self, times, values) -> np.ndarray:
        """Estimate at ``(t, x)`` pairs; empty bins and out-of-range points give ``nan``."""
        times = np.broadcast_to(np.asarray(times, float), np.shape(values))
        ti = np.searchsorted(self.t_edges, times, side="right") - 1
        si = np.searchsorted(self.state_edges, values, side="right") - 1
        nt, ns = self.counts.shape
        ok = (ti >= 0) & (ti < nt) & (si >= 0) & (si < ns)
        est = self.estimate
        return np.where(ok, est[np.clip(ti, 0, nt - 1), np.clip(si, 0, ns - 1)], np.nan)

    def to_csv(self, path) -> None:
        """Rows ``t_bin, state_bin, t_lo, t_hi, state_lo, state_hi, count, estimate``."""
        est = self.estimate
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t_bin", "state_bin", "t_lo", "t_hi", "state_lo", "state_hi",
                        "count", "estimate"])
            for i in range(self.counts.shape[0]):
                for j in range(self.counts.shape[1]):
                    e = "" if self.counts[i, j] == 0 else repr(float(est[i, j]))
                    w.writerow([i, j, repr(float(self.t_edges[i])), repr(float(self.t_edges[i + 1])),
                                repr(float(self.state_edges[j])),
                                repr(float(self.state_edges[j + 1])),
                                int(self.counts[i, j]), e])


def zero_after_probability(values, dt: float) -> np.ndarray:
    """``P(path has a zero in (t_k, t_n] | grid values)`` under Brownian-bridge interpolation.

    A step with a sign change contains a zero; a step from ``x`` to ``y`` of the
    same sign crosses zero with probability ``exp(-2xy/dt)``.
    """
    v = np.atleast_2d(np.asarray(values, dtype=float))
    prod = v[:, :-1] * v[:, 1:]
    with np.errstate(over="ignore"):
        miss = np.where(prod <= 0, 0.0, -np.expm1(-2.0 * np.maximum(prod, 0.0) / dt))
    # survival of "no zero after node k" is the product of misses over later steps
    tail = np.cumprod(miss[:, ::-1], axis=1)[:, ::-1]
    out = np.zeros_like(v)
    out[:, :-1] = 1.0 - tail
    return out[0] if np.ndim(values) == 1 else out


def estimate_Z_empirical(ensemble, realizations, t_bins=20, state_bins=20,
                         state_range=(-2.0, 2.0), state=None, survival=None) -> ZEstimate:
    """Fraction of paths with ``rho > t`` per ``(t, state)`` bin.

    ``realizations`` is a :class:`RealizationSet` or an array of times (``inf``
    allowed). ``state`` optionally replaces the path values as binning variable.
    ``survival`` (paths x nodes) replaces the indicator ``1{rho > t_k}`` by a
    conditional probability, e.g. :func:`zero_after_probability`; ``realizations``
    is then ignored.
    """
    v = np.atleast_2d(np.asarray(ensemble.values if state is None else state, dtype=float))
    grid = ensemble.grid
    horizon = (v.shape[1] - 1) * grid.dt
    t_edges = np.linspace(0.0, horizon, t_bins + 1) if np.ndim(t_bins) == 0 else np.asarray(t_bins, float)
    s_edges = (np.linspace(state_range[0], state_range[1], state_bins + 1)
               if np.ndim(state_bins) == 0 else np.asarray(state_bins, float))
    if survival is not None:
        rho_t = None
    elif isinstance(realizations, RealizationSet):
        rho_t = np.where(realizations.capped, np.inf, realizations.rho_index * grid.dt)
    else:
        rho_t = np.asarray(realizations, dtype=float)
    nodes = np.array([grid.node(0.5 * (a + b)) for a, b in zip(t_edges[:-1], t_edges[1:])])
    nodes = np.clip(nodes, 0, v.shape[1] - 1)
    nt, ns = len(nodes), len(s_edges) - 1
    counts = np.zeros((nt, ns), np.int64)
    surv = np.zeros((nt, ns), np.int64 if survival is None else float)
    for i, k in enumerate(nodes):
        si = np.searchsorted(s_edges, v[:, k], side="right") - 1
        ok = (si >= 0) & (si < ns)
        counts[i] = np.bincount(si[ok], minlength=ns)
        if survival is None:
            alive = ok & (rho_t > k * grid.dt + 1e-12)
            surv[i] = np.bincount(si[alive], minlength=ns)
        else:
            w = np.atleast_2d(survival)[:, k]
            surv[i] = np.bincount(si[ok], weights=w[ok], minlength=ns)
    return ZEstimate(t_edges, s_edges, nodes, counts, surv)
