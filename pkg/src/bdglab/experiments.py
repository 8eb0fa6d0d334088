"""Batched Monte Carlo runs over catalog times.

Paths are simulated in fixed-size batches; each batch returns per-path arrays
that are concatenated in path order, so the results do not depend on how many
worker processes ran the batches (``BDGLAB_WORKERS``).
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from . import rng
from .azema import EPSILON, AzemaBundle, bmo_functional, closed_form_Z, doob_meyer_split, infimum_I
from .bdg_lab import sweep_functionals
from .enlargement import brownian_probe, decompose, standard_probe_family
from .errors import ConfigurationError
from .paths import (Ensemble, GridSpec, IntegrandSpec, brownian_values, quadratic_variation,
                    stochastic_integral)
from .random_times import (FirstPassageScan, RandomTimeSpec, argmax_index, first_hit_index,
                           last_zero_index, parse_time)

__all__ = [
    "worker_count",
    "map_batches",
    "batch_size_for",
    "Realized",
    "realize_batch",
    "simulate",
    "PROBE_TIMES",
    "terminal_values",
]

PROBE_TIMES = (0.25, 0.5, 0.75, 1.0)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("BDGLAB_WORKERS", "1")))
    except ValueError:
        return 1


def batch_size_for(grid: GridSpec, target_cells: int = 1 << 20) -> int:
    return int(max(1, min(1000, target_cells // (grid.n_steps + 1))))


def _concat(parts):
    # arrays are stacked in path order, counters summed, "*_max" entries maximized
    out = {}
    for key in parts[0]:
        vals = [p[key] for p in parts]
        if isinstance(vals[0], np.ndarray):
            out[key] = np.concatenate(vals)
        elif key.endswith("_max"):
            out[key] = float(max(vals))
        else:
            out[key] = sum(vals)
    return out


def map_batches(fn, n_paths: int, batch_size: int, workers: int | None = None):
    """Apply ``fn(path_ids)`` to consecutive id blocks and merge results in order."""
    workers = worker_count() if workers is None else workers
    blocks = [np.arange(s, min(s + batch_size, n_paths), dtype=np.int64)
              for s in range(0, n_paths, batch_size)]
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, blocks))
    else:
        parts = [fn(b) for b in blocks]
    return _concat(parts)


# --- realization of a catalog time on one batch ------------------------------------

@dataclass
class Realized:
    """One batch of paths with a realized time.

    ``H`` holds the nodes ``0..n`` of the fine grid; ``rho`` may point past ``n``
    for first-passage based times. ``rho_probe`` is ``rho ^ n`` wherever it is
    known from the scanned path.
    """

    spec: RandomTimeSpec
    grid: GridSpec
    ids: np.ndarray
    H: np.ndarray
    rho: np.ndarray
    capped: np.ndarray
    m_star: np.ndarray
    qv_rho: np.ndarray
    b_rho: np.ndarray
    factor: int = 0
    rho_probe: np.ndarray | None = None
    rho_probe_c: np.ndarray | None = None
    boundary: np.ndarray | None = None
    scans: tuple | None = None
    extended: bool = False
    info: dict = field(default_factory=dict)

    @property
    def coarse_grid(self) -> GridSpec:
        return self.grid.coarsen(self.factor)

    @property
    def Hc(self) -> np.ndarray:
        return self.H[:, ::self.factor]

    @property
    def on_horizon(self) -> bool:
        """Whether ``rho`` never exceeds the fine horizon."""
        return not self.extended


def _scan(grid, seed, ids, H, level, factor, cap_node, sign=1.0):
    nb, n = len(ids), grid.n_steps
    fine = FirstPassageScan(nb, n, level)
    fine.feed(H[:, 1:], 0)
    coarse = None
    if factor:
        coarse = FirstPassageScan(nb, n // factor, level)
        coarse.feed(H[:, factor::factor], 0)
    cur = H[:, -1].copy()
    n0 = n
    while n0 < cap_node:
        need = ~fine.hit if coarse is None else ~coarse.hit
        rows = np.flatnonzero(need)
        if rows.size == 0:
            break
        stop = min(n0 + grid.extension_chunk, cap_node)
        v = cur[rows, None] + sign * brownian_values(grid, seed, ids[rows], n0, stop, x0=0.0)
        cur[rows] = v[:, -1]
        fr = ~fine.hit[rows]
        fine.feed(v[fr], n0, rows[fr])
        if coarse is not None:
            cr = ~coarse.hit[rows]
            coarse.feed(v[cr][:, factor - 1::factor], n0 // factor, rows[cr])
        n0 = stop
    return fine, coarse


def _cap_node(grid, factor, node=None):
    node = grid.cap_steps if node is None else min(node, grid.cap_steps)
    return (node // factor) * factor if factor else node


def realize_batch(spec, grid: GridSpec, seed: int, ids, factor: int = 0) -> Realized:
    """Simulate the batch ``ids`` and realize ``spec`` on it.

    ``factor`` > 0 also realizes the time on the nested grid with ``factor``
    times fewer steps (same paths), for extrapolation in ``sqrt(dt)``.
    """
    spec = parse_time(spec).validate(grid)
    ids = np.asarray(ids, dtype=np.int64)
    if factor and (grid.n_steps % factor or grid.extension_chunk % factor):
        raise ConfigurationError(f"refinement factor {factor} does not divide the grid")
    n = grid.n_steps
    H = brownian_values(grid, seed, ids)
    nb = len(ids)
    rows = np.arange(nb)
    kind = spec.kind
    gc = grid.coarsen(factor) if factor else None

    if kind in ("first_hit", "first_hit_capped", "pseudo_williams"):
        level = 1.0 if kind == "pseudo_williams" else spec.param("a")
        limit = None
        if kind == "first_hit_capped":
            limit = grid.node(spec.param("cap"))
        if level == 0 or (limit is not None and limit <= n):
            return _realize_on_horizon(spec, grid, ids, H, factor)
        sign = 1.0 if level > 0 else -1.0
        Hs = sign * H
        cap_node = _cap_node(grid, factor, limit)
        fine, coarse = _scan(grid, seed, ids, Hs, abs(level), factor, cap_node, sign)
        if kind == "pseudo_williams":
            capped = ~fine.hit
            rho = np.where(capped, -1, fine.m_idx)
            m_star = np.maximum(fine.m_val, -fine.m_min)
            r = Realized(spec, grid, ids, H, rho, capped, np.where(capped, np.nan, m_star),
                         np.where(capped, np.nan, fine.m_qv), np.where(capped, np.nan, fine.m_val),
                         factor, scans=(fine, coarse), extended=True)
            r.info["coarse_capped"] = int((~coarse.hit).sum()) if coarse is not None else 0
            return r
        hit = fine.hit
        m_hit = np.maximum(fine.hit_val, -fine.hit_min)
        if kind == "first_hit_capped":
            capped = np.zeros(nb, bool)
            rho = np.where(hit, fine.hit_idx, fine.end_node)
            m_star = np.where(hit, m_hit, np.maximum(fine.run_max, -fine.run_min))
            qv = np.where(hit, fine.hit_qv, fine.qv)
            b = sign * np.where(hit, fine.hit_val, fine.x)
        else:
            capped = ~hit
            rho = np.where(hit, fine.hit_idx, -1)
            m_star = np.where(hit, m_hit, np.nan)
            qv = np.where(hit, fine.hit_qv, np.nan)
            b = np.where(hit, sign * fine.hit_val, np.nan)
        r = Realized(spec, grid, ids, H, rho, capped, m_star, qv, b, factor, extended=True)
        r.info["cap_m_star"] = np.maximum(fine.run_max, -fine.run_min)
        r.info["cap_qv"] = fine.qv.copy()
        r.rho_probe = np.where(hit, np.minimum(fine.hit_idx, n), n)
        if coarse is not None:
            nc = gc.n_steps
            r.rho_probe_c = np.where(coarse.hit, np.minimum(coarse.hit_idx, nc), nc)
        return r
    return _realize_on_horizon(spec, grid, ids, H, factor)


def _index_kernel(spec, v, grid):
    kind = spec.kind
    if kind == "deterministic":
        return np.full(v.shape[0], grid.node(spec.param("t0"))), None
    if kind in ("first_hit", "first_hit_capped", "pseudo_williams"):
        level = 1.0 if kind == "pseudo_williams" else spec.param("a")
        upto = v.shape[1] - 1
        if kind == "first_hit_capped":
            upto = min(grid.node(spec.param("cap")), upto)
        idx = first_hit_index(v, level, upto=upto)
        return np.where(idx < 0, upto, idx), None
    if kind == "last_zero_before":
        idx = last_zero_index(v, grid.node(spec.param("h")))
        return idx, idx == 0
    if kind == "argmax_before":
        idx = argmax_index(v, grid.node(spec.param("h")))
        return idx, idx == 0
    if kind == "indicator":
        n1 = grid.node(1.0)
        return np.where(np.abs(v[:, n1]) > spec.param("K"), n1, 0), None
    raise ConfigurationError(f"cannot realize {spec.identifier}")


def _realize_on_horizon(spec, grid, ids, H, factor):
    rows = np.arange(len(ids))
    rho, boundary = _index_kernel(spec, H, grid)
    capped = np.zeros(len(ids), bool)
    if spec.kind in ("first_hit", "pseudo_williams"):
        # only reached for level 0, where the time is 0 on every path
        rho = np.zeros(len(ids), np.int64)
    m_star = np.maximum.accumulate(np.abs(H), axis=1)[rows, rho]
    qv = quadratic_variation(H)[rows, rho]
    r = Realized(spec, grid, ids, H, rho, capped, m_star, qv, H[rows, rho], factor,
                 rho_probe=rho, boundary=boundary)
    if factor:
        gc = grid.coarsen(factor)
        rc, _ = _index_kernel(spec, H[:, ::factor], gc)
        r.rho_probe_c = np.zeros(len(ids), np.int64) if spec.kind in (
            "first_hit", "pseudo_williams") else rc
    return r


# --- per-batch tasks ------------------------------------------------------------

def _probe_values(r: Realized, probe, coarse: bool):
    v = r.Hc if coarse else r.H
    g = r.coarse_grid if coarse else r.grid
    thr = probe.freeze_index(v, g)
    if r.scans is not None:
        scan = r.scans[1] if coarse else r.scans[0]
        idx, w = scan.stopped_index_law(v, thr)
        return sum(w[k] * probe.value_at(v, g, idx[k]) for k in range(3))
    rho = r.rho_probe_c if coarse else r.rho_probe
    return probe.value_at(v, g, np.minimum(rho, thr))


def _sampled_rho_horizon(r: Realized, seed: int):
    """``rho ^ n`` per path; on capped pseudo-stopping paths drawn from its conditional law."""
    n = r.grid.n_steps
    if r.scans is None:
        return np.minimum(r.rho_probe, n)
    idx, w = r.scans[0].stopped_index_law(r.H, n)
    u = np.array([rng.path_generator(seed, int(p), "completion").random() for p in r.ids])
    cum = np.cumsum(w, axis=0)
    cat = (u[None, :] >= cum[:2]).sum(axis=0)
    return idx[cat, np.arange(len(r.ids))]


def _truncated(r: Realized):
    """``(M*, <B>)`` at ``rho ^ C`` as a per-path law over three outcomes, ``C`` the cap."""
    if r.scans is not None:
        m_star, qv, _, w = r.scans[0].truncated_functionals()
        return m_star, qv, w
    nb = len(r.ids)
    ms = np.where(r.capped, r.info.get("cap_m_star", np.nan), r.m_star)
    qv = np.where(r.capped, r.info.get("cap_qv", np.nan), r.qv_rho)
    zero = np.zeros(nb)
    w = np.stack([np.ones(nb), zero, zero], axis=1)
    return np.stack([ms, zero, zero], axis=1), np.stack([qv, zero, zero], axis=1), w


def _closed_form(r: Realized):
    ens = Ensemble.from_values(r.grid, r.H, seed=None, path_ids=r.ids)
    Z = closed_form_Z(r.spec, ens)
    return ens, Z


def _has_closed_form_on_horizon(r: Realized) -> bool:
    return r.spec.kind != "indicator" and r.on_horizon


def _poisson_at(grid, seed, ids, rho, lam):
    m_star = np.full(len(ids), np.nan)
    br = np.full(len(ids), np.nan)
    mean = lam * grid.dt
    for i, (pid, k) in enumerate(zip(ids, rho)):
        if k < 0:
            continue
        inc = rng.poisson_blocks(seed, [pid], 0, int(k), grid.extension_chunk, mean)[0]
        counts = np.concatenate([[0.0], np.cumsum(inc)])
        M = counts - lam * grid.dt * np.arange(k + 1)
        m_star[i] = np.abs(M).max()
        br[i] = counts[-1]
    return m_star, br


def _batch(ids, spec, grid, seed, tasks, factor, eps):
    r = realize_batch(spec, grid, seed, ids, factor)
    n = grid.n_steps
    out = {
        "path_id": r.ids,
        "rho_index": r.rho,
        "capped": r.capped,
        "m_star": r.m_star,
        "qv_at_rho": r.qv_rho,
        "b_rho": r.b_rho,
        "boundary": r.boundary if r.boundary is not None else np.zeros(len(ids), bool),
        "coarse_capped": int(r.info.get("coarse_capped", 0)),
    }
    out["trunc_m_star"], out["trunc_qv"], out["trunc_w"] = _truncated(r)
    closed = _has_closed_form_on_horizon(r)
    need_z = closed and any(t in tasks for t in ("azema", "decomposition", "sweep", "doob_meyer"))
    if need_z:
        ens, Z = _closed_form(r)
    # I_rho and J
    if "azema" in tasks:
        if r.spec.kind == "pseudo_williams":
            out["i_rho"] = 1.0 - r.b_rho
            out["j_bmo"] = np.where(r.capped, np.nan, 0.0)
            out["floored_steps"] = 0
        elif r.spec.is_stopping_time:
            out["i_rho"] = np.where(r.capped, np.nan, 1.0)
            out["j_bmo"] = np.where(r.capped, np.nan, 0.0)
            out["floored_steps"] = 0
        elif closed:
            out["i_rho"] = infimum_I(Z, r.rho)
            if tasks["azema"].get("bmo", True):
                mu, A, qv_mu = doob_meyer_split(r.spec, ens, Z)
                J, fl = bmo_functional(AzemaBundle(Z, mu, A, qv_mu), r.rho, eps)
                out["j_bmo"] = J
                out["floored_steps"] = fl
                out["integrated_steps"] = int(np.sum(r.rho))
            else:
                out["j_bmo"] = np.full(len(ids), np.nan)
                out["floored_steps"] = 0
        else:
            out["i_rho"] = np.full(len(ids), np.nan)
            out["j_bmo"] = np.full(len(ids), np.nan)
            out["floored_steps"] = 0
    if "doob_meyer" in tasks and closed:
        mu, A, _ = doob_meyer_split(r.spec, ens, Z)
        tol = tasks["doob_meyer"].get("tolerance", 1e-2)
        dA = np.diff(A, axis=1)
        out["a_final"] = A[:, -1]
        out["a_negative_steps"] = int((dA < -tol).sum())
        out["a_steps"] = int(dA.size)
    if "williams_mean" in tasks and r.scans is not None:
        out["b_rho_completed"] = r.scans[0].completed_value_at_rho()
        if factor:
            out["b_rho_completed_c"] = r.scans[1].completed_value_at_rho()
    if "probes" in tasks:
        family = standard_probe_family(**tasks["probes"].get("family", {}))
        if tasks["probes"].get("unbounded", False):
            family.append(brownian_probe())
        for probe in family:
            out["probe_" + probe.name] = _probe_values(r, probe, False)
            if factor:
                out["probe_c_" + probe.name] = _probe_values(r, probe, True)
            if r.scans is not None:
                # uncapped-only estimate, ignoring capped paths
                raw = probe.stopped_value(r.H, grid, np.where(r.capped, 0, r.rho))
                out["probe_u_" + probe.name] = np.where(r.capped, np.nan, raw)
    if "martingale" in tasks:
        times = tasks["martingale"].get("times", PROBE_TIMES)
        nodes = np.array([grid.node(t) for t in times])
        rho_h = _sampled_rho_horizon(r, seed)
        stop = np.minimum(nodes[None, :], rho_h[:, None])
        out["mt_stopped"] = np.take_along_axis(r.H, stop, axis=1)
    if "decomposition" in tasks and closed:
        cfg = tasks["decomposition"]
        times = cfg.get("times", PROBE_TIMES)
        nodes = np.array([grid.node(t) for t in times])
        mu, A, qv_mu = doob_meyer_split(r.spec, ens, Z)
        bundle = AzemaBundle(Z, mu, A, qv_mu)
        dec_b = decompose(ens, bundle, r.rho, eps)
        adv = stochastic_integral(IntegrandSpec.function_of_Z(cfg.get("alpha", 1.0),
                                                              cfg.get("c", 1e-2)), ens, aux=Z)
        dec_a = decompose(adv, bundle, r.rho, eps)
        out["dec_b_stopped"] = dec_b.stopped.values[:, nodes]
        out["dec_b_tilde"] = dec_b.m_tilde[:, nodes]
        out["dec_adv_stopped"] = dec_a.stopped.values[:, nodes]
        out["dec_adv_tilde"] = dec_a.m_tilde[:, nodes]
        err = max(np.abs(dec_b.stopped.values - (dec_b.m_tilde + dec_b.drift)).max(),
                  np.abs(dec_a.stopped.values - (dec_a.m_tilde + dec_a.drift)).max())
        out["dec_identity_max"] = float(err)
        out["dec_floored_steps"] = dec_b.floored_steps + dec_a.floored_steps
        after = np.arange(n + 1)[None, :] >= r.rho[:, None]
        const = np.where(after, dec_a.drift - dec_a.drift[np.arange(len(ids)), r.rho][:, None], 0)
        out["dec_drift_after_max"] = float(np.abs(const).max())
    if "sweep" in tasks:
        cfg = tasks["sweep"]
        cs = cfg["c_values"]
        if closed:
            res = sweep_functionals(r.H, Z, r.rho, cfg["alpha"], cs)
            for j, c in enumerate(cs):
                out[f"sweep_num_{j}"] = res[c][0]
                out[f"sweep_den_{j}"] = res[c][1]
    if "poisson" in tasks:
        lam = tasks["poisson"]["lam"]
        ms, br = _poisson_at(grid, seed, r.ids, np.where(r.capped, -1, r.rho), lam)
        out["poisson_m_star"] = ms
        out["poisson_bracket"] = br
    return out


def simulate(spec, grid: GridSpec, seed: int, n_paths: int, tasks=None, factor: int = 0,
             eps: float = EPSILON, workers: int | None = None, batch_size: int | None = None):
    """Realize ``spec`` on ``n_paths`` paths and run ``tasks`` on every batch.

    ``tasks`` maps task names (``azema``, ``doob_meyer``, ``probes``,
    ``martingale``, ``decomposition``, ``sweep``, ``poisson``) to option dicts.
    Returns a dict of per-path arrays and merged counters.
    """
    tasks = dict(tasks or {})
    spec = parse_time(spec).validate(grid)
    fn = partial(_batch, spec=spec, grid=grid, seed=seed, tasks=tasks, factor=factor, eps=eps)
    return map_batches(fn, n_paths, batch_size or batch_size_for(grid), workers)


def _terminal(ids, grid, seed):
    return {"b1": brownian_values(grid, seed, ids)[:, grid.node(1.0)]}


def terminal_values(grid: GridSpec, seed: int, n_paths: int, workers: int | None = None):
    """``B_1`` for ``n_paths`` paths of ``grid``."""
    fn = partial(_terminal, grid=grid, seed=seed)
    return map_batches(fn, n_paths, max(batch_size_for(grid), 1000), workers)["b1"]
