"""Random times realized pathwise on a grid.

The catalog holds stopping times (``deterministic``, ``first_hit``,
``first_hit_capped``), the pseudo-stopping time built from the first passage
at level 1 (``pseudo_williams``), two ends of predictable sets
(``last_zero_before``, ``argmax_before``) and the indicator time of the
Brownian counterexample.

Conventions:

* a zero lies in the step ``[k, k+1]`` when ``v_k * v_{k+1} <= 0``; the node
  reported for it is ``k``;
* argmax ties go to the earliest node;
* a first passage at ``a`` is the first node at or beyond ``a``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, UnsupportedTimeError
from .paths import Ensemble, GridSpec, PathBundle

__all__ = [
    "RandomTimeSpec",
    "TimeRealization",
    "RealizationSet",
    "CATALOG",
    "catalog_entries",
    "parse_time",
    "realize",
    "realize_stopping_time",
    "realize_pseudo_stopping_time",
    "realize_honest_time",
    "indicator_time",
    "first_hit_index",
    "last_zero_index",
    "argmax_index",
    "williams_indices",
    "FirstPassageScan",
]

# kind -> (parameter names, category)
_KINDS = {
    "deterministic": (("t0",), "stopping"),
    "first_hit": (("a",), "stopping"),
    "first_hit_capped": (("a", "cap"), "stopping"),
    "pseudo_williams": ((), "pseudo"),
    "last_zero_before": (("h",), "honest"),
    "argmax_before": (("h",), "honest"),
    "indicator": (("K",), "indicator"),
}

_CA_NOTES = {
    "stopping": "stopping time; BDG classical",
    "pseudo": "pseudo-stopping time; avoids stopping times (CA)",
    "honest": "end of a predictable set; avoids stopping times (CA)",
    "indicator": "indicator of an F_1 event; not adapted, violates avoidance",
}


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class RandomTimeSpec:
    kind: str
    params: tuple = ()
    description: str = ""

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigurationError(
                f"unknown random time kind {self.kind!r}; valid kinds: {sorted(_KINDS)}")
        names = _KINDS[self.kind][0]
        if len(self.params) != len(names):
            raise ConfigurationError(
                f"{self.kind} takes {len(names)} parameter(s) {names}, got {self.params}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    @property
    def category(self) -> str:
        return _KINDS[self.kind][1]

    @property
    def is_stopping_time(self) -> bool:
        return self.category == "stopping"

    @property
    def identifier(self) -> str:
        return ":".join([self.kind] + [_fmt(p) for p in self.params])

    def param(self, name: str) -> float:
        return self.params[_KINDS[self.kind][0].index(name)]

    def needs_extension(self) -> bool:
        return self.kind in ("first_hit", "pseudo_williams")

    def validate(self, grid: GridSpec) -> "RandomTimeSpec":
        """Check parameters against ``grid``; raises :class:`ConfigurationError`."""
        if self.kind in ("last_zero_before", "argmax_before"):
            h = self.param("h")
            if not 0 < h <= grid.horizon:
                raise ConfigurationError(
                    f"{self.identifier}: h = {h} violates the grid horizon {grid.horizon}")
        elif self.kind == "deterministic":
            t0 = self.param("t0")
            if not 0 <= t0 <= grid.horizon:
                raise ConfigurationError(
                    f"{self.identifier}: t0 = {t0} outside the grid horizon {grid.horizon}")
        elif self.kind == "indicator" and grid.horizon < 1.0:
            raise ConfigurationError(f"{self.identifier}: indicator time needs horizon >= 1")
        elif self.kind == "first_hit_capped" and self.param("cap") <= 0:
            raise ConfigurationError(f"{self.identifier}: cap must be positive")
        return self

    def __str__(self):
        return self.identifier


def parse_time(identifier: str) -> RandomTimeSpec:
    """Parse ``kind[:p1[:p2]]`` into a :class:`RandomTimeSpec`."""
    if isinstance(identifier, RandomTimeSpec):
        return identifier
    parts = str(identifier).strip().split(":")
    kind = parts[0]
    if kind not in _KINDS:
        valid = ", ".join(e.identifier for e in CATALOG)
        raise ConfigurationError(
            f"unknown catalog identifier {identifier!r}; valid identifiers include: {valid}")
    try:
        params = tuple(float(p) for p in parts[1:])
    except ValueError:
        raise ConfigurationError(f"non-numeric parameter in {identifier!r}") from None
    return RandomTimeSpec(kind, params)


CATALOG = tuple(sorted(
    (
        RandomTimeSpec("argmax_before", (1.0,), "node of the maximum of B on [0, h]"),
        RandomTimeSpec("deterministic", (0.5,), "fixed time"),
        RandomTimeSpec("deterministic", (1.0,), "fixed time"),
        RandomTimeSpec("first_hit", (1.0,), "first passage of B at a"),
        RandomTimeSpec("first_hit_capped", (1.0, 4.0), "first passage at a, stopped at cap"),
        RandomTimeSpec("indicator", (1.0,), "1 if |B_1| > K else 0"),
        RandomTimeSpec("last_zero_before", (1.0,), "last zero of B before h"),
        RandomTimeSpec("pseudo_williams", (), "argmax of B before its last zero preceding T_1"),
    ),
    key=lambda s: s.identifier,
))


def catalog_entries():
    """Rows ``(identifier, category, note)`` in alphabetical order."""
    return [(s.identifier, s.category, _CA_NOTES[s.category]) for s in CATALOG]


@dataclass
class TimeRealization:
    """Value of a random time on one path, as a grid node."""

    rho_index: int | None
    rho_time: float | None
    capped: bool
    kind: str
    boundary: bool = False
    extra: dict = field(default_factory=dict)


@dataclass
class RealizationSet:
    """Realizations for an ensemble; ``rho_index`` is -1 on capped paths."""

    rho_index: np.ndarray
    capped: np.ndarray
    kind: str
    dt: float
    boundary: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rho_index = np.asarray(self.rho_index, dtype=np.int64)
        self.capped = np.asarray(self.capped, dtype=bool)
        if self.boundary is None:
            self.boundary = np.zeros_like(self.capped)
        self.rho_index = np.where(self.capped, -1, self.rho_index)

    def __len__(self):
        return self.rho_index.size

    @property
    def rho_time(self) -> np.ndarray:
        return np.where(self.capped, np.nan, self.rho_index * self.dt)

    @property
    def n_capped(self) -> int:
        return int(self.capped.sum())

    def __getitem__(self, i) -> TimeRealization:
        if self.capped[i]:
            return TimeRealization(None, None, True, self.kind, bool(self.boundary[i]))
        extra = {k: v[i] for k, v in self.extra.items()}
        return TimeRealization(int(self.rho_index[i]), float(self.rho_index[i] * self.dt),
                               False, self.kind, bool(self.boundary[i]), extra)


# --- index kernels on 2-D arrays (path, node) ---------------------------------

def first_hit_index(values, level: float, upto=None):
    """First node at or beyond ``level`` (direction set by the start value); -1 if none."""
    v = np.atleast_2d(values)
    start = v[:, :1]
    up = level >= start
    reached = np.where(up, v >= level, v <= level)
    if upto is not None:
        reached = reached & (np.arange(v.shape[1])[None, :] <= np.asarray(upto).reshape(-1, 1))
    idx = reached.argmax(axis=1)
    return np.where(reached.any(axis=1), idx, -1)


def last_zero_index(values, upto):
    """Largest ``k`` with a zero in ``[k, k+1]`` and ``k + 1 <= upto``."""
    v = np.atleast_2d(values)
    upto = np.broadcast_to(np.asarray(upto), (v.shape[0],))
    z = v[:, :-1] * v[:, 1:] <= 0
    z &= np.arange(v.shape[1] - 1)[None, :] < upto[:, None]
    last = z.shape[1] - 1 - z[:, ::-1].argmax(axis=1)
    return np.where(z.any(axis=1), last, 0)


def argmax_index(values, upto):
    """Earliest node of the maximum over nodes ``0..upto``."""
    v = np.atleast_2d(values)
    upto = np.broadcast_to(np.asarray(upto), (v.shape[0],))
    masked = np.where(np.arange(v.shape[1])[None, :] <= upto[:, None], v, -np.inf)
    return masked.argmax(axis=1)


def williams_indices(values, level: float = 1.0):
    """``(rho, sigma, hit)`` node indices of the pseudo-stopping construction.

    ``hit`` is the first node at or above ``level`` (-1 if the path never gets
    there), ``sigma`` the last zero before it and ``rho`` the earliest argmax
    of the path over ``[0, sigma]``.
    """
    v = np.atleast_2d(values)
    hit = first_hit_index(v, level)
    lim = np.where(hit >= 0, hit, v.shape[1] - 1)
    sigma = last_zero_index(v, lim)
    rho = argmax_index(v, sigma)
    return rho, sigma, hit


# --- realization operations -----------------------------------------------------

def _as2d(path):
    values = np.atleast_2d(np.asarray(path.values, dtype=float))
    return values, path.grid


def _wrap(path, rs: RealizationSet):
    return rs[0] if isinstance(path, PathBundle) else rs


def realize_stopping_time(spec: RandomTimeSpec, path):
    """Stopping-time realizations on a path or an ensemble."""
    spec = parse_time(spec)
    if not spec.is_stopping_time:
        raise UnsupportedTimeError(f"{spec.identifier} is not a stopping time")
    v, grid = _as2d(path)
    last = v.shape[1] - 1
    if spec.kind == "deterministic":
        node = grid.node(spec.param("t0"))
        capped = np.full(v.shape[0], node > last)
        idx = np.full(v.shape[0], min(node, last))
    elif spec.kind == "first_hit":
        idx = first_hit_index(v, spec.param("a"))
        capped = idx < 0
    else:
        cap_node = min(grid.node(min(spec.param("cap"), grid.hard_cap)), last)
        idx = first_hit_index(v, spec.param("a"), upto=cap_node)
        idx = np.where(idx < 0, cap_node, idx)
        capped = np.zeros(v.shape[0], bool)
    return _wrap(path, RealizationSet(idx, capped, spec.kind, grid.dt))


def realize_pseudo_stopping_time(path):
    """The pseudo-stopping time ``rho`` built from the first passage at 1.

    With ``T_1`` the first passage at 1 and ``sigma`` the last zero before it,
    ``rho`` is the node of the maximum of the path over ``[0, sigma]``. The path
    must already be run until ``T_1`` (see :func:`bdglab.paths.extend_until_hit`);
    paths that never reach 1 are capped.
    """
    v, grid = _as2d(path)
    rho, sigma, hit = williams_indices(v)
    rs = RealizationSet(rho, hit < 0, "pseudo_williams", grid.dt,
                        extra={"sigma_index": sigma, "hit_index": hit})
    return _wrap(path, rs)


def realize_honest_time(spec: RandomTimeSpec, path):
    """``last_zero_before(h)`` or ``argmax_before(h)``.

    A path without a zero in ``(0, h]`` gets the initial zero, flagged as a
    boundary case.
    """
    spec = parse_time(spec)
    v, grid = _as2d(path)
    if spec.kind not in ("last_zero_before", "argmax_before"):
        raise UnsupportedTimeError(f"{spec.identifier} is not an honest catalog time")
    hn = grid.node(spec.param("h"))
    if hn > v.shape[1] - 1:
        raise ConfigurationError(f"{spec.identifier}: path too short for h")
    if spec.kind == "last_zero_before":
        idx = last_zero_index(v, hn)
        boundary = idx == 0
    else:
        idx = argmax_index(v, hn)
        boundary = idx == 0
    return _wrap(path, RealizationSet(idx, np.zeros(v.shape[0], bool), spec.kind, grid.dt,
                                      boundary=boundary))


def indicator_time(K: float, path):
    """``rho = 1`` on ``{|B_1| > K}`` and ``rho = 0`` otherwise."""
    v, grid = _as2d(path)
    n1 = grid.node(1.0)
    if n1 > v.shape[1] - 1:
        raise ConfigurationError("indicator time needs the path on [0, 1]")
    event = np.abs(v[:, n1]) > K
    return _wrap(path, RealizationSet(np.where(event, n1, 0), np.zeros(v.shape[0], bool),
                                      "indicator", grid.dt))


def realize(spec, path):
    """Dispatch on the catalog kind."""
    spec = parse_time(spec)
    if spec.is_stopping_time:
        return realize_stopping_time(spec, path)
    if spec.kind == "pseudo_williams":
        return realize_pseudo_stopping_time(path)
    if spec.kind == "indicator":
        return indicator_time(spec.param("K"), path)
    return realize_honest_time(spec, path)


# --- streaming first-passage scan ---------------------------------------------------

_NEG = -np.inf


def _masked_max(v, mask):
    m = np.where(mask, v, _NEG)
    return m.max(axis=1), m.argmax(axis=1)


class FirstPassageScan:
    """Block-by-block scan of Brownian nodes until ``level`` is first reached.

    Tracks, per row, the quantities the pseudo-stopping time and first-passage
    stopping times need without holding the whole path: the argmax over
    ``[0, last zero]`` (confirmed) and over ``(last zero, now]`` (pending), the
    running minimum and quadratic variation at those nodes, and the maxima of
    the post-horizon nodes split at the last post-horizon zero.
    """

    def __init__(self, n_rows: int, horizon_node: int, level: float = 1.0):
        self.level = float(level)
        self.horizon_node = int(horizon_node)
        z = np.zeros(n_rows)
        self.x = z.copy()
        self.end_node = np.zeros(n_rows, np.int64)
        self.run_min = z.copy()
        self.run_max = z.copy()
        self.qv = z.copy()
        self.hit = np.zeros(n_rows, bool)
        self.hit_idx = np.full(n_rows, -1, np.int64)
        self.hit_val = z.copy()
        self.hit_min = z.copy()
        self.hit_qv = z.copy()
        self.m_val = z.copy()
        self.m_idx = np.zeros(n_rows, np.int64)
        self.m_min = z.copy()
        self.m_qv = z.copy()
        self.p_val = np.full(n_rows, _NEG)
        self.p_idx = np.zeros(n_rows, np.int64)
        self.p_min = z.copy()
        self.p_qv = z.copy()
        self.z_last = np.zeros(n_rows, np.int64)
        self.ext_zero = np.zeros(n_rows, bool)
        self.ext_conf = np.full(n_rows, _NEG)
        self.ext_pend = np.full(n_rows, _NEG)

    @property
    def active(self) -> np.ndarray:
        return ~self.hit

    def feed(self, v, n0: int, rows=None):
        """Consume node values ``v[:, j]`` at nodes ``n0 + 1 + j`` for ``rows``."""
        rows = np.arange(self.x.size) if rows is None else np.asarray(rows)
        if rows.size == 0:
            return
        na, K = v.shape
        x0 = self.x[rows]
        prev = np.empty_like(v)
        prev[:, 0] = x0
        prev[:, 1:] = v[:, :-1]
        cq = self.qv[rows, None] + np.cumsum((v - prev) ** 2, axis=1)
        cmin = np.minimum.accumulate(np.minimum(v, self.run_min[rows, None]), axis=1)
        cmax = np.maximum.accumulate(np.maximum(v, self.run_max[rows, None]), axis=1)
        cols = np.arange(K)[None, :]
        r = np.arange(na)

        reached = v >= self.level
        anyhit = reached.any(axis=1)
        h = np.where(anyhit, reached.argmax(axis=1), K - 1)
        zero = (prev * v <= 0) & (cols <= h[:, None])
        anyz = zero.any(axis=1)
        cs = np.where(anyz, K - 1 - zero[:, ::-1].argmax(axis=1), -1)

        # nodes n0+1 .. n0+cs (cols < cs) close the pending segment
        bv, bi = _masked_max(v, cols < cs[:, None])
        cand_v = np.where(anyz, self.p_val[rows], _NEG)
        cand_i, cand_min, cand_qv = self.p_idx[rows], self.p_min[rows], self.p_qv[rows]
        take = bv > cand_v
        bi_c = np.minimum(bi, K - 1)
        cand_v = np.where(take, bv, cand_v)
        cand_i = np.where(take, bi + n0 + 1, cand_i)
        cand_min = np.where(take, cmin[r, bi_c], cand_min)
        cand_qv = np.where(take, cq[r, bi_c], cand_qv)
        upd = anyz & (cand_v > self.m_val[rows])
        self.m_val[rows] = np.where(upd, cand_v, self.m_val[rows])
        self.m_idx[rows] = np.where(upd, cand_i, self.m_idx[rows])
        self.m_min[rows] = np.where(upd, cand_min, self.m_min[rows])
        self.m_qv[rows] = np.where(upd, cand_qv, self.m_qv[rows])

        lo = np.where(anyz, cs, 0)
        pv, pi = _masked_max(v, (cols >= lo[:, None]) & (cols <= h[:, None]))
        base = np.where(anyz, _NEG, self.p_val[rows])
        take = pv > base
        self.p_val[rows] = np.where(take, pv, base)
        self.p_idx[rows] = np.where(take, pi + n0 + 1, self.p_idx[rows])
        self.p_min[rows] = np.where(take, cmin[r, pi], self.p_min[rows])
        self.p_qv[rows] = np.where(take, cq[r, pi], self.p_qv[rows])

        if n0 >= self.horizon_node:
            self.ext_conf[rows] = np.where(
                anyz, np.maximum(np.maximum(self.ext_conf[rows], self.ext_pend[rows]), bv),
                self.ext_conf[rows])
            self.ext_pend[rows] = np.where(anyz, pv, np.maximum(self.ext_pend[rows], pv))
            self.ext_zero[rows] |= anyz
        self.z_last[rows] = np.where(anyz, cs + n0, self.z_last[rows])

        hr = rows[anyhit]
        hh = h[anyhit]
        self.hit[hr] = True
        self.hit_idx[hr] = hh + n0 + 1
        self.hit_val[hr] = v[anyhit, hh]
        self.hit_min[hr] = cmin[anyhit, hh]
        self.hit_qv[hr] = cq[anyhit, hh]

        self.x[rows] = np.where(anyhit, v[r, h], v[:, -1])
        self.run_min[rows] = cmin[r, h]
        self.run_max[rows] = cmax[r, h]
        self.qv[rows] = cq[r, h]
        self.end_node[rows] = n0 + 1 + h

    # -- pseudo-stopping time --------------------------------------------------

    @property
    def capped(self) -> np.ndarray:
        return ~self.hit

    def pseudo_realization(self, dt: float) -> RealizationSet:
        return RealizationSet(self.m_idx, self.capped, "pseudo_williams", dt,
                              extra={"sigma_index": self.z_last.copy(),
                                     "hit_index": self.hit_idx.copy()})

    def completed_value_at_rho(self) -> np.ndarray:
        """``E[B_rho | scanned path]`` for the pseudo-stopping time.

        Exact on paths that reached the level. On a capped path at ``x`` the
        future hits 1 before 0 with probability ``x+`` (then ``B_rho`` is the
        confirmed maximum); otherwise a fresh start from 0 contributes an
        independent U(0, 1) maximum, so ``B_rho = max(c, U)`` with ``c`` the
        largest value seen so far.
        """
        xp = np.maximum(self.x, 0.0)
        c = np.maximum(self.m_val, np.maximum(self.p_val, 0.0))
        completed = xp * self.m_val + (1 - xp) * 0.5 * (1 + c * c)
        return np.where(self.hit, self.m_val, completed)

    def truncated_functionals(self):
        """Law of ``(M*, <B>)`` at ``rho ^ C`` for the pseudo-stopping time, ``C`` the cap node.

        ``rho ^ C`` is itself a pseudo-stopping time. Paths that reached the
        level carry their exact values with weight 1. On a capped path at ``x``
        the time is the confirmed argmax (the future hits 1 before 0, probability
        ``x+``), the cap node (a fresh start from 0 sets a new maximum, probability
        ``(1 - x+)(1 - c)``), or the argmax seen so far (the rest), ``c`` being
        the largest value seen.

        Returns ``(m_star, qv, value, weights)``, each of shape ``(n_rows, 3)``;
        ``value`` is ``B`` at the outcome.
        """
        xp = np.clip(self.x, 0.0, 1.0)
        c = np.clip(np.maximum(self.m_val, np.maximum(self.p_val, 0.0)), 0.0, 1.0)
        ms_m = np.maximum(self.m_val, -self.m_min)
        pend = self.p_val > self.m_val
        ms_s = np.where(pend, np.maximum(self.p_val, -self.p_min), ms_m)
        qv_s = np.where(pend, self.p_qv, self.m_qv)
        ms_c = np.maximum(self.run_max, -self.run_min)
        done = self.hit
        m_star = np.stack([ms_m, np.where(done, ms_m, ms_c), np.where(done, ms_m, ms_s)], axis=1)
        qv = np.stack([self.m_qv, np.where(done, self.m_qv, self.qv),
                       np.where(done, self.m_qv, qv_s)], axis=1)
        b_s = np.where(pend, self.p_val, self.m_val)
        value = np.stack([self.m_val, np.where(done, self.m_val, self.x),
                          np.where(done, self.m_val, b_s)], axis=1)
        w = np.stack([np.where(done, 1.0, xp), np.where(done, 0.0, (1 - xp) * (1 - c)),
                      np.where(done, 0.0, (1 - xp) * c)], axis=1)
        return m_star, qv, value, w

    def stopped_index_law(self, fine, thr):
        """Law of ``rho ^ thr`` given the scanned path, for ``thr <= horizon``.

        ``fine`` holds the nodes ``0..horizon`` of the same rows. On paths that
        reached the level, ``rho ^ thr`` is known and carries weight 1. On
        capped paths the future after the cap is a fresh Brownian motion, and
        ``rho ^ thr`` takes one of three known nodes (``thr``, the confirmed
        argmax, or the argmax over ``[0, thr]``) with probabilities given by
        gambler's-ruin exits of ``(0, 1)``.

        Returns ``(indices, weights)``, each of shape ``(3, n_rows)``.
        """
        fine = np.atleast_2d(fine)
        nr = fine.shape[0]
        n = self.horizon_node
        thr = np.broadcast_to(np.asarray(thr, dtype=np.int64), (nr,))
        idx = np.arange(n + 1)[None, :]
        S, R = _masked_max(fine, idx <= thr[:, None])
        zc = self.z_last
        in_ext = zc > n
        after_thr = idx > thr[:, None]
        q_fine, _ = _masked_max(fine, after_thr & (idx <= zc[:, None]))
        q = np.where(in_ext, np.maximum(_masked_max(fine, after_thr)[0], self.ext_conf), q_fine)
        p_fine, _ = _masked_max(fine, idx > np.maximum(thr, zc)[:, None])
        pend = np.where(in_ext, self.ext_pend, np.maximum(p_fine, self.ext_pend))
        xp = np.maximum(self.x, 0.0)
        decided = q > S
        exceeded = pend > S
        p_yes = np.where(decided, 1.0, np.where(exceeded, 1.0 - xp, 1.0 - S))
        p_m = np.where(decided, 0.0, np.where(zc < thr, xp, 0.0))
        p_r = np.clip(1.0 - p_yes - p_m, 0.0, 1.0)

        done = self.hit
        rho_thr = np.minimum(self.m_idx, thr)
        indices = np.stack([np.where(done, rho_thr, thr),
                            np.where(done, rho_thr, np.minimum(self.m_idx, thr)),
                            np.where(done, rho_thr, R)])
        weights = np.stack([np.where(done, 1.0, p_yes),
                            np.where(done, 0.0, p_m),
                            np.where(done, 0.0, p_r)])
        return indices, weights
