"""Brownian paths, stochastic integrals and compensated Poisson paths on a dyadic grid."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import rng
from .errors import AlignmentError, ConfigurationError

__all__ = [
    "GridSpec",
    "PathBundle",
    "Ensemble",
    "IntegrandSpec",
    "brownian_values",
    "generate_brownian",
    "extend_until_hit",
    "quadratic_variation",
    "running_max_abs",
    "integrate",
    "stochastic_integral",
    "compensated_poisson",
    "coarsen",
    "qv_refinement_factor",
]

KINDS = ("brownian", "integral", "jump")


@dataclass(frozen=True)
class GridSpec:
    """Uniform time grid shared by every path of an experiment.

    ``n_steps`` must be a power of two so that ``dt = horizon / n_steps`` is exact
    for a dyadic horizon and grids obtained by halving nest into each other.
    Paths that must run past ``horizon`` grow by ``extension_chunk`` steps at a
    time and stop at ``hard_cap``.
    """

    horizon: float = 1.0
    n_steps: int = 1024
    extension_chunk: int = 1024
    hard_cap: float = 16.0

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}")
        n = int(self.n_steps)
        if n != self.n_steps or n < 1 or n & (n - 1):
            raise ConfigurationError(f"n_steps must be a power of two, got {self.n_steps}")
        if int(self.extension_chunk) != self.extension_chunk or self.extension_chunk < 1:
            raise ConfigurationError(f"extension_chunk must be >= 1, got {self.extension_chunk}")
        if self.hard_cap < self.horizon:
            raise ConfigurationError(
                f"hard_cap ({self.hard_cap}) must be >= horizon ({self.horizon})")
        if self.dt <= 0:
            raise ConfigurationError("grid has non-positive dt")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def cap_steps(self) -> int:
        """Index of the last node a path may reach."""
        return int(np.floor(self.hard_cap / self.dt + 1e-9))

    def times(self, n_nodes: int | None = None) -> np.ndarray:
        n_nodes = self.n_steps + 1 if n_nodes is None else n_nodes
        return np.arange(n_nodes) * self.dt

    def node(self, t: float) -> int:
        """Nearest grid node to time ``t``."""
        return int(np.rint(t / self.dt))

    def coarsen(self, factor: int) -> "GridSpec":
        if self.n_steps % factor:
            raise ConfigurationError(f"cannot coarsen {self.n_steps} steps by {factor}")
        return GridSpec(self.horizon, self.n_steps // factor,
                        max(self.extension_chunk // factor, 1), self.hard_cap)

    def refine(self, factor: int = 2) -> "GridSpec":
        return GridSpec(self.horizon, self.n_steps * factor,
                        self.extension_chunk * factor, self.hard_cap)

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "n_steps": self.n_steps,
                "extension_chunk": self.extension_chunk, "hard_cap": self.hard_cap}


def quadratic_variation(path) -> np.ndarray:
    """Cumulative sum of squared increments along the last axis, starting at 0."""
    values = np.asarray(getattr(path, "values", path), dtype=float)
    qv = np.zeros_like(values)
    qv[..., 1:] = np.cumsum(np.diff(values, axis=-1) ** 2, axis=-1)
    return qv


def running_max_abs(path) -> np.ndarray:
    """Pointwise ``sup_{s <= t} |M_s|`` on the grid nodes."""
    values = np.asarray(getattr(path, "values", path), dtype=float)
    return np.maximum.accumulate(np.abs(values), axis=-1)


@dataclass
class PathBundle:
    """One trajectory with its pathwise functionals.

    ``qv`` is the continuous quadratic variation and ``bracket`` the full
    bracket ``[M]``; they coincide except for jump paths.
    """

    grid: GridSpec
    values: np.ndarray
    running_max_abs: np.ndarray
    qv: np.ndarray
    bracket: np.ndarray
    kind: str = "brownian"

    @classmethod
    def from_values(cls, grid, values, kind="brownian", qv=None, bracket=None):
        values = np.asarray(values, dtype=float)
        if kind not in KINDS:
            raise ConfigurationError(f"unknown path kind {kind!r}")
        if qv is None:
            qv = quadratic_variation(values)
        if bracket is None:
            bracket = qv
        return cls(grid, values, running_max_abs(values), np.asarray(qv, float),
                   np.asarray(bracket, float), kind)

    def __len__(self):
        return self.values.shape[-1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times(len(self))


@dataclass
class Ensemble:
    """Equal-length paths stored as 2-D arrays (path, node)."""

    grid: GridSpec
    values: np.ndarray
    running_max_abs: np.ndarray
    qv: np.ndarray
    bracket: np.ndarray
    kind: str = "brownian"
    seed: int | None = None
    path_ids: np.ndarray = field(default=None)

    @classmethod
    def from_values(cls, grid, values, kind="brownian", qv=None, bracket=None,
                    seed=None, path_ids=None):
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if qv is None:
            qv = quadratic_variation(values)
        if bracket is None:
            bracket = qv
        if path_ids is None:
            path_ids = np.arange(values.shape[0])
        return cls(grid, values, running_max_abs(values), qv, bracket, kind, seed,
                   np.asarray(path_ids))

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i) -> PathBundle:
        return PathBundle(self.grid, self.values[i], self.running_max_abs[i],
                          self.qv[i], self.bracket[i], self.kind)

    def __iter__(self) -> Iterator[PathBundle]:
        for i in range(len(self)):
            yield self[i]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times(self.n_nodes)


def _path_ids(n_paths, path_ids):
    if path_ids is None:
        if n_paths < 1:
            raise ConfigurationError(f"n_paths must be >= 1, got {n_paths}")
        return np.arange(n_paths, dtype=np.int64)
    return np.asarray(path_ids, dtype=np.int64)


def brownian_values(grid: GridSpec, seed: int, path_ids, start: int = 0,
                    stop: int | None = None, x0=0.0) -> np.ndarray:
    """Raw Brownian node values for steps ``start..stop`` (nodes ``start+1..stop``).

    With ``start = 0`` the returned array includes node 0 (value ``x0``);
    otherwise it holds only the new nodes, continuing from ``x0``.
    """
    stop = grid.n_steps if stop is None else stop
    z = rng.normal_blocks(seed, path_ids, start, stop, grid.extension_chunk)
    z *= np.sqrt(grid.dt)
    np.cumsum(z, axis=1, out=z)
    z += np.asarray(x0, dtype=float).reshape(-1, 1)
    if start == 0:
        out = np.empty((z.shape[0], z.shape[1] + 1))
        out[:, 0] = x0
        out[:, 1:] = z
        return out
    return z


def generate_brownian(grid: GridSpec, seed: int, n_paths: int = 1, path_ids=None) -> Ensemble:
    """Brownian ensemble on ``[0, grid.horizon]``.

    Path ``i`` is a pure function of ``(seed, i, grid)``: generating paths
    ``0..9`` or only path ``7`` gives the same path ``7``.
    """
    ids = _path_ids(n_paths, path_ids)
    values = brownian_values(grid, seed, ids)
    return Ensemble.from_values(grid, values, "brownian", seed=seed, path_ids=ids)


def extend_until_hit(grid: GridSpec, seed: int, path_id: int, level: float = 1.0):
    """Single Brownian path run until it first reaches ``level`` or the hard cap.

    Returns ``(path, capped)``. The path covers at least ``[0, horizon]`` and
    grows in chunks of ``grid.extension_chunk`` steps.
    """
    values = brownian_values(grid, seed, [path_id])[0]
    cap = grid.cap_steps
    while True:
        hits = np.flatnonzero(values >= level)
        if hits.size:
            break
        n = values.size - 1
        if n >= cap:
            return PathBundle.from_values(grid, values), True
        stop = min(n + grid.extension_chunk, cap)
        more = brownian_values(grid, seed, [path_id], n, stop, x0=values[-1])[0]
        values = np.concatenate([values, more])
    return PathBundle.from_values(grid, values), False


def coarsen(path, factor: int):
    """Keep every ``factor``-th node; the result lives on the coarser nested grid."""
    grid = path.grid.coarsen(factor)
    values = path.values[..., ::factor]
    if isinstance(path, Ensemble):
        return Ensemble.from_values(grid, values, path.kind, seed=path.seed,
                                    path_ids=path.path_ids)
    return PathBundle.from_values(grid, values, path.kind)


def qv_refinement_factor(path, factor: int = 2) -> float:
    """Mean squared error of the terminal quadratic variation, coarse over fine.

    The coarse grid keeps every ``factor``-th node of the same paths; for
    Brownian paths the error scales like ``dt`` and the factor is close to
    ``factor``.
    """
    v = np.atleast_2d(np.asarray(path.values, dtype=float))
    T = (v.shape[1] - 1) * path.grid.dt
    fine = quadratic_variation(v)[:, -1]
    coarse = quadratic_variation(v[:, ::factor])[:, -1]
    return float(np.mean((coarse - T) ** 2) / np.mean((fine - T) ** 2))


_STATE_FUNCTIONS = {
    "identity": lambda x: x,
    "abs": np.abs,
    "sign": np.sign,
    "tanh": np.tanh,
    "cos": np.cos,
}


@dataclass(frozen=True)
class IntegrandSpec:
    """Predictable integrand, evaluated at the left end of each step.

    ``form`` is one of ``constant`` (``k``), ``function_of_Z``
    (``f(z) = (z + c) ** -alpha``, needs the Azema path as ``aux``) or
    ``function_of_state`` (a named function of the driver value).
    """

    form: str
    k: float = 1.0
    alpha: float = 0.0
    c: float = 1.0
    name: str = "identity"
    description: str = ""

    def __post_init__(self):
        if self.form not in ("constant", "function_of_Z", "function_of_state"):
            raise ConfigurationError(f"unknown integrand form {self.form!r}")
        if self.form == "function_of_Z":
            if self.alpha < 0:
                raise ConfigurationError("alpha must be >= 0")
            if self.c <= 0:
                raise ConfigurationError("c must be > 0 for function_of_Z")
        if self.form == "function_of_state" and self.name not in _STATE_FUNCTIONS:
            raise ConfigurationError(
                f"unknown state function {self.name!r}; choose from {sorted(_STATE_FUNCTIONS)}")

    @classmethod
    def constant(cls, k: float = 1.0):
        return cls("constant", k=k, description=f"constant {k:g}")

    @classmethod
    def function_of_Z(cls, alpha: float, c: float):
        return cls("function_of_Z", alpha=alpha, c=c, description=f"(Z + {c:g})^-{alpha:g}")

    @classmethod
    def function_of_state(cls, name: str):
        return cls("function_of_state", name=name, description=f"{name}(X)")

    def weights(self, driver_values, aux=None) -> np.ndarray:
        """Integrand on the left endpoints, one value per step."""
        x = np.asarray(driver_values, dtype=float)[..., :-1]
        if self.form == "constant":
            return np.full(x.shape, float(self.k))
        if self.form == "function_of_state":
            return _STATE_FUNCTIONS[self.name](x)
        if aux is None:
            raise AlignmentError("function_of_Z integrand needs the Z path as aux")
        z = np.asarray(aux, dtype=float)
        if z.shape != np.shape(driver_values):
            raise AlignmentError(
                f"aux shape {z.shape} does not match driver shape {np.shape(driver_values)}")
        return (z[..., :-1] + self.c) ** (-self.alpha)


def integrate(weights, driver_values):
    """Left-point sums ``sum w_k (X_{k+1} - X_k)`` and the matching ``sum w_k^2 dX_k^2``."""
    w = np.asarray(weights, dtype=float)
    dx = np.diff(np.asarray(driver_values, dtype=float), axis=-1)
    if w.shape != dx.shape:
        raise AlignmentError(f"integrand shape {w.shape} does not match increments {dx.shape}")
    values = np.zeros(dx.shape[:-1] + (dx.shape[-1] + 1,))
    qv = np.zeros_like(values)
    values[..., 1:] = np.cumsum(w * dx, axis=-1)
    qv[..., 1:] = np.cumsum((w * dx) ** 2, axis=-1)
    return values, qv


def stochastic_integral(integrand: IntegrandSpec, driver, aux=None):
    """Ito integral of ``integrand`` against ``driver`` on the driver's grid."""
    if aux is not None and np.shape(aux) != np.shape(driver.values):
        raise AlignmentError(
            f"aux shape {np.shape(aux)} does not match driver shape {np.shape(driver.values)}")
    values, qv = integrate(integrand.weights(driver.values, aux), driver.values)
    if isinstance(driver, Ensemble):
        return Ensemble.from_values(driver.grid, values, "integral", qv=qv,
                                    seed=driver.seed, path_ids=driver.path_ids)
    return PathBundle.from_values(driver.grid, values, "integral", qv=qv)


def poisson_counts(grid: GridSpec, lam: float, seed: int, path_ids, stop: int | None = None):
    """Cumulative jump counts ``N`` at nodes ``0..stop``."""
    stop = grid.n_steps if stop is None else stop
    inc = rng.poisson_blocks(seed, path_ids, 0, stop, grid.extension_chunk, lam * grid.dt)
    counts = np.zeros((inc.shape[0], stop + 1))
    counts[:, 1:] = np.cumsum(inc, axis=1)
    return counts


def compensated_poisson(lam: float, grid: GridSpec, seed: int, n_paths: int = 1,
                        path_ids=None) -> Ensemble:
    """``M_t = N_t - lam t`` with bracket ``[M]_t = N_t`` and zero continuous part."""
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    ids = _path_ids(n_paths, path_ids)
    counts = poisson_counts(grid, lam, seed, ids)
    values = counts - lam * grid.times()[None, :]
    return Ensemble.from_values(grid, values, "jump", qv=np.zeros_like(values),
                                bracket=counts, seed=seed, path_ids=ids)
