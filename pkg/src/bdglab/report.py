"""Experiment configuration and report assembly.

A run reads one JSON config, simulates every requested experiment for every
listed catalog time and writes ``report.json`` plus per-experiment CSV files.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .azema import EPSILON
from .bdg_lab import (bmo_blowup_diagnostic, counterexample_indicator, moment_ratio_from_samples,
                      sweep_report, uniformity_diagnostics)
from .enlargement import DEFAULT_ALPHA, martingale_test, mean_test, standard_probe_family
from .errors import ConfigurationError
from .experiments import PROBE_TIMES, simulate, terminal_values
from .paths import GridSpec
from .random_times import CATALOG, catalog_entries, parse_time

__all__ = ["ExperimentConfig", "EXPERIMENT_TYPES", "run", "list_catalog", "CSV_COLUMNS"]

EXPERIMENT_TYPES = ("moment_ratio", "bracket_ratio", "optional_stopping", "martingale_test",
                    "counterexample", "uniformity", "bmo_blowup", "adversarial_sweep")

CSV_COLUMNS = ("path_id", "rho", "m_star", "qv_at_rho", "i_rho", "j_bmo")

_TOP_KEYS = {"seed", "grid", "n_paths", "time_specs", "experiments", "output_dir",
             "epsilon_floor", "refinement_factor", "probe_family"}

# per-experiment keys besides "type"
_EXP_KEYS = {
    "moment_ratio": {"p"},
    "bracket_ratio": {"lambda", "p"},
    "optional_stopping": {"unbounded_probe"},
    "martingale_test": {"adversarial_alpha", "adversarial_c", "probe_times"},
    "counterexample": {"K"},
    "uniformity": set(),
    "bmo_blowup": {"tolerance"},
    "adversarial_sweep": {"alpha", "c"},
}
_COMMON = {"type", "n_paths", "n_steps", "time_specs", "hard_cap", "n_resamples"}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    grid: GridSpec
    n_paths: int
    time_specs: tuple
    experiments: tuple
    output_dir: str = "bdglab-out"
    epsilon_floor: float = EPSILON
    refinement_factor: int = 4
    probe_family: dict = field(default_factory=lambda: {"a": -0.5, "b": 0.5, "lam": 1.0})

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        unknown = set(data) - _TOP_KEYS
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            grid = GridSpec(**data.get("grid", {}))
        except TypeError as exc:
            raise ConfigurationError(f"bad grid block: {exc}") from None
        specs = tuple(parse_time(s).validate(grid) for s in data.get("time_specs", []))
        exps = tuple(_check_experiment(e, grid) for e in data.get("experiments", []))
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
            raise ConfigurationError(f"seed must be an integer in [0, 2**64), got {seed!r}")
        n_paths = data.get("n_paths", 10_000)
        if not isinstance(n_paths, int) or n_paths < 1000:
            raise ConfigurationError(f"n_paths must be an integer >= 1000, got {n_paths!r}")
        eps = float(data.get("epsilon_floor", EPSILON))
        if not eps > 0:
            raise ConfigurationError("epsilon_floor must be positive")
        factor = int(data.get("refinement_factor", 4))
        if factor < 0 or (factor and grid.n_steps % factor):
            raise ConfigurationError(f"refinement_factor {factor} must divide n_steps")
        probes = {"a": -0.5, "b": 0.5, "lam": 1.0}
        probes.update(data.get("probe_family", {}))
        return cls(seed, grid, n_paths, specs, exps, str(data.get("output_dir", "bdglab-out")),
                   eps, factor, probes)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def with_overrides(self, seed=None, n_paths=None, output_dir=None) -> "ExperimentConfig":
        out = self
        if seed is not None:
            out = replace(out, seed=int(seed))
        if n_paths is not None:
            if n_paths < 1000:
                raise ConfigurationError(f"n_paths must be >= 1000, got {n_paths}")
            out = replace(out, n_paths=int(n_paths))
        if output_dir is not None:
            out = replace(out, output_dir=str(output_dir))
        return out

    def to_dict(self) -> dict:
        return {"seed": self.seed, "grid": self.grid.to_dict(), "n_paths": self.n_paths,
                "time_specs": [s.identifier for s in self.time_specs],
                "experiments": [dict(e) for e in self.experiments],
                "output_dir": self.output_dir, "epsilon_floor": self.epsilon_floor,
                "refinement_factor": self.refinement_factor,
                "probe_family": dict(self.probe_family)}


def _check_experiment(exp, grid) -> dict:
    if not isinstance(exp, dict) or "type" not in exp:
        raise ConfigurationError(f"experiment entries need a 'type', got {exp!r}")
    kind = exp["type"]
    if kind not in _EXP_KEYS:
        raise ConfigurationError(
            f"unknown experiment type {kind!r}; valid types: {', '.join(EXPERIMENT_TYPES)}")
    unknown = set(exp) - _EXP_KEYS[kind] - _COMMON
    if unknown:
        raise ConfigurationError(f"{kind}: unknown keys {sorted(unknown)}")
    for s in exp.get("time_specs", []):
        parse_time(s).validate(_exp_grid(grid, exp))
    if kind == "adversarial_sweep":
        cs = exp.get("c", [1.0, 0.1, 0.01, 0.001])
        if any(b >= a for a, b in zip(cs, cs[1:])) or min(cs) <= 0:
            raise ConfigurationError("adversarial_sweep: c grid must be positive and decreasing")
        if exp.get("alpha", 1.0) < 0:
            raise ConfigurationError("adversarial_sweep: alpha must be >= 0")
    if kind == "bracket_ratio" and exp.get("lambda", 2.0) < 0:
        raise ConfigurationError("bracket_ratio: lambda must be >= 0")
    for p in np.atleast_1d(exp.get("p", 2.0)):
        if not p > 0:
            raise ConfigurationError(f"{kind}: p must be positive")
    if "n_paths" in exp and exp["n_paths"] < 1000:
        raise ConfigurationError(f"{kind}: n_paths must be >= 1000")
    _exp_grid(grid, exp)
    return dict(exp)


def _exp_grid(grid: GridSpec, exp: dict) -> GridSpec:
    n = exp.get("n_steps", grid.n_steps)
    chunk = max(grid.extension_chunk * n // grid.n_steps, 1)
    return GridSpec(grid.horizon, n, chunk, exp.get("hard_cap", grid.hard_cap))


def list_catalog() -> str:
    rows = catalog_entries()
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    lines = [f"{'identifier':<{w0}}  {'kind':<{w1}}  note"]
    lines += [f"{i:<{w0}}  {k:<{w1}}  {note}" for i, k, note in rows]
    return "\n".join(lines) + "\n"


# --- output helpers ----------------------------------------------------------

def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_clean(v) for v in x.tolist()]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else None
    return x


def _fmt(x) -> str:
    x = float(x)
    return repr(x) if np.isfinite(x) else ""


def _slug(identifier: str) -> str:
    return identifier.replace(":", "_")


def _write_paths_csv(path, res, dt, m_key="m_star", q_key="qv_at_rho"):
    n = res["path_id"].size
    i_rho = res.get("i_rho", np.full(n, np.nan))
    j_bmo = res.get("j_bmo", np.full(n, np.nan))
    rho = np.where(res["capped"], np.nan, res["rho_index"] * dt)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in zip(res["path_id"], rho, res[m_key], res[q_key], i_rho, j_bmo):
            w.writerow([int(row[0])] + [_fmt(v) for v in row[1:]])


def _write_table_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def check_output_dir(path) -> Path:
    """Create ``path`` and make sure files can be written there (raises ``OSError``)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".bdglab-write-test"
    with open(probe, "w", encoding="utf-8") as fh:
        fh.write("")
    probe.unlink()
    return out


# --- experiments --------------------------------------------------------------------

def _exclusions(res) -> dict:
    return {"capped": int(np.sum(res["capped"])), "boundary": int(np.sum(res["boundary"])),
            "floored_steps": int(res.get("floored_steps", 0)),
            "coarse_capped": int(res.get("coarse_capped", 0))}


def _moment_block(cfg, exp, spec, grid, out_dir, workers):
    n_paths = exp.get("n_paths", cfg.n_paths)
    res = simulate(spec, grid, cfg.seed, n_paths, {"azema": {"bmo": True}}, eps=cfg.epsilon_floor,
                   workers=workers)
    keep = ~res["capped"]
    n_res = exp.get("n_resamples", 1000)
    reports, uncapped = [], []
    for p in np.atleast_1d(exp.get("p", 2.0)):
        # rho ^ hard_cap on every path; capped paths enter through their conditional law
        reports.append(moment_ratio_from_samples(res["trunc_m_star"], res["trunc_qv"], float(p),
                                                 0, cfg.seed, n_res,
                                                 weights=res["trunc_w"]).to_dict())
        uncapped.append(moment_ratio_from_samples(res["m_star"][keep], res["qv_at_rho"][keep],
                                                  float(p), int((~keep).sum()), cfg.seed,
                                                  n_res).to_dict())
    name = f"moment_ratio__{_slug(spec.identifier)}.csv"
    _write_paths_csv(out_dir / name, res, grid.dt)
    return {"reports": reports, "uncapped_only": uncapped, "time_truncated_at": grid.hard_cap,
            "exclusions": _exclusions(res), "csv": name}


def _bracket_block(cfg, exp, spec, grid, out_dir, workers):
    n_paths = exp.get("n_paths", cfg.n_paths)
    lam = float(exp.get("lambda", 2.0))
    res = simulate(spec, grid, cfg.seed, n_paths, {"poisson": {"lam": lam}}, workers=workers)
    keep = ~res["capped"]
    reports = [moment_ratio_from_samples(res["poisson_m_star"][keep], res["poisson_bracket"][keep],
                                         float(p), int((~keep).sum()), cfg.seed,
                                         exp.get("n_resamples", 1000), bracket=True).to_dict()
               for p in np.atleast_1d(exp.get("p", 2.0))]
    br = res["poisson_bracket"][keep]
    name = f"bracket_ratio__{_slug(spec.identifier)}.csv"
    _write_paths_csv(out_dir / name, res, grid.dt, "poisson_m_star", "poisson_bracket")
    return {"lambda": lam, "reports": reports,
            "bracket_mean": float(br.mean()) if br.size else None,
            "bracket_se": float(br.std(ddof=1) / np.sqrt(br.size)) if br.size > 1 else None,
            "exclusions": _exclusions(res), "csv": name}


def _optional_stopping_block(cfg, exp, spec, grid, out_dir, workers):
    n_paths = exp.get("n_paths", cfg.n_paths)
    factor = cfg.refinement_factor
    unbounded = bool(exp.get("unbounded_probe", False))
    tasks = {"probes": {"family": dict(cfg.probe_family), "unbounded": unbounded}}
    res = simulate(spec, grid, cfg.seed, n_paths, tasks, factor=factor, workers=workers)
    names = [p.name for p in standard_probe_family(**cfg.probe_family)]
    if unbounded:
        names.append("brownian")
    reports = []
    for name in names:
        f = res["probe_" + name]
        details = {}
        if "probe_u_" + name in res:
            u = res["probe_u_" + name]
            u = u[np.isfinite(u)]
            details["uncapped_only_mean"] = float(u.mean()) if u.size else None
            details["uncapped_only_se"] = float(u.std(ddof=1) / np.sqrt(u.size)) if u.size > 1 else None
        coarse = res.get("probe_c_" + name) if factor else None
        reports.append(mean_test(f, name, alpha=DEFAULT_ALPHA, coarse=coarse, factor=factor or 4,
                                 details=details).to_dict())
    name = f"optional_stopping__{_slug(spec.identifier)}.csv"
    _write_paths_csv(out_dir / name, res, grid.dt)
    return {"reports": reports, "exclusions": _exclusions(res), "csv": name,
            "completed_capped_paths": int(np.sum(res["capped"]))}


def _martingale_block(cfg, exp, spec, grid, out_dir, workers):
    n_paths = exp.get("n_paths", cfg.n_paths)
    times = tuple(exp.get("probe_times", PROBE_TIMES))
    tasks = {"martingale": {"times": times}}
    decomposable = spec.kind in ("deterministic", "last_zero_before", "argmax_before")
    if decomposable:
        tasks["decomposition"] = {"times": times, "alpha": exp.get("adversarial_alpha", 1.0),
                                  "c": exp.get("adversarial_c", 1e-2)}
    res = simulate(spec, grid, cfg.seed, n_paths, tasks, eps=cfg.epsilon_floor, workers=workers)
    block = {"probe_times": list(times),
             "reports": [martingale_test(res["mt_stopped"], times,
                                         name="stopped_brownian").to_dict()],
             "exclusions": _exclusions(res)}
    if decomposable:
        block["reports"] += [
            martingale_test(res["dec_b_tilde"], times, name="m_tilde_brownian").to_dict(),
            martingale_test(res["dec_adv_stopped"], times, name="stopped_adversarial").to_dict(),
            martingale_test(res["dec_adv_tilde"], times, name="m_tilde_adversarial").to_dict(),
        ]
        block["identity_max_abs_error"] = res["dec_identity_max"]
        block["drift_after_rho_max_abs_change"] = res["dec_drift_after_max"]
        block["exclusions"]["floored_steps"] = int(res["dec_floored_steps"])
    name = f"martingale_test__{_slug(spec.identifier)}.csv"
    _write_paths_csv(out_dir / name, res, grid.dt)
    block["csv"] = name
    return block


def _uniformity_block(cfg, exp, spec, grid, out_dir, workers):
    n_paths = exp.get("n_paths", cfg.n_paths)
    res = simulate(spec, grid, cfg.seed, n_paths, {"azema": {"bmo": False}}, workers=workers)
    I = res["i_rho"][~res["capped"]]
    name = f"uniformity__{_slug(spec.identifier)}.csv"
    _write_paths_csv(out_dir / name, res, grid.dt)
    return {"diagnostics": uniformity_diagnostics(I), "exclusions": _exclusions(res), "csv": name}


def _bmo_block(cfg, exp, spec, grid, out_dir, workers):
    n_paths = exp.get("n_paths", cfg.n_paths)
    tasks = {"azema": {"bmo": True}, "doob_meyer": {"tolerance": exp.get("tolerance", 1e-2)}}
    res = simulate(spec, grid, cfg.seed, n_paths, tasks, eps=cfg.epsilon_floor, workers=workers)
    keep = ~res["capped"]
    diag = bmo_blowup_diagnostic(res["j_bmo"][keep], res["i_rho"][keep],
                                 res.get("floored_steps", 0), res.get("integrated_steps"))
    diag.pop("scatter")
    block = {"diagnostics": diag, "exclusions": _exclusions(res)}
    if "a_final" in res:
        a = res["a_final"]
        block["doob_meyer"] = {"a_final_mean": float(a.mean()),
                               "a_final_se": float(a.std(ddof=1) / np.sqrt(a.size)),
                               "negative_step_fraction": res["a_negative_steps"] / res["a_steps"],
                               "tolerance": exp.get("tolerance", 1e-2)}
    name = f"bmo_blowup__{_slug(spec.identifier)}.csv"
    _write_paths_csv(out_dir / name, res, grid.dt)
    block["csv"] = name
    return block


def _sweep_block(cfg, exp, spec, grid, out_dir, workers):
    n_paths = exp.get("n_paths", cfg.n_paths)
    alpha = float(exp.get("alpha", 1.0))
    cs = [float(c) for c in exp.get("c", [1.0, 0.1, 0.01, 0.001])]
    if spec.kind not in ("deterministic", "last_zero_before", "argmax_before"):
        return {"skipped": f"no closed-form Z on the horizon for {spec.identifier}"}
    res = simulate(spec, grid, cfg.seed, n_paths, {"sweep": {"alpha": alpha, "c_values": cs}},
                   workers=workers)
    samples = {c: (res[f"sweep_num_{j}"], res[f"sweep_den_{j}"]) for j, c in enumerate(cs)}
    rep = sweep_report(alpha, cs, samples, cfg.seed, exp.get("n_resamples", 1000))
    name = f"adversarial_sweep__{_slug(spec.identifier)}.csv"
    _write_table_csv(out_dir / name, ["c", "ratio", "ci_low", "ci_high"],
                     [(c, r, lo, hi) for c, r, (lo, hi) in zip(cs, rep.ratios, rep.cis)])
    return {"sweep": rep.to_dict(), "exclusions": _exclusions(res), "csv": name}


_BLOCKS = {
    "moment_ratio": _moment_block,
    "bracket_ratio": _bracket_block,
    "optional_stopping": _optional_stopping_block,
    "martingale_test": _martingale_block,
    "uniformity": _uniformity_block,
    "bmo_blowup": _bmo_block,
    "adversarial_sweep": _sweep_block,
}


def _counterexample_block(cfg, exp, grid, out_dir, workers):
    n_paths = exp.get("n_paths", cfg.n_paths)
    b1 = terminal_values(grid, cfg.seed, n_paths, workers)
    rows = counterexample_indicator(exp.get("K", [0, 1, 2, 3]), b1)
    name = "counterexample.csv"
    _write_table_csv(out_dir / name, ["K", "count", "fraction", "ratio", "se"],
                     [(r["K"], r["count"], r["fraction"], r["ratio"], r["se"]) for r in rows])
    return {"rows": rows, "csv": name}


def run(config: ExperimentConfig, workers: int | None = None) -> dict:
    """Run every experiment of ``config`` and write the report files.

    Returns the report dictionary (also written to ``report.json``).
    """
    out_dir = check_output_dir(config.output_dir)
    start = time.perf_counter()
    blocks = []
    for exp in config.experiments:
        grid = _exp_grid(config.grid, exp)
        header = {"type": exp["type"], "grid": grid.to_dict(),
                  "n_paths": exp.get("n_paths", config.n_paths)}
        if exp["type"] == "counterexample":
            blocks.append({**header, **_counterexample_block(config, exp, grid, out_dir, workers)})
            continue
        specs = [parse_time(s) for s in exp.get("time_specs", [])] or list(config.time_specs)
        for spec in specs:
            body = _BLOCKS[exp["type"]](config, exp, spec.validate(grid), grid, out_dir, workers)
            blocks.append({**header, "time_spec": spec.identifier, **body})
    report = {
        "artifact_version": __version__,
        "config": config.to_dict(),
        "experiments": blocks,
        "exclusions": _total_exclusions(blocks),
        "wall_clock_seconds": round(time.perf_counter() - start, 3),
    }
    report = _clean(report)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2, ensure_ascii=False)
        fh.write("\n")
    return report


def _total_exclusions(blocks) -> dict:
    tot = {"capped": 0, "boundary": 0, "floored_steps": 0, "coarse_capped": 0}
    for b in blocks:
        for k, v in b.get("exclusions", {}).items():
            tot[k] = tot.get(k, 0) + int(v)
    return tot


def default_catalog_identifiers():
    return [s.identifier for s in CATALOG]
